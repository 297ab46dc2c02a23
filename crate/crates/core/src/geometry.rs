//! Grid indexing, agent poses and the pyramid field of view.
//!
//! Orientation convention: cells are flattened row-major, `North` points
//! toward decreasing row index and `East` toward increasing column index.
//! Agents sit at cell centers, and a cell center is the integer point
//! `(row, col)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain(format!("grid must be non-empty, got {rows}x{cols}")));
        }
        Ok(Self { rows, cols })
    }

    /// Number of cells, `rows * cols`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.rows && (col as usize) < self.cols
    }

    pub fn cells(&self) -> impl Iterator<Item = CellCoord> + '_ {
        (0..self.rows).flat_map(move |row| (0..self.cols).map(move |col| CellCoord { row, col }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellCoord {
    pub row: usize,
    pub col: usize,
}

impl CellCoord {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Row-major index of `coord`.
pub fn flatten(coord: CellCoord, grid: GridSpec) -> Result<usize> {
    if coord.row >= grid.rows || coord.col >= grid.cols {
        return Err(Error::domain(format!(
            "cell ({}, {}) outside {}x{} grid",
            coord.row, coord.col, grid.rows, grid.cols
        )));
    }
    Ok(coord.row * grid.cols + coord.col)
}

pub fn unflatten(index: usize, grid: GridSpec) -> Result<CellCoord> {
    if index >= grid.len() {
        return Err(Error::domain(format!(
            "index {index} outside grid of {} cells",
            grid.len()
        )));
    }
    Ok(CellCoord::new(index / grid.cols, index % grid.cols))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    /// Unit step `(drow, dcol)` along the viewing direction.
    pub fn forward(self) -> (i64, i64) {
        match self {
            Heading::North => (-1, 0),
            Heading::East => (0, 1),
            Heading::South => (1, 0),
            Heading::West => (0, -1),
        }
    }

    /// Unit step to the agent's right.
    pub fn right(self) -> (i64, i64) {
        match self {
            Heading::North => (0, 1),
            Heading::East => (1, 0),
            Heading::South => (0, -1),
            Heading::West => (-1, 0),
        }
    }

    /// Heading after a quarter turn clockwise.
    pub fn rotated_cw(self) -> Heading {
        match self {
            Heading::North => Heading::East,
            Heading::East => Heading::South,
            Heading::South => Heading::West,
            Heading::West => Heading::North,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pose {
    pub cell: CellCoord,
    pub heading: Heading,
}

impl Pose {
    pub const fn new(cell: CellCoord, heading: Heading) -> Self {
        Self { cell, heading }
    }

    fn offset(&self, cell: CellCoord) -> (f64, f64) {
        (
            cell.row as f64 - self.cell.row as f64,
            cell.col as f64 - self.cell.col as f64,
        )
    }

    /// Components of the agent-to-cell vector along the heading and to the right.
    fn local(&self, cell: CellCoord) -> (f64, f64) {
        let (dr, dc) = self.offset(cell);
        let (fr, fc) = self.heading.forward();
        let (rr, rc) = self.heading.right();
        (dr * fr as f64 + dc * fc as f64, dr * rr as f64 + dc * rc as f64)
    }
}

/// Cells covered by one sensing action, ordered by ascending depth and then
/// left to right across the heading. `depths[q]` is the projection distance
/// of `cells[q]`.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FieldOfView {
    pub cells: Vec<CellCoord>,
    pub depths: Vec<u32>,
}

impl FieldOfView {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn position(&self, cell: CellCoord) -> Option<usize> {
        self.cells.iter().position(|&c| c == cell)
    }
}

/// The 90 degree pyramid ahead of `pose`: at depth `d` the `2d + 1` cells with
/// lateral offset in `-d..=d`, clipped to the grid.
pub fn compute_fov(pose: Pose, max_range: u32, grid: GridSpec) -> FieldOfView {
    let (fr, fc) = pose.heading.forward();
    let (rr, rc) = pose.heading.right();
    let (r0, c0) = (pose.cell.row as i64, pose.cell.col as i64);
    let mut fov = FieldOfView::default();
    for depth in 1..=max_range as i64 {
        for lateral in -depth..=depth {
            let row = r0 + depth * fr + lateral * rr;
            let col = c0 + depth * fc + lateral * rc;
            if grid.contains(row, col) {
                fov.cells.push(CellCoord::new(row as usize, col as usize));
                fov.depths.push(depth as u32);
            }
        }
    }
    fov
}

/// Distance from the agent to the plane through `cell` perpendicular to the
/// viewing direction, in cell units.
pub fn projection_distance(pose: Pose, cell: CellCoord) -> f64 {
    pose.local(cell).0.abs()
}

/// Euclidean distance and signed bearing (degrees, positive to the agent's
/// right, in `(-180, 180]`) of `cell` about the agent.
pub fn polar_about_agent(pose: Pose, cell: CellCoord) -> Result<(f64, f64)> {
    if cell == pose.cell {
        return Err(Error::domain("bearing undefined for the agent's own cell"));
    }
    let (ahead, lateral) = pose.local(cell);
    let radial = ahead.hypot(lateral);
    let mut bearing = lateral.atan2(ahead).to_degrees();
    if bearing <= -180.0 {
        bearing += 360.0;
    }
    Ok((radial, bearing))
}

/// A pose together with the cells it senses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensingAction {
    pub pose: Pose,
    pub fov: FieldOfView,
}

impl SensingAction {
    pub fn new(pose: Pose, max_range: u32, grid: GridSpec) -> Self {
        Self {
            pose,
            fov: compute_fov(pose, max_range, grid),
        }
    }

    /// Flattened grid indices of the FOV cells, i.e. the column of the
    /// single 1 in each row of the sensing matrix.
    pub fn indices(&self, grid: GridSpec) -> Vec<usize> {
        self.fov
            .cells
            .iter()
            .map(|c| c.row * grid.cols + c.col)
            .collect()
    }
}
