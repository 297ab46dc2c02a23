//! Ground truth and the stochastic sensing model.
//!
//! An observation is built from the 0/1 labels of the sensed cells in two
//! stages: each true target may first be displaced along the agent's line
//! of sight (location noise, realized as a swap between FOV cells), then
//! every cell receives one-sided Gaussian detection noise whose variance
//! grows with the square of its projection distance.

use std::collections::BTreeSet;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{polar_about_agent, CellCoord, FieldOfView, GridSpec, Pose, SensingAction};

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub beta: DVector<f64>,
    pub support: BTreeSet<usize>,
}

impl GroundTruth {
    pub fn from_support(len: usize, support: impl IntoIterator<Item = usize>) -> Result<Self> {
        let support: BTreeSet<usize> = support.into_iter().collect();
        if let Some(&i) = support.iter().find(|&&i| i >= len) {
            return Err(Error::domain(format!("support index {i} outside 0..{len}")));
        }
        let beta = DVector::from_fn(len, |i, _| if support.contains(&i) { 1.0 } else { 0.0 });
        Ok(Self { beta, support })
    }

    pub fn k(&self) -> usize {
        self.support.len()
    }

    pub fn is_target(&self, index: usize) -> bool {
        self.support.contains(&index)
    }
}

/// Direction of the one-sided detection noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectionNoise {
    /// `y = xi + |n|` for both labels: empty cells can read high, targets
    /// always read at least 1.
    #[default]
    Positive,
    /// `y = xi + |n|` for empty cells and `y = xi - |n|` for targets, so
    /// detection alone produces both false positives and false negatives.
    TowardWrongLabel,
}

/// Noise model parameters. Defaults are the desk-scale experiment values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    pub detection_noise: DetectionNoise,
    /// Detection variance at depth `l` is `detection_coeff * l^2`.
    pub detection_coeff: f64,
    /// Variance of the radial displacement of an observed target, cells^2.
    pub location_var: f64,
    /// Half-width of the uncertainty field around the line of sight, degrees.
    pub angular_spread: f64,
    /// Observation threshold above which a cell is treated as a candidate target.
    pub obs_threshold: f64,
    /// Half-width of the uncertainty field along the line of sight, cells.
    pub radial_field_bound: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            detection_noise: DetectionNoise::Positive,
            detection_coeff: 0.02,
            location_var: 0.4,
            angular_spread: 12.0,
            obs_threshold: 0.5,
            radial_field_bound: 2.0,
        }
    }
}

impl NoiseParams {
    /// No detection noise, no displacement and singleton uncertainty fields.
    pub fn noiseless() -> Self {
        Self {
            detection_noise: DetectionNoise::Positive,
            detection_coeff: 0.0,
            location_var: 0.0,
            angular_spread: 0.0,
            obs_threshold: 0.5,
            radial_field_bound: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("detection_coeff", self.detection_coeff),
            ("location_var", self.location_var),
            ("angular_spread", self.angular_spread),
            ("radial_field_bound", self.radial_field_bound),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(self.obs_threshold > 0.0 && self.obs_threshold < 1.0) {
            return Err(Error::config(format!(
                "obs_threshold must lie in (0, 1), got {}",
                self.obs_threshold
            )));
        }
        Ok(())
    }

    pub fn detection_variance(&self, depth: u32) -> f64 {
        let l = depth as f64;
        self.detection_coeff * l * l
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub values: Vec<f64>,
}

/// One `(X_t, y_t)` pair, tagged with its origin so that teammates can
/// deduplicate shared copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub action: SensingAction,
    pub observation: Observation,
    pub origin_agent: usize,
    pub seq: u64,
}

impl Measurement {
    pub fn new(action: SensingAction, observation: Observation, origin_agent: usize, seq: u64) -> Result<Self> {
        if action.fov.len() != observation.values.len() {
            return Err(Error::domain(format!(
                "observation length {} does not match FOV size {}",
                observation.values.len(),
                action.fov.len()
            )));
        }
        Ok(Self {
            action,
            observation,
            origin_agent,
            seq,
        })
    }

    pub fn key(&self) -> (usize, u64) {
        (self.origin_agent, self.seq)
    }
}

/// Draws `k` distinct target cells uniformly without replacement.
pub fn make_ground_truth<R: Rng + ?Sized>(grid: GridSpec, k: usize, rng: &mut R) -> Result<GroundTruth> {
    let m = grid.len();
    if k > m {
        return Err(Error::domain(format!("cannot place {k} targets in {m} cells")));
    }
    let picked = rand::seq::index::sample(rng, m, k);
    GroundTruth::from_support(m, picked.iter())
}

/// Detector output for label `xi`: the label plus half-normal noise of the
/// given variance, signed according to `model`.
pub fn sample_detection_noise<R: Rng + ?Sized>(model: DetectionNoise, xi: u8, variance: f64, rng: &mut R) -> f64 {
    let g: f64 = rng.sample(StandardNormal);
    let magnitude = (g * variance.max(0.0).sqrt()).abs();
    match (model, xi) {
        (DetectionNoise::TowardWrongLabel, 1) => 1.0 - magnitude,
        _ => xi as f64 + magnitude,
    }
}

/// Radially displaces each true target at FOV positions `true_hits` and
/// returns `(from, to)` FOV index pairs for those that land on a different
/// FOV cell. Displacements landing outside the FOV leave the target where
/// it is.
pub fn apply_location_noise<R: Rng + ?Sized>(
    fov: &FieldOfView,
    true_hits: &[usize],
    location_var: f64,
    pose: Pose,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let mut swaps = Vec::new();
    if location_var <= 0.0 {
        return swaps;
    }
    let sd = location_var.sqrt();
    for &q in true_hits {
        let cell = fov.cells[q];
        let delta: f64 = rng.sample::<f64, _>(StandardNormal) * sd;
        if let Some(to) = displaced_cell(pose, cell, delta).and_then(|c| fov.position(c)) {
            if to != q {
                swaps.push((q, to));
            }
        }
    }
    swaps
}

/// Cell nearest to the point `delta` cells beyond `cell` along the ray from
/// the agent through `cell`. `None` if that point rounds off the grid's
/// nonnegative quadrant.
fn displaced_cell(pose: Pose, cell: CellCoord, delta: f64) -> Option<CellCoord> {
    let (radial, _) = polar_about_agent(pose, cell).ok()?;
    let scale = (radial + delta) / radial;
    let (r0, c0) = (pose.cell.row as f64, pose.cell.col as f64);
    let row = (r0 + scale * (cell.row as f64 - r0)).round();
    let col = (c0 + scale * (cell.col as f64 - c0)).round();
    if row < 0.0 || col < 0.0 {
        return None;
    }
    Some(CellCoord::new(row as usize, col as usize))
}

/// `y = X beta + n_loc + n_det`.
pub fn sense<R: Rng + ?Sized>(
    truth: &GroundTruth,
    action: &SensingAction,
    params: &NoiseParams,
    grid: GridSpec,
    rng: &mut R,
) -> Result<Observation> {
    let hits = true_hits(truth, action, grid)?;
    let swaps = apply_location_noise(&action.fov, &hits, params.location_var, action.pose, rng);
    sense_with_swaps(&hits, &swaps, action, params, rng)
}

fn true_hits(truth: &GroundTruth, action: &SensingAction, grid: GridSpec) -> Result<Vec<usize>> {
    if action.fov.is_empty() {
        return Err(Error::domain("cannot sense with an empty field of view"));
    }
    Ok(action
        .indices(grid)
        .into_iter()
        .enumerate()
        .filter(|&(_, i)| truth.is_target(i))
        .map(|(q, _)| q)
        .collect())
}

/// Builds the observation from true FOV hits and a given swap list, then
/// adds detection noise using the post-swap labels. Two targets landing on
/// the same cell produce a single 1.
pub fn sense_with_swaps<R: Rng + ?Sized>(
    true_hits: &[usize],
    swaps: &[(usize, usize)],
    action: &SensingAction,
    params: &NoiseParams,
    rng: &mut R,
) -> Result<Observation> {
    let n = action.fov.len();
    if n == 0 {
        return Err(Error::domain("cannot sense with an empty field of view"));
    }
    let mut labels = vec![0u8; n];
    for &q in true_hits {
        let dest = swaps
            .iter()
            .find(|&&(from, _)| from == q)
            .map_or(q, |&(_, to)| to);
        labels[dest] = 1;
    }
    let values = labels
        .iter()
        .zip(&action.fov.depths)
        .map(|(&xi, &depth)| sample_detection_noise(params.detection_noise, xi, params.detection_variance(depth), rng))
        .collect();
    Ok(Observation { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CellCoord, Heading};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> GridSpec {
        GridSpec::new(16, 16).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn action() -> SensingAction {
        SensingAction::new(Pose::new(CellCoord::new(8, 8), Heading::North), 5, grid())
    }

    #[test]
    fn ground_truth_extremes() {
        let t = make_ground_truth(grid(), 0, &mut rng(1)).unwrap();
        assert!(t.beta.iter().all(|&b| b == 0.0));
        let t = make_ground_truth(grid(), 256, &mut rng(1)).unwrap();
        assert!(t.beta.iter().all(|&b| b == 1.0));
        assert!(make_ground_truth(grid(), 257, &mut rng(1)).is_err());
    }

    #[test]
    fn ground_truth_deterministic() {
        let a = make_ground_truth(grid(), 5, &mut rng(42)).unwrap();
        let b = make_ground_truth(grid(), 5, &mut rng(42)).unwrap();
        assert_eq!(a.support, b.support);
        assert_eq!(a.k(), 5);
        for i in 0..256 {
            assert_eq!(a.beta[i] == 1.0, a.support.contains(&i));
        }
    }

    #[test]
    fn detection_noise_one_sided() {
        use DetectionNoise::*;
        let mut r = rng(3);
        assert_eq!(sample_detection_noise(Positive, 1, 0.0, &mut r), 1.0);
        assert_eq!(sample_detection_noise(TowardWrongLabel, 1, 0.0, &mut r), 1.0);
        for _ in 0..10_000 {
            assert!(sample_detection_noise(TowardWrongLabel, 0, 0.5, &mut r) >= 0.0);
            assert!(sample_detection_noise(TowardWrongLabel, 1, 0.5, &mut r) <= 1.0);
            assert!(sample_detection_noise(Positive, 0, 0.5, &mut r) >= 0.0);
            assert!(sample_detection_noise(Positive, 1, 0.5, &mut r) >= 1.0);
        }
    }

    #[test]
    fn detection_noise_half_normal_mean() {
        let var = 0.02 * 25.0;
        let n = 100_000;
        let mut r = rng(4);
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_detection_noise(DetectionNoise::Positive, 0, var, &mut r))
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let expected = (2.0 * var / std::f64::consts::PI).sqrt();
        assert!((mean - expected).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean} vs {expected}");
    }

    #[test]
    fn location_noise_disabled() {
        let a = action();
        let hits: Vec<usize> = (0..a.fov.len()).collect();
        assert!(apply_location_noise(&a.fov, &hits, 0.0, a.pose, &mut rng(5)).is_empty());
    }

    #[test]
    fn tiny_displacement_rounds_to_same_cell() {
        let a = action();
        let cell = CellCoord::new(5, 8);
        assert_eq!(displaced_cell(a.pose, cell, 0.3), Some(cell));
        assert_eq!(displaced_cell(a.pose, cell, -0.49), Some(cell));
        assert_eq!(displaced_cell(a.pose, cell, 1.0), Some(CellCoord::new(4, 8)));
        let q = a.fov.position(cell).unwrap();
        let swaps = apply_location_noise(&a.fov, &[q], 1e-6, a.pose, &mut rng(6));
        assert!(swaps.is_empty());
    }

    #[test]
    fn displacement_tail_mass() {
        // P(|delta| > 2) for variance 0.4 is 2*(1 - Phi(2/sqrt(0.4))) ~= 0.00157,
        // comfortably inside the "within 2 cells 99.7% of the time" envelope.
        let sd = 0.4f64.sqrt();
        let mut r = rng(7);
        let n = 1_000_000;
        let far = (0..n)
            .filter(|_| (r.sample::<f64, _>(StandardNormal) * sd).abs() > 2.0)
            .count();
        let frac = far as f64 / n as f64;
        assert!(frac <= 0.003, "{frac}");
        assert!((frac - 0.001565).abs() < 3.0 * (0.001565f64 * (1.0 - 0.001565) / n as f64).sqrt());
    }

    #[test]
    fn swaps_stay_on_the_line_of_sight() {
        let a = action();
        let q = a.fov.position(CellCoord::new(5, 8)).unwrap();
        let mut r = rng(8);
        for _ in 0..2000 {
            for (from, to) in apply_location_noise(&a.fov, &[q], 2.0, a.pose, &mut r) {
                assert_eq!(from, q);
                assert_eq!(a.fov.cells[to].col, 8);
            }
        }
    }

    #[test]
    fn noiseless_sense_is_x_beta() {
        let g = grid();
        let truth = make_ground_truth(g, 20, &mut rng(9)).unwrap();
        let params = NoiseParams::noiseless();
        let mut r = rng(10);
        for cell in g.cells() {
            for h in Heading::ALL {
                let a = SensingAction::new(Pose::new(cell, h), 5, g);
                if a.fov.is_empty() {
                    assert!(sense(&truth, &a, &params, g, &mut r).is_err());
                    continue;
                }
                let y = sense(&truth, &a, &params, g, &mut r).unwrap();
                let xb: Vec<f64> = a.indices(g).iter().map(|&i| truth.beta[i]).collect();
                assert_eq!(y.values, xb);
                let above = y.values.iter().filter(|&&v| v >= params.obs_threshold).count();
                assert_eq!(above, xb.iter().filter(|&&v| v == 1.0).count());
            }
        }
    }

    #[test]
    fn single_target_one_hot() {
        let g = grid();
        let a = action();
        let cell = CellCoord::new(5, 9);
        let truth = GroundTruth::from_support(256, [cell.row * 16 + cell.col]).unwrap();
        let y = sense(&truth, &a, &NoiseParams::noiseless(), g, &mut rng(11)).unwrap();
        let q = a.fov.position(cell).unwrap();
        for (i, v) in y.values.iter().enumerate() {
            assert_eq!(*v, if i == q { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn forced_swap_moves_the_hit() {
        let a = action();
        let params = NoiseParams {
            detection_coeff: 0.0,
            ..NoiseParams::default()
        };
        let y = sense_with_swaps(&[10], &[(10, 3)], &a, &params, &mut rng(12)).unwrap();
        for (i, v) in y.values.iter().enumerate() {
            assert_eq!(*v, if i == 3 { 1.0 } else { 0.0 });
        }
        // collision clamps at one
        let y = sense_with_swaps(&[10, 3], &[(10, 3)], &a, &params, &mut rng(12)).unwrap();
        assert_eq!(y.values.iter().sum::<f64>(), 1.0);
        assert_eq!(y.values[3], 1.0);
    }

    #[test]
    fn swaps_conserve_targets_without_collisions() {
        let g = grid();
        let a = action();
        let params = NoiseParams {
            detection_coeff: 0.0,
            location_var: 1.0,
            ..NoiseParams::default()
        };
        let idx = a.indices(g);
        let truth = GroundTruth::from_support(256, [idx[20]]).unwrap();
        let mut r = rng(13);
        for _ in 0..500 {
            let y = sense(&truth, &a, &params, g, &mut r).unwrap();
            assert_eq!(y.values.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn empty_truth_mean_matches_half_normal() {
        let g = grid();
        let a = action();
        let truth = GroundTruth::from_support(256, []).unwrap();
        let params = NoiseParams::default();
        let n = 100_000;
        let mut r = rng(14);
        let mut sums = vec![0.0; a.fov.len()];
        let mut sq = vec![0.0; a.fov.len()];
        for _ in 0..n {
            let y = sense(&truth, &a, &params, g, &mut r).unwrap();
            for (q, v) in y.values.iter().enumerate() {
                assert!(*v >= 0.0);
                sums[q] += v;
                sq[q] += v * v;
            }
        }
        for q in [0, 34] {
            let mean = sums[q] / n as f64;
            let var = sq[q] / n as f64 - mean * mean;
            let expected = (2.0 * params.detection_variance(a.fov.depths[q]) / std::f64::consts::PI).sqrt();
            assert!((mean - expected).abs() < 3.0 * (var / n as f64).sqrt(), "cell {q}: {mean} vs {expected}");
        }
        // variance at depth 5 is ~25x that at depth 1
        let var_at = |q: usize| sq[q] / n as f64 - (sums[q] / n as f64).powi(2);
        let ratio = var_at(34) / var_at(0);
        assert!((ratio - 25.0).abs() < 1.5, "{ratio}");
    }

    #[test]
    fn sense_is_deterministic() {
        let g = grid();
        let truth = make_ground_truth(g, 5, &mut rng(15)).unwrap();
        let a = action();
        let p = NoiseParams::default();
        let y1 = sense(&truth, &a, &p, g, &mut rng(16)).unwrap();
        let y2 = sense(&truth, &a, &p, g, &mut rng(16)).unwrap();
        assert_eq!(y1, y2);
    }

    #[test]
    fn measurement_length_checked() {
        let a = action();
        let obs = Observation { values: vec![0.0; 3] };
        assert!(Measurement::new(a, obs, 0, 0).is_err());
    }
}
