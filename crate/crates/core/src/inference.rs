//! Kalman-filter inference with a measurement-noise covariance that models
//! both detection and location uncertainty.
//!
//! Each measurement's covariance starts as the diagonal of per-cell
//! detection variances. Every cell whose reading clears the observation
//! threshold is treated as a possible target, and the cells where that
//! target could truly be (its uncertainty field) add the second moment of
//! the swap noise vector under a uniform distribution over the field. The
//! posterior is then updated with a regularized gain and the Joseph-form
//! covariance update.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use crate::environment::{Measurement, NoiseParams, Observation};
use crate::error::{Error, Result};
use crate::geometry::{polar_about_agent, FieldOfView, GridSpec, Pose, SensingAction};
use crate::linalg::symmetrize;

/// Gaussian belief `N(mean, cov)` over the flattened grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Belief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Belief {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Uniform mean `1/M` and isotropic covariance `prior_var * I`.
pub fn initial_belief(grid: GridSpec, prior_var: f64) -> Result<Belief> {
    if !(prior_var > 0.0 && prior_var.is_finite()) {
        return Err(Error::domain(format!("prior variance must be positive, got {prior_var}")));
    }
    let m = grid.len();
    Ok(Belief {
        mean: DVector::from_element(m, 1.0 / m as f64),
        cov: DMatrix::from_diagonal_element(m, m, prior_var),
    })
}

/// FOV positions whose reading is at least `c_thr`.
pub fn threshold_observation(y: &Observation, c_thr: f64) -> Vec<usize> {
    y.values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= c_thr)
        .map(|(q, _)| q)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UncertaintyField {
    pub observed: usize,
    /// Sorted FOV positions, always containing `observed`.
    pub members: Vec<usize>,
}

impl UncertaintyField {
    pub fn m(&self) -> usize {
        self.members.len()
    }
}

const FIELD_EPS: f64 = 1e-9;

/// Polar coordinates of every FOV cell about the agent.
fn fov_polar(pose: Pose, fov: &FieldOfView) -> Vec<(f64, f64)> {
    fov.cells
        .iter()
        .map(|&c| polar_about_agent(pose, c).expect("FOV never contains the agent's cell"))
        .collect()
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = (a - b) % 360.0;
    if d > 180.0 {
        d -= 360.0;
    } else if d <= -180.0 {
        d += 360.0;
    }
    d.abs()
}

fn field_from_polar(observed: usize, polar: &[(f64, f64)], params: &NoiseParams) -> UncertaintyField {
    let (r0, b0) = polar[observed];
    let members = polar
        .iter()
        .enumerate()
        .filter(|(q, &(r, b))| {
            *q == observed
                || ((r - r0).abs() <= params.radial_field_bound + FIELD_EPS
                    && angle_diff(b, b0) <= params.angular_spread + FIELD_EPS)
        })
        .map(|(q, _)| q)
        .collect();
    UncertaintyField { observed, members }
}

/// FOV cells within `radial_field_bound` along the line of sight and within
/// `angular_spread` degrees of it, around the observed cell.
pub fn uncertainty_field(
    observed: usize,
    pose: Pose,
    fov: &FieldOfView,
    params: &NoiseParams,
) -> Result<UncertaintyField> {
    if observed >= fov.len() {
        return Err(Error::domain(format!(
            "observed index {observed} outside FOV of {} cells",
            fov.len()
        )));
    }
    Ok(field_from_polar(observed, &fov_polar(pose, fov), params))
}

/// Uncertainty fields for every FOV position of one action, computed once
/// and reused across measurements and candidate scoring.
#[derive(Clone, Debug)]
pub struct FieldTable {
    fields: Vec<UncertaintyField>,
}

impl FieldTable {
    pub fn new(action: &SensingAction, params: &NoiseParams) -> Self {
        let polar = fov_polar(action.pose, &action.fov);
        let fields = (0..action.fov.len())
            .map(|q| field_from_polar(q, &polar, params))
            .collect();
        Self { fields }
    }

    pub fn field(&self, observed: usize) -> &UncertaintyField {
        &self.fields[observed]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementNoiseCov {
    pub sigma_z: DMatrix<f64>,
}

/// Adds the second moment of one target's swap noise to `sigma`.
///
/// With the true location uniform over the `m` field members, the noise is
/// zero when the target is where it was observed and otherwise `+1` at the
/// observed cell and `-1` at the true cell.
pub fn add_location_uncertainty(sigma: &mut DMatrix<f64>, field: &UncertaintyField) {
    let m = field.m() as f64;
    let o = field.observed;
    sigma[(o, o)] += (m - 1.0) / m;
    for &q in field.members.iter().filter(|&&q| q != o) {
        sigma[(q, q)] += 1.0 / m;
        sigma[(o, q)] -= 1.0 / m;
        sigma[(q, o)] -= 1.0 / m;
    }
}

/// Detection diagonal plus location-uncertainty terms for each `hits` cell.
pub fn sigma_z_for_hits(fov: &FieldOfView, hits: &[usize], fields: &FieldTable, params: &NoiseParams) -> DMatrix<f64> {
    let mut sigma = DMatrix::from_diagonal(&DVector::from_iterator(
        fov.len(),
        fov.depths.iter().map(|&d| params.detection_variance(d)),
    ));
    for &q in hits {
        add_location_uncertainty(&mut sigma, fields.field(q));
    }
    sigma
}

pub fn build_sigma_z(y: &Observation, action: &SensingAction, params: &NoiseParams) -> MeasurementNoiseCov {
    let fields = FieldTable::new(action, params);
    let hits = threshold_observation(y, params.obs_threshold);
    MeasurementNoiseCov {
        sigma_z: sigma_z_for_hits(&action.fov, &hits, &fields, params),
    }
}

/// Row-selection sensing matrix: row `q` has a single 1 at column `rows[q]`.
pub fn selection(action: &SensingAction, grid: GridSpec) -> Vec<usize> {
    action.indices(grid)
}

/// Regularized Kalman update for a static state and a row-selection sensing
/// matrix.
///
/// The gain uses `X P X^T + sigma_z + lambda I`; the covariance uses the
/// Joseph form with `sigma_z` alone. Writing `A = P X^T` and
/// `S' = X P X^T + sigma_z`, the Joseph form expands to
/// `P - K A^T - A K^T + K S' K^T`, which costs two `M x Q x M` products.
pub fn kf_update(belief: &Belief, rows: &[usize], y: &[f64], sigma_z: &DMatrix<f64>, lambda: f64) -> Result<Belief> {
    let mut out = belief.clone();
    kf_update_in_place(&mut out, rows, y, sigma_z, lambda)?;
    Ok(out)
}

pub fn kf_update_in_place(
    belief: &mut Belief,
    rows: &[usize],
    y: &[f64],
    sigma_z: &DMatrix<f64>,
    lambda: f64,
) -> Result<()> {
    let m = belief.len();
    let q = rows.len();
    if y.len() != q || sigma_z.nrows() != q || sigma_z.ncols() != q {
        return Err(Error::domain(format!(
            "dimension mismatch: {q} rows, {} readings, {}x{} noise covariance",
            y.len(),
            sigma_z.nrows(),
            sigma_z.ncols()
        )));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= m) {
        return Err(Error::domain(format!("sensing row selects column {r} of {m}")));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::domain(format!("lambda must be nonnegative, got {lambda}")));
    }
    if q == 0 {
        return Ok(());
    }
    let p = &belief.cov;
    // A = P X^T, M x Q
    let a = p.select_columns(rows);
    let mut s_joseph = a.select_rows(rows);
    s_joseph += sigma_z;
    let mut s_gain = s_joseph.clone();
    for i in 0..q {
        s_gain[(i, i)] += lambda;
    }
    let chol = s_gain
        .cholesky()
        .ok_or_else(|| Error::numerical("innovation covariance is not positive definite"))?;
    // K^T = S^-1 A^T, Q x M
    let kt = chol.solve(&a.transpose());
    if kt.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite Kalman gain"));
    }
    let k = kt.transpose();

    let innovation = DVector::from_iterator(q, rows.iter().zip(y).map(|(&r, &yi)| yi - belief.mean[r]));
    belief.mean.gemv(1.0, &k, &innovation, 1.0);

    // P += (K S' - A) K^T - K A^T
    let mut ks_minus_a = &k * &s_joseph;
    ks_minus_a -= &a;
    let at = a.transpose();
    let cov = &mut belief.cov;
    cov.gemm(1.0, &ks_minus_a, &kt, 1.0);
    cov.gemm(-1.0, &k, &at, 1.0);
    symmetrize(cov);
    if cov.iter().any(|v| !v.is_finite()) || belief.mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite posterior"));
    }
    Ok(())
}

/// One full inference pass for a measurement: threshold, build the noise
/// covariance from the uncertainty fields, then update.
pub fn unik_step(belief: &Belief, measurement: &Measurement, params: &NoiseParams, lambda: f64, grid: GridSpec) -> Result<Belief> {
    let mut out = belief.clone();
    unik_step_in_place(&mut out, measurement, params, lambda, grid)?;
    Ok(out)
}

pub fn unik_step_in_place(
    belief: &mut Belief,
    measurement: &Measurement,
    params: &NoiseParams,
    lambda: f64,
    grid: GridSpec,
) -> Result<()> {
    let sigma = build_sigma_z(&measurement.observation, &measurement.action, params);
    let rows = selection(&measurement.action, grid);
    kf_update_in_place(belief, &rows, &measurement.observation.values, &sigma.sigma_z, lambda)
}

/// Cells whose posterior mean reaches `decision_threshold`.
pub fn recovered_support(belief: &Belief, decision_threshold: f64) -> BTreeSet<usize> {
    belief
        .mean
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= decision_threshold)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CellCoord, Heading};
    use crate::linalg::min_eigenvalue;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g16() -> GridSpec {
        GridSpec::new(16, 16).unwrap()
    }

    fn center_action() -> SensingAction {
        SensingAction::new(Pose::new(CellCoord::new(8, 8), Heading::North), 5, g16())
    }

    #[test]
    fn prior() {
        let b = initial_belief(g16(), 1.0).unwrap();
        assert!(b.mean.iter().all(|&v| v == 0.00390625));
        assert_eq!(b.cov, DMatrix::identity(256, 256));
        let b = initial_belief(GridSpec::new(1, 1).unwrap(), 2.5).unwrap();
        assert_eq!(b.mean.as_slice(), &[1.0]);
        assert_eq!(b.cov[(0, 0)], 2.5);
        assert!(initial_belief(g16(), 0.0).is_err());
    }

    #[test]
    fn thresholding_is_inclusive() {
        let y = Observation { values: vec![0.1, 0.6, 0.5] };
        assert_eq!(threshold_observation(&y, 0.5), vec![1, 2]);
        let y = Observation { values: vec![0.0; 4] };
        assert!(threshold_observation(&y, 0.5).is_empty());
    }

    #[test]
    fn degenerate_field_is_singleton() {
        let a = center_action();
        let params = NoiseParams {
            radial_field_bound: 0.0,
            angular_spread: 0.0,
            ..NoiseParams::default()
        };
        for q in 0..a.fov.len() {
            let f = uncertainty_field(q, a.pose, &a.fov, &params).unwrap();
            assert_eq!(f.members, vec![q]);
        }
        assert!(uncertainty_field(35, a.pose, &a.fov, &params).is_err());
    }

    #[test]
    fn center_line_field_at_depth_three() {
        let a = center_action();
        let observed = a.fov.position(CellCoord::new(5, 8)).unwrap();
        let f = uncertainty_field(observed, a.pose, &a.fov, &NoiseParams::default()).unwrap();
        let cells: Vec<CellCoord> = f.members.iter().map(|&q| a.fov.cells[q]).collect();
        let expected: Vec<CellCoord> = (3..=7).rev().map(|r| CellCoord::new(r, 8)).collect();
        assert_eq!(cells, expected);
        assert_eq!(f.m(), 5);
    }

    #[test]
    fn five_member_increments() {
        let field = UncertaintyField {
            observed: 2,
            members: vec![0, 1, 2, 3, 4],
        };
        let mut s = DMatrix::zeros(6, 6);
        add_location_uncertainty(&mut s, &field);
        assert!((s[(2, 2)] - 0.8).abs() < 1e-15);
        for q in [0, 1, 3, 4] {
            assert!((s[(q, q)] - 0.2).abs() < 1e-15);
            assert!((s[(2, q)] + 0.2).abs() < 1e-15);
            assert!((s[(q, 2)] + 0.2).abs() < 1e-15);
        }
        assert_eq!(s[(0, 1)], 0.0);
        assert!(s.row(5).iter().all(|&v| v == 0.0));
        // each column of the swap table sums to zero
        for j in 0..6 {
            assert!(s.column(j).sum().abs() < 1e-15);
        }
    }

    #[test]
    fn sigma_without_hits_is_detection_diagonal() {
        let a = center_action();
        let params = NoiseParams::default();
        let y = Observation { values: vec![0.1; a.fov.len()] };
        let s = build_sigma_z(&y, &a, &params).sigma_z;
        for i in 0..a.fov.len() {
            for j in 0..a.fov.len() {
                let expected = if i == j { 0.02 * (a.fov.depths[i] as f64).powi(2) } else { 0.0 };
                assert!((s[(i, j)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn singleton_field_adds_nothing() {
        let field = UncertaintyField { observed: 1, members: vec![1] };
        let mut s = DMatrix::zeros(3, 3);
        add_location_uncertainty(&mut s, &field);
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigma_symmetric_and_psd_with_regularizer() {
        let a = center_action();
        let params = NoiseParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let y = Observation {
                values: (0..a.fov.len()).map(|_| rng.random::<f64>()).collect(),
            };
            let mut s = build_sigma_z(&y, &a, &params).sigma_z;
            assert_eq!(s, s.transpose());
            assert!(s.diagonal().iter().all(|&d| d > 0.0));
            for i in 0..s.nrows() {
                s[(i, i)] += 1.0;
            }
            assert!(min_eigenvalue(&s) >= -1e-10);
        }
    }

    #[test]
    fn exact_single_cell_measurement() {
        let grid = GridSpec::new(3, 3).unwrap();
        let b = initial_belief(grid, 1.0).unwrap();
        let out = kf_update(&b, &[4], &[0.7], &DMatrix::zeros(1, 1), 0.0).unwrap();
        assert!((out.mean[4] - 0.7).abs() < 1e-15);
        assert!(out.cov[(4, 4)].abs() < 1e-15);
        for i in (0..9).filter(|&i| i != 4) {
            assert_eq!(out.mean[i], b.mean[i]);
            assert_eq!(out.cov[(i, i)], 1.0);
        }
    }

    #[test]
    fn huge_regularizer_freezes_belief() {
        let b = initial_belief(g16(), 1.0).unwrap();
        let a = center_action();
        let rows = selection(&a, g16());
        let y = vec![1.0; rows.len()];
        let sigma = DMatrix::from_diagonal_element(rows.len(), rows.len(), 0.1);
        let out = kf_update(&b, &rows, &y, &sigma, 1e12).unwrap();
        assert!((&out.mean - &b.mean).amax() < 1e-6);
        assert!((&out.cov - &b.cov).amax() < 1e-6);
    }

    #[test]
    fn dimension_errors() {
        let b = initial_belief(GridSpec::new(2, 2).unwrap(), 1.0).unwrap();
        assert!(kf_update(&b, &[0, 1], &[0.0], &DMatrix::zeros(2, 2), 1.0).is_err());
        assert!(kf_update(&b, &[7], &[0.0], &DMatrix::zeros(1, 1), 1.0).is_err());
        // singular innovation covariance without regularization
        let degenerate = Belief {
            mean: b.mean.clone(),
            cov: DMatrix::zeros(4, 4),
        };
        assert!(matches!(
            kf_update(&degenerate, &[0], &[1.0], &DMatrix::zeros(1, 1), 0.0),
            Err(Error::Numerical(_))
        ));
    }

    fn empty_measurement(action: SensingAction) -> Measurement {
        let n = action.fov.len();
        Measurement::new(action, Observation { values: vec![0.0; n] }, 0, 0).unwrap()
    }

    #[test]
    fn empty_region_pulls_mean_down() {
        let b = initial_belief(g16(), 1.0).unwrap();
        let meas = empty_measurement(center_action());
        let out = unik_step(&b, &meas, &NoiseParams::default(), 1.0, g16()).unwrap();
        for i in selection(&meas.action, g16()) {
            assert!(out.mean[i] < b.mean[i]);
        }
    }

    #[test]
    fn repeated_measurements_shrink_variance() {
        let grid = g16();
        let mut b = initial_belief(grid, 1.0).unwrap();
        let a = center_action();
        let rows = selection(&a, grid);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f64> = (0..rows.len()).map(|_| rng.random::<f64>() * 0.8).collect();
        let meas = Measurement::new(a, Observation { values }, 0, 0).unwrap();
        let mut last: Vec<f64> = rows.iter().map(|&r| b.cov[(r, r)]).collect();
        for _ in 0..20 {
            b = unik_step(&b, &meas, &NoiseParams::default(), 1.0, grid).unwrap();
            let now: Vec<f64> = rows.iter().map(|&r| b.cov[(r, r)]).collect();
            for (n, l) in now.iter().zip(&last) {
                assert!(*n <= *l + 1e-12);
            }
            last = now;
        }
    }

    #[test]
    fn noiseless_sweep_recovers_support() {
        use crate::environment::{make_ground_truth, sense};
        let grid = g16();
        let truth = make_ground_truth(grid, 7, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let params = NoiseParams::noiseless();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = initial_belief(grid, 1.0).unwrap();
        assert!(recovered_support(&b, 0.5).is_empty());
        // north from rows 5, 10 and 15 plus south from row 14 covers every cell
        let mut seen = BTreeSet::new();
        for (row, heading) in [(5, Heading::North), (10, Heading::North), (15, Heading::North), (14, Heading::South)] {
            for col in 0..16 {
                let a = SensingAction::new(Pose::new(CellCoord::new(row, col), heading), 5, grid);
                seen.extend(selection(&a, grid));
                let y = sense(&truth, &a, &params, grid, &mut rng).unwrap();
                let meas = Measurement::new(a, y, 0, 0).unwrap();
                b = unik_step(&b, &meas, &params, 0.1, grid).unwrap();
            }
        }
        assert_eq!(seen.len(), 256);
        assert_eq!(recovered_support(&b, 0.5), truth.support);
    }

    #[test]
    fn recovered_support_thresholds_mean() {
        let mut b = initial_belief(g16(), 1.0).unwrap();
        b.mean[17] = 0.9;
        assert_eq!(recovered_support(&b, 0.5), BTreeSet::from([17]));
    }
}
