//! Action selection: uniform random sensing and Thompson sampling with a
//! one-step lookahead reward.
//!
//! For a candidate action the reward compares the lookahead estimate
//! `b_hat + K (z - X b_hat)` against a posterior sample `b_tilde` that is
//! treated as the true state, with `z ~ N(X b_tilde, sigma_z)`:
//!
//! ```text
//! R = E[-|b_tilde - b_hat_next|^2] / E[|b_hat_next|^2]
//! ```
//!
//! Two evaluations are provided. [`RewardMode::Printed`] uses the closed
//! forms as published, which replace `E|K z|^2` by
//! `|K|_F^2 (tr(sigma_z) + |X b_tilde|^2)` and use `b_hat - K X b_tilde` in
//! the denominator's cross term. [`RewardMode::Exact`] evaluates the
//! expectations exactly, with `E|K z|^2 = |K X b_tilde|^2 + tr(K sigma_z K^T)`.
//!
//! Candidates are scored with `K = A S^-1` where `A = P X^T` and
//! `S = X P X^T + sigma_z + lambda I`. Only `Q`-sized solves are needed per
//! candidate because `|K|_F^2 = tr(S^-1 G S^-1)` with `G = A^T A = (P^2)[I, I]`,
//! and `P^2` is computed once per decision.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::NoiseParams;
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Heading, Pose, SensingAction};
use crate::inference::{sigma_z_for_hits, Belief, FieldTable};
use crate::linalg::semidefinite_cholesky;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    #[default]
    Printed,
    Exact,
}

/// One feasible action with its sensing rows and uncertainty fields.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub action: SensingAction,
    pub rows: Vec<usize>,
    pub fields: FieldTable,
}

impl Candidate {
    pub fn new(action: SensingAction, grid: GridSpec, params: &NoiseParams) -> Self {
        let rows = action.indices(grid);
        let fields = FieldTable::new(&action, params);
        Self { action, rows, fields }
    }
}

/// Every pose and heading whose field of view is nonempty, in row-major
/// pose order with headings N, E, S, W.
#[derive(Clone, Debug)]
pub struct ActionSpace {
    pub grid: GridSpec,
    pub candidates: Vec<Candidate>,
}

impl ActionSpace {
    pub fn new(grid: GridSpec, max_range: u32, params: &NoiseParams) -> Self {
        let candidates = grid
            .cells()
            .flat_map(|cell| Heading::ALL.map(|h| Pose::new(cell, h)))
            .map(|pose| SensingAction::new(pose, max_range, grid))
            .filter(|a| !a.fov.is_empty())
            .map(|a| Candidate::new(a, grid, params))
            .collect();
        Self { grid, candidates }
    }

    pub fn from_actions(grid: GridSpec, actions: Vec<SensingAction>, params: &NoiseParams) -> Result<Self> {
        if actions.iter().any(|a| a.fov.is_empty()) {
            return Err(Error::domain("action space may not contain empty fields of view"));
        }
        let candidates = actions.into_iter().map(|a| Candidate::new(a, grid, params)).collect();
        Ok(Self { grid, candidates })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn action(&self, index: usize) -> &SensingAction {
        &self.candidates[index].action
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorSample {
    pub beta_tilde: DVector<f64>,
}

const JITTER_FLOOR: f64 = 1e-10;
const JITTER_ESCALATIONS: usize = 6;

/// Draws from `N(mean, cov + jitter I)`. If the factorization fails the
/// jitter is raised tenfold (starting from at least `1e-10`) up to six times.
pub fn sample_posterior<R: Rng + ?Sized>(belief: &Belief, jitter: f64, rng: &mut R) -> Result<PosteriorSample> {
    let n = belief.len();
    let mut jitter = jitter.max(0.0);
    let mut factor = None;
    for attempt in 0..=JITTER_ESCALATIONS {
        let mut a = belief.cov.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(l) = semidefinite_cholesky(&a) {
            factor = Some(l);
            break;
        }
        if attempt < JITTER_ESCALATIONS {
            jitter = (jitter * 10.0).max(JITTER_FLOOR);
        }
    }
    let l = factor.ok_or_else(|| Error::numerical(format!("covariance not factorizable with jitter {jitter:e}")))?;
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let mut beta_tilde = belief.mean.clone();
    beta_tilde.gemv(1.0, &l, &z, 1.0);
    Ok(PosteriorSample { beta_tilde })
}

/// Numerator and denominator of the lookahead reward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardTerms {
    pub numerator: f64,
    pub denominator: f64,
}

impl RewardTerms {
    pub fn reward(&self) -> f64 {
        if self.denominator > 0.0 && self.numerator.is_finite() {
            self.numerator / self.denominator
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// `G = (P X^T)^T (P X^T)` for the given sensing rows, computed directly.
fn gram_of_rows(cov: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let a = cov.select_columns(rows);
    a.tr_mul(&a)
}

fn reward_terms(
    beta_tilde: &DVector<f64>,
    belief: &Belief,
    rows: &[usize],
    gram: &DMatrix<f64>,
    sigma_z: &DMatrix<f64>,
    lambda: f64,
    mode: RewardMode,
) -> Option<RewardTerms> {
    let q = rows.len();
    let p = &belief.cov;
    let mut s = DMatrix::from_fn(q, q, |i, j| p[(rows[i], rows[j])]);
    s += sigma_z;
    for i in 0..q {
        s[(i, i)] += lambda;
    }
    let s_inv = s.cholesky()?.inverse();

    let sel = |v: &DVector<f64>| DVector::from_iterator(q, rows.iter().map(|&r| v[r]));
    let x_hat = sel(&belief.mean);
    let x_tilde = sel(beta_tilde);
    let w_hat = &s_inv * &x_hat;
    let w_tilde = &s_inv * &x_tilde;

    // K v = P[:, rows] (S^-1 v)
    let m = belief.len();
    let mut kx_hat = DVector::zeros(m);
    let mut kx_tilde = DVector::zeros(m);
    for (j, &r) in rows.iter().enumerate() {
        let col = p.column(r);
        kx_hat.axpy(w_hat[j], &col, 1.0);
        kx_tilde.axpy(w_tilde[j], &col, 1.0);
    }

    // U = S^-1 G; |K|_F^2 = tr(U S^-1)
    let u = &s_inv * gram;
    let fro2 = u.component_mul(&s_inv.transpose()).sum();
    let x_tilde_sq = x_tilde.norm_squared();

    let a = beta_tilde - &belief.mean + &kx_hat;
    let b = &belief.mean - &kx_hat;
    let cross_num = 2.0 * a.dot(&kx_tilde);

    let terms = match mode {
        RewardMode::Printed => {
            let spread = fro2 * (sigma_z.trace() + x_tilde_sq);
            let cross_den = 2.0 * (&belief.mean - &kx_tilde).dot(&kx_tilde);
            RewardTerms {
                numerator: -a.norm_squared() + cross_num - spread,
                denominator: b.norm_squared() + spread + cross_den,
            }
        }
        RewardMode::Exact => {
            // tr(K sigma K^T) = tr(sigma S^-1 G S^-1)
            let t = &u * &s_inv;
            let noise = sigma_z.component_mul(&t.transpose()).sum();
            let second = kx_tilde.norm_squared() + noise;
            RewardTerms {
                numerator: -a.norm_squared() + cross_num - second,
                denominator: b.norm_squared() + 2.0 * b.dot(&kx_tilde) + second,
            }
        }
    };
    Some(terms)
}

fn single_reward(
    beta_tilde: &DVector<f64>,
    belief: &Belief,
    rows: &[usize],
    sigma_z: &DMatrix<f64>,
    lambda: f64,
    mode: RewardMode,
) -> Result<f64> {
    if sigma_z.nrows() != rows.len() || beta_tilde.len() != belief.len() {
        return Err(Error::domain("reward inputs have inconsistent dimensions"));
    }
    let gram = gram_of_rows(&belief.cov, rows);
    Ok(reward_terms(beta_tilde, belief, rows, &gram, sigma_z, lambda, mode)
        .map_or(f64::NEG_INFINITY, |t| t.reward()))
}

/// Lookahead reward with the published closed-form expectations.
pub fn reward_printed(
    beta_tilde: &DVector<f64>,
    belief: &Belief,
    rows: &[usize],
    sigma_z: &DMatrix<f64>,
    lambda: f64,
) -> Result<f64> {
    single_reward(beta_tilde, belief, rows, sigma_z, lambda, RewardMode::Printed)
}

/// Lookahead reward with exact second moments of `z`.
pub fn reward_exact(
    beta_tilde: &DVector<f64>,
    belief: &Belief,
    rows: &[usize],
    sigma_z: &DMatrix<f64>,
    lambda: f64,
) -> Result<f64> {
    single_reward(beta_tilde, belief, rows, sigma_z, lambda, RewardMode::Exact)
}

/// Noise covariance a candidate would see if `beta_tilde` were the truth:
/// cells whose sampled value reaches the observation threshold are the
/// predicted detections.
pub fn candidate_sigma_z(candidate: &Candidate, beta_tilde: &DVector<f64>, params: &NoiseParams) -> DMatrix<f64> {
    let hits: Vec<usize> = candidate
        .rows
        .iter()
        .enumerate()
        .filter(|&(_, &r)| beta_tilde[r] >= params.obs_threshold)
        .map(|(q, _)| q)
        .collect();
    sigma_z_for_hits(&candidate.action.fov, &hits, &candidate.fields, params)
}

/// Scores every candidate against one posterior sample.
pub fn score_actions(
    belief: &Belief,
    sample: &PosteriorSample,
    space: &ActionSpace,
    params: &NoiseParams,
    lambda: f64,
    mode: RewardMode,
) -> Vec<f64> {
    let cov_sq = &belief.cov * &belief.cov;
    space
        .candidates
        .par_iter()
        .map(|c| score_candidate(belief, sample, c, &cov_sq, params, lambda, mode))
        .collect()
}

fn score_candidate(
    belief: &Belief,
    sample: &PosteriorSample,
    candidate: &Candidate,
    cov_sq: &DMatrix<f64>,
    params: &NoiseParams,
    lambda: f64,
    mode: RewardMode,
) -> f64 {
    let rows = &candidate.rows;
    let q = rows.len();
    let gram = DMatrix::from_fn(q, q, |i, j| cov_sq[(rows[i], rows[j])]);
    let sigma = candidate_sigma_z(candidate, &sample.beta_tilde, params);
    reward_terms(&sample.beta_tilde, belief, rows, &gram, &sigma, lambda, mode)
        .map_or(f64::NEG_INFINITY, |t| t.reward())
}

/// Highest score, ties to the lowest index; NaN scores never win. The
/// reduction is associative and commutative, so it is independent of the
/// order in which parallel workers finish.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    scores
        .par_iter()
        .enumerate()
        .map(|(i, &s)| (i, if s.is_nan() { f64::NEG_INFINITY } else { s }))
        .reduce_with(|a, b| {
            if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                b
            } else {
                a
            }
        })
        .map(|(i, _)| i)
}

/// Thompson sampling: draw one posterior sample and return the index of the
/// action that maximizes the lookahead reward for it.
pub fn select_action<R: Rng + ?Sized>(
    belief: &Belief,
    space: &ActionSpace,
    params: &NoiseParams,
    lambda: f64,
    rng: &mut R,
    mode: RewardMode,
) -> Result<usize> {
    if space.is_empty() {
        return Err(Error::domain("empty action space"));
    }
    let sample = sample_posterior(belief, 0.0, rng)?;
    if space.len() == 1 {
        return Ok(0);
    }
    let scores = score_actions(belief, &sample, space, params, lambda, mode);
    Ok(argmax(&scores).expect("nonempty"))
}

pub fn random_action<R: Rng + ?Sized>(space: &ActionSpace, rng: &mut R) -> Result<usize> {
    if space.is_empty() {
        return Err(Error::domain("empty action space"));
    }
    Ok(rng.random_range(0..space.len()))
}
