//! Recovering the outcome distribution from the observation distribution and
//! projecting it onto the model family.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{posterior_average, ChannelMatrix, EmpiricalObsDist};
use crate::error::{Error, Result};
use crate::expfam::{fit_from_moments, FeatureMap, FitOptions, MomentVector, Params};
use crate::linalg;

/// Relative singular-value cutoff for the channel pseudoinverse.
const PINV_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PinvRecovery {
    /// `S†q̂`; may leave the simplex.
    pub r: DVector<f64>,
    /// `Σ_y max(0, −r(y))`.
    pub negative_mass: f64,
}

/// Minimum-norm least-squares recovery `r̂ = S†q̂`.
pub fn pinv_recover(q: &EmpiricalObsDist, s: &ChannelMatrix) -> Result<PinvRecovery> {
    if q.len() != s.observations() {
        return Err(Error::InvalidInput(format!(
            "{} observation probabilities for a channel with k = {}",
            q.len(),
            s.observations()
        )));
    }
    let r = linalg::pinv(s.matrix(), PINV_TOL) * &q.q_hat;
    let negative_mass = r.iter().map(|&v| (-v).max(0.0)).sum();
    Ok(PinvRecovery { r, negative_mass })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlOptions {
    /// Stop when no coordinate of `p` moves by more than this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KlOptions {
    fn default() -> Self {
        Self {
            tol: 1e-13,
            max_iter: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlRecovery {
    pub p: DVector<f64>,
    /// `KL(q̂ ‖ S p)` at the returned `p`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `KL(q ‖ s)`, infinite when `s` misses mass that `q` has.
pub fn kl_divergence(q: &DVector<f64>, s: &DVector<f64>) -> f64 {
    q.iter()
        .zip(s.iter())
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| if b > 0.0 { a * (a.ln() - b.ln()) } else { f64::INFINITY })
        .sum()
}

/// Minimizes `KL(q̂ ‖ S p)` over the simplex with multiplicative EM updates
/// from the uniform distribution. Outcomes that `S` cannot tell apart keep
/// the split they start with, so ties resolve symmetrically.
pub fn kl_recover(q: &EmpiricalObsDist, s: &ChannelMatrix, opts: &KlOptions) -> Result<KlRecovery> {
    if q.len() != s.observations() {
        return Err(Error::InvalidInput(format!(
            "{} observation probabilities for a channel with k = {}",
            q.len(),
            s.observations()
        )));
    }
    let m = s.outcomes();
    let mut p = DVector::from_element(m, 1.0 / m as f64);
    let mut objective = kl_divergence(&q.q_hat, &(s.matrix() * &p));
    for it in 1..=opts.max_iter {
        let next = posterior_average(&p, q, s);
        let next_obj = kl_divergence(&q.q_hat, &(s.matrix() * &next));
        debug_assert!(next_obj <= objective + 1e-12 * objective.abs().max(1.0));
        let moved = (&next - &p).amax();
        p = next;
        objective = next_obj;
        if moved < opts.tol {
            return Ok(KlRecovery {
                p,
                objective,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(KlRecovery {
        p,
        objective,
        iterations: opts.max_iter,
        converged: false,
    })
}

/// `argmin_θ KL(r̂ ‖ p_θ)`, which is moment matching at `Φ r̂`.
pub fn kl_project(r: &DVector<f64>, fm: &FeatureMap, opts: &FitOptions) -> Result<Params> {
    if r.len() != fm.outcomes() {
        return Err(Error::InvalidInput(format!(
            "distribution has {} entries, feature map has {} outcomes",
            r.len(),
            fm.outcomes()
        )));
    }
    fit_from_moments(fm, &MomentVector::population(fm.matrix() * r), opts)
}

/// A single E-step under `θ0` followed by a single M-step.
pub fn one_em_step(
    theta0: &Params,
    q: &EmpiricalObsDist,
    s: &ChannelMatrix,
    fm: &FeatureMap,
    opts: &FitOptions,
) -> Result<Params> {
    s.check(fm)?;
    let r = posterior_average(&fm.distribution(theta0), q, s);
    fit_from_moments(fm, &MomentVector::new(fm.matrix() * r, q.n), opts)
}

/// A uniformly shuffled surjection `[m] → [k]` as a deterministic channel.
pub fn random_deterministic_channel<R: Rng + ?Sized>(rng: &mut R, m: usize, k: usize) -> Result<ChannelMatrix> {
    if k == 0 || k > m {
        return Err(Error::InvalidInput(format!("need 1 ≤ k ≤ m, got k = {k}, m = {m}")));
    }
    // the first k outcomes cover every observation
    let mut f: Vec<usize> = (0..k).collect();
    f.extend((k..m).map(|_| rng.random_range(0..k)));
    f.shuffle(rng);
    ChannelMatrix::deterministic(&f, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentRequirement {
    /// `S` has full column rank, so every linear functional of `p` is recoverable.
    FullRank,
    /// `S` is rank deficient but the rows of `Φ` lie in its row space.
    Factors,
    Insufficient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequirementCheck {
    pub status: MomentRequirement,
    /// `‖Φ (I − S†S)‖_F / ‖Φ‖_F`.
    pub residual: f64,
    pub rank: usize,
}

/// Whether the moments `Φp` are determined by `Sp`, i.e. whether `Φ = R S`
/// for some `d × k` matrix `R`.
pub fn moment_requirement_check(fm: &FeatureMap, s: &ChannelMatrix) -> Result<RequirementCheck> {
    s.check(fm)?;
    Ok(classify(fm.matrix(), s.matrix()))
}

fn classify(phi: &DMatrix<f64>, s: &DMatrix<f64>) -> RequirementCheck {
    let rank = linalg::rank(s, PINV_TOL);
    let proj = linalg::pinv(s, PINV_TOL) * s;
    let leftover = phi - phi * proj;
    let scale = phi.norm();
    let residual = if scale > 0.0 { leftover.norm() / scale } else { 0.0 };
    let status = if rank == s.ncols() {
        MomentRequirement::FullRank
    } else if residual < 1e-8 {
        MomentRequirement::Factors
    } else {
        MomentRequirement::Insufficient
    };
    RequirementCheck { status, residual, rank }
}
