//! The moment estimator and maximum marginal likelihood via EM, both driven by
//! an empirical distribution over a finite observation space.

mod geometry;

pub use geometry::{
    kl_divergence, kl_project, kl_recover, moment_requirement_check, one_em_step, pinv_recover,
    random_deterministic_channel,
    KlOptions, KlRecovery, MomentRequirement, PinvRecovery, RequirementCheck,
};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::channels::Channel;
use crate::error::{Error, Result};
use crate::expfam::{fit_from_moments, FeatureMap, FitOptions, MomentVector, Params};
use crate::rng;

/// Column-stochastic `k × m` supervision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    s: DMatrix<f64>,
}

impl ChannelMatrix {
    pub fn new(s: DMatrix<f64>) -> Result<Self> {
        if s.nrows() == 0 || s.ncols() == 0 {
            return Err(Error::InvalidInput("empty channel matrix".into()));
        }
        if s.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("channel matrix has negative or non-finite entries".into()));
        }
        for (y, col) in s.column_iter().enumerate() {
            let total = col.sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("column {y} of the channel matrix sums to {total}")));
            }
        }
        Ok(Self { s })
    }

    pub fn from_rows(k: usize, m: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != k * m {
            return Err(Error::InvalidInput(format!("expected {} entries, got {}", k * m, rows.len())));
        }
        Self::new(DMatrix::from_row_slice(k, m, rows))
    }

    pub fn from_channel(ch: &dyn Channel, fm: &FeatureMap) -> Result<Self> {
        Self::new(ch.channel_matrix(fm)?)
    }

    /// Deterministic channel `o = f(y)`.
    pub fn deterministic(f: &[usize], k: usize) -> Result<Self> {
        let mut s = DMatrix::zeros(k, f.len());
        for (y, &o) in f.iter().enumerate() {
            if o >= k {
                return Err(Error::InvalidInput(format!("observation {o} out of range for k = {k}")));
            }
            s[(o, y)] = 1.0;
        }
        Self::new(s)
    }

    pub fn identity(m: usize) -> Self {
        Self { s: DMatrix::identity(m, m) }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn observations(&self) -> usize {
        self.s.nrows()
    }

    pub fn outcomes(&self) -> usize {
        self.s.ncols()
    }

    pub fn is_deterministic(&self) -> bool {
        self.s.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    fn check(&self, fm: &FeatureMap) -> Result<()> {
        if self.outcomes() != fm.outcomes() {
            return Err(Error::InvalidInput(format!(
                "channel matrix has {} columns, feature map has {} outcomes",
                self.outcomes(),
                fm.outcomes()
            )));
        }
        Ok(())
    }
}

/// Empirical distribution `q̂` of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalObsDist {
    pub q_hat: DVector<f64>,
    pub n: usize,
}

impl EmpiricalObsDist {
    pub fn from_observations(observations: &[usize], k: usize) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::NoData("no observations".into()));
        }
        let mut counts = vec![0usize; k];
        for &o in observations {
            if o >= k {
                return Err(Error::InvalidInput(format!("observation {o} out of range for k = {k}")));
            }
            counts[o] += 1;
        }
        Ok(Self::from_counts(&counts))
    }

    pub fn from_counts(counts: &[usize]) -> Self {
        let n: usize = counts.iter().sum();
        let q_hat = DVector::from_iterator(counts.len(), counts.iter().map(|&c| c as f64 / n as f64));
        Self { q_hat, n }
    }

    /// A population distribution (`n = 0`).
    pub fn population(q: DVector<f64>) -> Result<Self> {
        if q.iter().any(|&v| !(v >= 0.0)) || (q.sum() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput("observation distribution must be a probability vector".into()));
        }
        Ok(Self { q_hat: q, n: 0 })
    }

    pub fn len(&self) -> usize {
        self.q_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_hat.is_empty()
    }
}

/// Two-step moment estimator: `μ̂ = mean β(o)`, then `θ̂ = fit_from_moments(μ̂)`.
///
/// `beta` is the `d × k` table of observation functions.
pub fn moment_estimate(
    observations: &[usize],
    beta: &DMatrix<f64>,
    fm: &FeatureMap,
    opts: &FitOptions,
) -> Result<(MomentVector, Params)> {
    let q = EmpiricalObsDist::from_observations(observations, beta.ncols())?;
    moment_estimate_from_dist(&q, beta, fm, opts)
}

pub fn moment_estimate_from_dist(
    q: &EmpiricalObsDist,
    beta: &DMatrix<f64>,
    fm: &FeatureMap,
    opts: &FitOptions,
) -> Result<(MomentVector, Params)> {
    if beta.ncols() != q.len() || beta.nrows() != fm.dim() {
        return Err(Error::InvalidInput(format!(
            "beta table is {}x{}, expected {}x{}",
            beta.nrows(),
            beta.ncols(),
            fm.dim(),
            q.len()
        )));
    }
    let mu = MomentVector::new(beta * &q.q_hat, q.n);
    let theta = fit_from_moments(fm, &mu, opts)?;
    Ok((mu, theta))
}

/// `Ê[log Σ_y S(o|y) p_θ(y)]`.
pub fn marginal_ll(theta: &Params, q: &EmpiricalObsDist, s: &ChannelMatrix, fm: &FeatureMap) -> f64 {
    let q_obs = s.matrix() * fm.distribution(theta);
    q.q_hat
        .iter()
        .zip(q_obs.iter())
        .filter(|(&w, _)| w > 0.0)
        .map(|(&w, &p)| w * p.ln())
        .sum()
}

/// Posterior-averaged outcome distribution `r(y) = Σ_o q̂(o) p_θ(y | o)`.
pub(crate) fn posterior_average(p: &DVector<f64>, q: &EmpiricalObsDist, s: &ChannelMatrix) -> DVector<f64> {
    let (k, m) = s.matrix().shape();
    let mut r = DVector::zeros(m);
    for o in 0..k {
        let w = q.q_hat[o];
        if w == 0.0 {
            continue;
        }
        let joint: Vec<f64> = (0..m).map(|y| s.matrix()[(o, y)] * p[y]).collect();
        let total: f64 = joint.iter().sum();
        if total > 0.0 {
            for y in 0..m {
                r[y] += w * joint[y] / total;
            }
        }
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    /// Stop once the marginal log-likelihood improves by less than this.
    pub tol: f64,
    pub max_iter: usize,
    pub fit: FitOptions,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 1000,
            fit: FitOptions {
                tol: 1e-12,
                ..FitOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub theta: Params,
    /// Marginal log-likelihood at the initial point and after every step.
    pub ll_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EmFit {
    pub fn log_likelihood(&self) -> f64 {
        *self.ll_trace.last().expect("trace starts with the initial value")
    }
}

/// Slack allowed for round-off in the monotonicity check.
fn ll_slack(ll: f64) -> f64 {
    1e-9 * ll.abs().max(1.0)
}

/// Maximum marginal likelihood by exact EM.
///
/// # Panics
/// If an iteration decreases the marginal log-likelihood beyond round-off,
/// which would indicate a broken M-step.
pub fn em_marginal_ml(
    q: &EmpiricalObsDist,
    s: &ChannelMatrix,
    fm: &FeatureMap,
    theta_init: &Params,
    opts: &EmOptions,
) -> Result<EmFit> {
    s.check(fm)?;
    if q.len() != s.observations() {
        return Err(Error::InvalidInput(format!(
            "{} observation probabilities for a channel with k = {}",
            q.len(),
            s.observations()
        )));
    }
    let mut theta = theta_init.clone();
    let mut ll = marginal_ll(&theta, q, s, fm);
    let mut ll_trace = vec![ll];
    for it in 1..=opts.max_iter {
        let r = posterior_average(&fm.distribution(&theta), q, s);
        let mu = MomentVector::new(fm.matrix() * r, q.n);
        let next = fit_from_moments(fm, &mu, &opts.fit)?;
        let next_ll = marginal_ll(&next, q, s, fm);
        assert!(
            next_ll >= ll - ll_slack(ll),
            "EM decreased the marginal log-likelihood from {ll} to {next_ll} at iteration {it}"
        );
        ll_trace.push(next_ll);
        theta = next;
        let gain = next_ll - ll;
        ll = next_ll;
        if gain < opts.tol {
            return Ok(EmFit {
                theta,
                ll_trace,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(EmFit {
        theta,
        ll_trace,
        iterations: opts.max_iter,
        converged: false,
    })
}

/// EM from `θ = 0` plus `starts − 1` random initializations (standard normal
/// coordinates drawn from streams keyed by `(seed, start)`); returns the run
/// with the highest marginal log-likelihood, ties going to the lowest start
/// index.
pub fn em_multistart(
    q: &EmpiricalObsDist,
    s: &ChannelMatrix,
    fm: &FeatureMap,
    starts: usize,
    seed: u64,
    opts: &EmOptions,
) -> Result<EmFit> {
    if starts == 0 {
        return Err(Error::InvalidInput("need at least one start".into()));
    }
    let runs: Vec<Result<EmFit>> = (0..starts)
        .into_par_iter()
        .map(|i| {
            let init = if i == 0 {
                Params::zeros(fm.dim())
            } else {
                let mut rng = rng::stream(seed, &[i as u64]);
                let normal = Normal::new(0.0, 1.0).expect("valid normal");
                Params(DVector::from_fn(fm.dim(), |_, _| normal.sample(&mut rng)))
            };
            em_marginal_ml(q, s, fm, &init, opts)
        })
        .collect();
    let mut best: Option<EmFit> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.log_likelihood() > b.log_likelihood()) {
                    best = Some(fit);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one run"))
}

/// Draws `n` observations by running the channel on `y ~ p_θ`.
pub fn simulate_observations<R: rand::RngCore>(
    ch: &dyn Channel,
    fm: &FeatureMap,
    theta: &Params,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let sampler = fm.sampler(theta);
    (0..n)
        .map(|_| {
            let y = sampler.sample(rng);
            ch.sample_observation(fm, y, rng)
        })
        .collect()
}
