//! Asymptotic covariances of the two estimators, computed by exact
//! enumeration, and a Monte Carlo check of the central limit behaviour.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::channels::Channel;
use crate::error::{Error, Result};
use crate::estimators::{em_marginal_ml, moment_estimate_from_dist, ChannelMatrix, EmOptions, EmpiricalObsDist};
use crate::expfam::{FeatureMap, FitOptions, Params};
use crate::linalg::{self, outer, spd_inverse, spd_inverse_scaled};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub fisher: DMatrix<f64>,
    pub sigma_marg: DMatrix<f64>,
    pub sigma_mom: DMatrix<f64>,
    /// `E[cov[β(o) | y]]` for the channel at hand.
    pub h_matrix: DMatrix<f64>,
    pub efficiency: f64,
}

/// `cov[E[φ|o]]` and `E[cov[φ|o]]` under `y ~ p_θ`, `o ~ S(·|y)`.
pub fn posterior_decomposition(
    fm: &FeatureMap,
    theta: &Params,
    s: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s = ChannelMatrix::new(s.clone())?;
    if s.outcomes() != fm.outcomes() {
        return Err(Error::InvalidInput("channel and feature map disagree on m".into()));
    }
    let p = fm.distribution(theta);
    let mean = fm.matrix() * &p;
    let d = fm.dim();
    let mut between = DMatrix::zeros(d, d);
    let mut within = DMatrix::zeros(d, d);
    for o in 0..s.observations() {
        let joint = DVector::from_fn(fm.outcomes(), |y, _| s.matrix()[(o, y)] * p[y]);
        let q_o = joint.sum();
        if q_o <= 0.0 {
            continue;
        }
        let post = joint / q_o;
        let post_mean = fm.matrix() * &post;
        between += outer(&(&post_mean - &mean)) * q_o;
        within += fm.covariance_under(&post) * q_o;
    }
    Ok((between, within))
}

/// `(I − E[cov[φ|o]])⁻¹`.
pub fn sigma_marg(fm: &FeatureMap, theta: &Params, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (_, within) = posterior_decomposition(fm, theta, s)?;
    let fisher = fm.fisher_info(theta);
    let scale = linalg::symmetrize(&fisher).symmetric_eigenvalues().amax();
    spd_inverse_scaled(&(&fisher - within), scale).map(|m| linalg::symmetrize(&m))
}

/// `E_y[cov[β(o) | y]]` by enumerating the channel's observation space.
pub fn conditional_beta_cov(fm: &FeatureMap, theta: &Params, ch: &dyn Channel) -> Result<DMatrix<f64>> {
    let s = ch.channel_matrix(fm)?;
    let beta = ch.beta_table(fm)?;
    let p = fm.distribution(theta);
    let d = fm.dim();
    let mut h = DMatrix::zeros(d, d);
    for y in 0..fm.outcomes() {
        if p[y] == 0.0 {
            continue;
        }
        let col = s.column(y).into_owned();
        let mean = &beta * &col;
        let mut cov = DMatrix::zeros(d, d);
        for (o, &w) in col.iter().enumerate() {
            if w > 0.0 {
                cov += outer(&(beta.column(o) - &mean)) * w;
            }
        }
        h += cov * p[y];
    }
    Ok(linalg::symmetrize(&h))
}

/// `I⁻¹ + I⁻¹ H I⁻¹`.
pub fn sigma_mom_from_h(fisher: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = spd_inverse(fisher)?;
    Ok(linalg::symmetrize(&(&inv + &inv * h * &inv)))
}

pub fn sigma_mom(fm: &FeatureMap, theta: &Params, ch: &dyn Channel) -> Result<DMatrix<f64>> {
    let h = conditional_beta_cov(fm, theta, ch)?;
    sigma_mom_from_h(&fm.fisher_info(theta), &h)
}

/// Closed form of `E[cov[β|y]]` for classic randomized response:
/// `(1−ε)/ε² cov_u[φ] + (1−ε)/ε E_p[(φ(y) − E_u[φ])⊗²]`.
pub fn h_rr(fm: &FeatureMap, theta: &Params, epsilon: f64, base_u: &[f64]) -> Result<DMatrix<f64>> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidInput(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    if base_u.len() != fm.outcomes() {
        return Err(Error::InvalidInput("base distribution length differs from m".into()));
    }
    let u = DVector::from_column_slice(base_u);
    let base_mean = fm.matrix() * &u;
    let p = fm.distribution(theta);
    let d = fm.dim();
    let mut spread = DMatrix::zeros(d, d);
    for y in 0..fm.outcomes() {
        spread += outer(&(fm.phi(y) - &base_mean)) * p[y];
    }
    let a = (1.0 - epsilon) / (epsilon * epsilon);
    let b = (1.0 - epsilon) / epsilon;
    Ok(fm.covariance_under(&u) * a + spread * b)
}

/// `q_t(1−q_t)/(2q_t−1)²`, written as `1/(4 sinh²(t/4))` to stay accurate
/// at both ends.
pub fn flip_variance(t: f64) -> f64 {
    let s = (0.25 * t).sinh();
    1.0 / (4.0 * s * s)
}

fn first_non_binary(fm: &FeatureMap) -> Option<(usize, usize, f64)> {
    let phi = fm.matrix();
    (0..fm.outcomes())
        .flat_map(|y| (0..fm.dim()).map(move |i| (y, i)))
        .map(|(y, i)| (y, i, phi[(i, y)]))
        .find(|&(_, _, v)| v != 0.0 && v != 1.0)
}

/// Closed form of `E[cov[β|y]]` for coordinate release with uniform
/// coordinate choice on binary features:
/// `d q(1−q)/(2q−1)² I + E[d diag(φ)² − φφᵀ]`.
pub fn h_coord_release(fm: &FeatureMap, theta: &Params, alpha: f64) -> Result<DMatrix<f64>> {
    if let Some((y, i, v)) = first_non_binary(fm) {
        return Err(Error::BoundViolation {
            outcome: y,
            coordinate: i,
            value: v,
            bound: 1.0,
        });
    }
    let d = fm.dim();
    let df = d as f64;
    let p = fm.distribution(theta);
    let mut h = DMatrix::identity(d, d) * (df * flip_variance(alpha));
    for y in 0..fm.outcomes() {
        let phi = fm.phi(y);
        let diag = DMatrix::from_diagonal(&phi.map(|v| v * v));
        h += (diag * df - outer(&phi)) * p[y];
    }
    Ok(h)
}

/// Closed form of `E[cov[β|y]]` for per-value randomized response on binary
/// features: `q(1−q)/(2q−1)² I` with `q = q_{α/δ̄}`.
pub fn h_per_value(d: usize, alpha: f64, delta_bar: f64) -> DMatrix<f64> {
    DMatrix::identity(d, d) * flip_variance(alpha / delta_bar)
}

/// Small-α approximation of `tr(H^cr)`: `4d²/α² + δ̄(d−1)`.
pub fn coord_release_trace_approx(d: usize, alpha: f64, delta_bar: f64) -> f64 {
    let d = d as f64;
    4.0 * d * d / (alpha * alpha) + delta_bar * (d - 1.0)
}

/// Small-α approximation of `tr(H^pv)`: `4dδ̄²/α²`.
pub fn per_value_trace_approx(d: usize, alpha: f64, delta_bar: f64) -> f64 {
    4.0 * d as f64 * delta_bar * delta_bar / (alpha * alpha)
}

/// `d⁻¹ tr(Σ_marg Σ_mom⁻¹)`. Identical inputs give exactly 1.
pub fn efficiency(sigma_marg: &DMatrix<f64>, sigma_mom: &DMatrix<f64>) -> Result<f64> {
    let inv = spd_inverse(sigma_mom).map_err(|e| match e {
        Error::SingularInformation { min_eigenvalue } => Error::Singular {
            condition: if min_eigenvalue > 0.0 {
                sigma_mom.symmetric_eigenvalues().amax() / min_eigenvalue
            } else {
                f64::INFINITY
            },
        },
        other => other,
    })?;
    if sigma_marg == sigma_mom {
        return Ok(1.0);
    }
    Ok((sigma_marg * inv).trace() / sigma_mom.nrows() as f64)
}

pub fn covariance_report(fm: &FeatureMap, theta: &Params, ch: &dyn Channel) -> Result<CovarianceReport> {
    let fisher = fm.fisher_info(theta);
    let h_matrix = conditional_beta_cov(fm, theta, ch)?;
    let sigma_mom = sigma_mom_from_h(&fisher, &h_matrix)?;
    let sigma_marg = sigma_marg(fm, theta, &ch.channel_matrix(fm)?)?;
    let efficiency = efficiency(&sigma_marg, &sigma_mom)?;
    Ok(CovarianceReport {
        fisher,
        sigma_marg,
        sigma_mom,
        h_matrix,
        efficiency,
    })
}

/// The duplicated-label toy with `φ(y) = y ∈ {0, 1}`, `o = [y, y + η]`,
/// `η ~ N(0, σ²)` and `β(o) = (o[0] + o[1]) / 2`.
///
/// `o` is continuous, so the conditional covariance is taken in closed form:
/// `var[β | y] = σ²/4`. Since `y` is a function of `o`, `Σ_marg = I⁻¹`.
pub fn gaussian_duplicate_report(theta: f64, noise_sd: f64) -> Result<CovarianceReport> {
    let fm = FeatureMap::from_outcomes(&[vec![0.0], vec![1.0]])?;
    let fisher = fm.fisher_info(&Params::from_slice(&[theta]));
    let h_matrix = DMatrix::from_element(1, 1, 0.25 * noise_sd * noise_sd);
    let sigma_marg = spd_inverse(&fisher)?;
    let sigma_mom = sigma_mom_from_h(&fisher, &h_matrix)?;
    let efficiency = efficiency(&sigma_marg, &sigma_mom)?;
    Ok(CovarianceReport {
        fisher,
        sigma_marg,
        sigma_mom,
        h_matrix,
        efficiency,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McEstimator {
    Moment,
    MarginalEm,
}

/// Empirical covariance of `√n(θ̂ − θ*)` over independent trials.
///
/// Trial `t` draws its data from the stream keyed by `(seed, t)`, and the
/// per-trial estimates are reduced in trial order, so the result does not
/// depend on the thread count.
pub fn mc_covariance(
    estimator: McEstimator,
    ch: &dyn Channel,
    fm: &FeatureMap,
    theta_star: &Params,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if n == 0 || trials == 0 {
        return Err(Error::InvalidInput("n and trials must be positive".into()));
    }
    let estimates = mc_estimates(estimator, ch, fm, theta_star, n, trials, seed)?;
    let d = fm.dim();
    let scaled: Vec<DVector<f64>> = estimates
        .iter()
        .map(|t| (&t.0 - &theta_star.0) * (n as f64).sqrt())
        .collect();
    let mean = scaled.iter().fold(DVector::zeros(d), |acc, v| acc + v) / trials as f64;
    let mut cov = DMatrix::zeros(d, d);
    for v in &scaled {
        cov += outer(&(v - &mean));
    }
    Ok(cov / (trials.max(2) - 1) as f64)
}

/// The per-trial estimates behind [`mc_covariance`], in trial order.
pub fn mc_estimates(
    estimator: McEstimator,
    ch: &dyn Channel,
    fm: &FeatureMap,
    theta_star: &Params,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<Params>> {
    let k = ch.observation_count(fm)?;
    let beta = match estimator {
        McEstimator::Moment => Some(ch.beta_table(fm)?),
        McEstimator::MarginalEm => None,
    };
    let s = match estimator {
        McEstimator::MarginalEm => Some(ChannelMatrix::from_channel(ch, fm)?),
        McEstimator::Moment => None,
    };
    let sampler = fm.sampler(theta_star);
    let fit_opts = FitOptions::default();
    let em_opts = EmOptions::default();
    let results: Vec<Result<Params>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng::stream(seed, &[t as u64]);
            let mut counts = vec![0usize; k];
            for _ in 0..n {
                let y = sampler.sample(&mut rng);
                counts[ch.sample_observation(fm, y, &mut rng)?] += 1;
            }
            let q = EmpiricalObsDist::from_counts(&counts);
            match estimator {
                McEstimator::Moment => {
                    moment_estimate_from_dist(&q, beta.as_ref().expect("beta"), fm, &fit_opts).map(|r| r.1)
                }
                McEstimator::MarginalEm => {
                    em_marginal_ml(&q, s.as_ref().expect("channel"), fm, &Params::zeros(fm.dim()), &em_opts)
                        .map(|f| f.theta)
                }
            }
            .map_err(|e| Error::Trial {
                trial: t,
                source: Box::new(e),
            })
        })
        .collect();
    results.into_iter().collect()
}
