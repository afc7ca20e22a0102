//! Finite-support exponential families `p_θ(y) ∝ exp(θᵀφ(y))`.
//!
//! Everything is computed by exact enumeration over the `m` outcomes, with
//! max-subtraction in every log-sum-exp.

mod factorized;

pub use factorized::{factorized_fit, FactorizedFitOptions, FactorizedModel};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg;

/// The `d × m` matrix of sufficient statistics, column `y` holding `φ(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    phi: DMatrix<f64>,
    bound: Option<f64>,
}

impl FeatureMap {
    pub fn new(phi: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() == 0 || phi.ncols() == 0 {
            return Err(Error::InvalidInput(
                "feature map needs d >= 1 and m >= 1".into(),
            ));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature map has non-finite entries".into()));
        }
        Ok(Self { phi, bound: None })
    }

    /// Builds from outcome feature vectors, one per outcome.
    pub fn from_outcomes(outcomes: &[Vec<f64>]) -> Result<Self> {
        let d = outcomes.first().map_or(0, Vec::len);
        if outcomes.iter().any(|o| o.len() != d) {
            return Err(Error::InvalidInput("ragged outcome feature vectors".into()));
        }
        Self::new(DMatrix::from_fn(d, outcomes.len(), |i, y| outcomes[y][i]))
    }

    /// All of `{0,1}^d` as outcomes, coordinate 0 the most significant bit.
    ///
    /// `binary_cube(2)` is the four-outcome model with
    /// `φ = [0,0], [0,1], [1,0], [1,1]`.
    pub fn binary_cube(d: usize) -> Self {
        let m = 1usize << d;
        let phi = DMatrix::from_fn(d, m, |i, y| ((y >> (d - 1 - i)) & 1) as f64);
        Self {
            phi,
            bound: Some(1.0),
        }
    }

    /// Records that every entry lies in `[0, c]`.
    pub fn with_bound(mut self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidInput(format!("bound must be positive, got {c}")));
        }
        for y in 0..self.outcomes() {
            for i in 0..self.dim() {
                let v = self.phi[(i, y)];
                if !(0.0..=c).contains(&v) {
                    return Err(Error::BoundViolation {
                        outcome: y,
                        coordinate: i,
                        value: v,
                        bound: c,
                    });
                }
            }
        }
        self.bound = Some(c);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    pub fn outcomes(&self) -> usize {
        self.phi.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound
    }

    pub fn phi(&self, y: usize) -> DVector<f64> {
        self.phi.column(y).into_owned()
    }

    pub fn is_binary(&self) -> bool {
        self.phi.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Column average `Φ1/m`.
    pub fn column_mean(&self) -> DVector<f64> {
        self.phi.column_mean()
    }

    fn scores(&self, theta: &Params) -> DVector<f64> {
        self.phi.tr_mul(&theta.0)
    }

    pub fn log_partition(&self, theta: &Params) -> f64 {
        linalg::log_sum_exp(self.scores(theta).iter().copied())
    }

    pub fn distribution(&self, theta: &Params) -> DVector<f64> {
        let s = self.scores(theta);
        let max = s.max();
        let w = s.map(|v| (v - max).exp());
        let z = w.sum();
        w / z
    }

    /// `∇A(θ) = Φ p_θ`.
    pub fn mean_stats(&self, theta: &Params) -> MomentVector {
        MomentVector::population(&self.phi * self.distribution(theta))
    }

    /// `cov_θ[φ(y)] = Σ p(y) φφᵀ − μμᵀ`, the Hessian of the log-partition.
    pub fn fisher_info(&self, theta: &Params) -> DMatrix<f64> {
        let p = self.distribution(theta);
        self.covariance_under(&p)
    }

    pub(crate) fn covariance_under(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let mu = &self.phi * p;
        let centered = DMatrix::from_fn(self.dim(), self.outcomes(), |i, y| {
            self.phi[(i, y)] - mu[i]
        });
        let weighted = DMatrix::from_fn(self.dim(), self.outcomes(), |i, y| centered[(i, y)] * p[y]);
        linalg::symmetrize(&(weighted * centered.transpose()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, theta: &Params, rng: &mut R) -> usize {
        self.sampler(theta).sample(rng)
    }

    /// Reusable categorical sampler for repeated draws under one θ.
    pub fn sampler(&self, theta: &Params) -> OutcomeSampler {
        OutcomeSampler::new(self.distribution(theta).as_slice())
    }
}

/// Categorical sampler over outcome indices.
#[derive(Debug, Clone)]
pub struct OutcomeSampler {
    index: WeightedIndex<f64>,
}

impl OutcomeSampler {
    pub fn new(probs: &[f64]) -> Self {
        Self {
            index: WeightedIndex::new(probs).expect("probabilities are finite and not all zero"),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }
}

/// Natural parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct Params(pub DVector<f64>);

impl Params {
    pub fn new(theta: DVector<f64>) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("parameters must be finite".into()));
        }
        Ok(Self(theta))
    }

    pub fn from_slice(theta: &[f64]) -> Self {
        Self(DVector::from_column_slice(theta))
    }

    pub fn zeros(d: usize) -> Self {
        Self(DVector::zeros(d))
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// An estimate of `E[φ]`, with the number of samples behind it (0 for
/// population moments).
#[derive(Debug, Clone, PartialEq)]
pub struct MomentVector {
    pub mu: DVector<f64>,
    pub n: usize,
}

impl MomentVector {
    pub fn new(mu: DVector<f64>, n: usize) -> Self {
        Self { mu, n }
    }

    pub fn population(mu: DVector<f64>) -> Self {
        Self { mu, n: 0 }
    }

    pub fn from_slice(mu: &[f64]) -> Self {
        Self::population(DVector::from_column_slice(mu))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Sup-norm tolerance on `mean_stats(θ̂) − μ̂`.
    pub tol: f64,
    pub max_iter: usize,
    /// `‖θ‖` beyond which the objective is declared unbounded.
    pub theta_cap: f64,
    /// Failed Newton line searches tolerated before switching to gradient ascent.
    pub max_failed_line_searches: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            theta_cap: 1e3,
            max_failed_line_searches: 3,
        }
    }
}

/// Solves `argmax_θ μ̂ᵀθ − A(θ)`, i.e. `∇A(θ̂) = μ̂`.
///
/// When the centered feature matrix is rank deficient the fit is carried out
/// in its column space, which yields the minimum-norm θ̂. A moment vector
/// with a component outside that space cannot be matched by any distribution
/// and is reported as [`Error::NonIdentifiable`] together with the offending
/// direction.
pub fn fit_from_moments(fm: &FeatureMap, mu: &MomentVector, opts: &FitOptions) -> Result<Params> {
    let d = fm.dim();
    if mu.mu.len() != d {
        return Err(Error::InvalidInput(format!(
            "moment vector has length {}, feature map has d = {d}",
            mu.mu.len()
        )));
    }
    if mu.mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("moment vector has non-finite entries".into()));
    }
    let center = fm.column_mean();
    let centered = DMatrix::from_fn(d, fm.outcomes(), |i, y| fm.phi[(i, y)] - center[i]);
    let basis = linalg::column_space(&centered, linalg::EIGEN_THRESHOLD);

    let offset = &mu.mu - &center;
    let inside = &basis * (basis.tr_mul(&offset));
    let outside = &offset - &inside;
    let residual = outside.norm();
    if residual > 1e-9 * (1.0 + offset.norm()) {
        return Err(Error::NonIdentifiable {
            null_direction: (outside / residual).iter().copied().collect(),
            residual,
        });
    }
    if basis.ncols() == 0 {
        return Ok(Params::zeros(d));
    }
    newton_in_subspace(fm, &mu.mu, &basis, opts)
}

fn objective(fm: &FeatureMap, mu: &DVector<f64>, theta: &Params) -> f64 {
    mu.dot(&theta.0) - fm.log_partition(theta)
}

fn newton_in_subspace(
    fm: &FeatureMap,
    mu: &DVector<f64>,
    basis: &DMatrix<f64>,
    opts: &FitOptions,
) -> Result<Params> {
    let r = basis.ncols();
    let mut eta = DVector::<f64>::zeros(r);
    let mut failures = 0usize;
    let mut use_newton = true;
    let mut last_grad = f64::INFINITY;

    for _ in 0..opts.max_iter {
        let theta = Params(basis * &eta);
        let norm = theta.0.norm();
        if norm > opts.theta_cap {
            return Err(Error::NotInPolytope { norm });
        }
        let p = fm.distribution(&theta);
        let mean = &fm.phi * &p;
        let g_full = mu - &mean;
        last_grad = g_full.amax();
        if last_grad <= opts.tol {
            return Ok(theta);
        }
        let g = basis.tr_mul(&g_full);
        let f0 = objective(fm, mu, &theta);

        let direction = if use_newton {
            let h = basis.transpose() * fm.covariance_under(&p) * basis;
            newton_direction(&h, &g).unwrap_or_else(|| g.clone())
        } else {
            g.clone()
        };
        let slope = g.dot(&direction);

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand_eta = &eta + &direction * step;
            let cand = Params(basis * &cand_eta);
            let f1 = objective(fm, mu, &cand);
            // Armijo, with a roundoff allowance once the objective stops moving
            let armijo = f1 >= f0 + 1e-4 * step * slope;
            let flat = (f1 - f0).abs() <= 1e-14 * (1.0 + f0.abs())
                && grad_inf(fm, mu, &cand) < last_grad;
            if f1.is_finite() && (armijo || flat) {
                accepted = Some(cand_eta);
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some(next) => eta = next,
            None => {
                failures += 1;
                if !use_newton {
                    break;
                }
                if failures >= opts.max_failed_line_searches {
                    use_newton = false;
                }
            }
        }
    }
    let theta = Params(basis * &eta);
    if theta.0.norm() > opts.theta_cap {
        return Err(Error::NotInPolytope {
            norm: theta.0.norm(),
        });
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        gradient_norm: last_grad,
    })
}

fn grad_inf(fm: &FeatureMap, mu: &DVector<f64>, theta: &Params) -> f64 {
    (mu - fm.mean_stats(theta).mu).amax()
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = h.clone().cholesky() {
        let dir = chol.solve(g);
        if dir.iter().all(|v| v.is_finite()) {
            return Some(dir);
        }
    }
    // Hessian numerically singular: pseudo-inverse step on the resolved part,
    // plain gradient on the rest.
    let eig = SymmetricEigen::new(h.clone());
    let max = eig.eigenvalues.amax();
    if !(max > 0.0) {
        return None;
    }
    let mut dir = DVector::zeros(g.len());
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let c = v.dot(g);
        if lam > 1e-12 * max {
            dir += v * (c / lam);
        } else {
            dir += v * c;
        }
    }
    Some(dir)
}
