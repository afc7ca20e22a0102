use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{FeatureMap, MomentVector, Params};
use crate::error::{Error, Result};
use crate::linalg;

/// Per-position conditional model `p_θ(y[j] = b | x[j] = a) ∝ exp(θᵀf(a, b))`
/// with node features only, so the sequence log-partition is a sum over
/// positions.
///
/// The feature map `f` is stored column-sparse: column `a·K + b` lists the
/// nonzero entries of `f(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedModel {
    vocab_size: usize,
    num_labels: usize,
    dim: usize,
    columns: Vec<Vec<(usize, f64)>>,
}

impl FactorizedModel {
    pub fn new(
        vocab_size: usize,
        num_labels: usize,
        dim: usize,
        columns: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self> {
        if vocab_size == 0 || num_labels == 0 || dim == 0 {
            return Err(Error::InvalidInput("empty factorized model".into()));
        }
        if columns.len() != vocab_size * num_labels {
            return Err(Error::InvalidInput(format!(
                "expected {} feature columns, got {}",
                vocab_size * num_labels,
                columns.len()
            )));
        }
        for col in &columns {
            for &(i, v) in col {
                if i >= dim || !v.is_finite() {
                    return Err(Error::InvalidInput(format!("bad feature entry ({i}, {v})")));
                }
            }
        }
        Ok(Self {
            vocab_size,
            num_labels,
            dim,
            columns,
        })
    }

    /// Saturated word × label indicator features (`d = V·K`).
    pub fn one_hot(vocab_size: usize, num_labels: usize) -> Self {
        let columns = (0..vocab_size * num_labels).map(|c| vec![(c, 1.0)]).collect();
        Self {
            vocab_size,
            num_labels,
            dim: vocab_size * num_labels,
            columns,
        }
    }

    /// From a dense `d × (V·K)` feature matrix.
    pub fn from_dense(vocab_size: usize, num_labels: usize, f: &DMatrix<f64>) -> Result<Self> {
        let columns = (0..f.ncols())
            .map(|c| {
                f.column(c)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(i, &v)| (i, v))
                    .collect()
            })
            .collect();
        Self::new(vocab_size, num_labels, f.nrows(), columns)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature(&self, word: usize, label: usize) -> &[(usize, f64)] {
        &self.columns[word * self.num_labels + label]
    }

    fn score(&self, theta: &DVector<f64>, word: usize, label: usize) -> f64 {
        self.feature(word, label).iter().map(|&(i, v)| v * theta[i]).sum()
    }

    /// `p_θ(· | x[j] = word)`.
    pub fn conditional(&self, theta: &Params, word: usize) -> Vec<f64> {
        let s: Vec<f64> = (0..self.num_labels)
            .map(|b| self.score(&theta.0, word, b))
            .collect();
        let lse = linalg::log_sum_exp(s.iter().copied());
        s.iter().map(|v| (v - lse).exp()).collect()
    }

    /// Most probable label for a word; ties go to the lowest label index.
    pub fn predict(&self, theta: &Params, word: usize) -> usize {
        let s: Vec<f64> = (0..self.num_labels)
            .map(|b| self.score(&theta.0, word, b))
            .collect();
        let mut best = 0;
        for b in 1..s.len() {
            if s[b] > s[best] {
                best = b;
            }
        }
        best
    }

    /// The finite family over labels induced by a single word.
    pub fn induced_family(&self, word: usize) -> Result<FeatureMap> {
        let mut phi = DMatrix::zeros(self.dim, self.num_labels);
        for b in 0..self.num_labels {
            for &(i, v) in self.feature(word, b) {
                phi[(i, b)] += v;
            }
        }
        FeatureMap::new(phi)
    }

    /// Adds `weight · f(word, label)` into `acc`.
    pub fn accumulate(&self, acc: &mut DVector<f64>, word: usize, label: usize, weight: f64) {
        for &(i, v) in self.feature(word, label) {
            acc[i] += weight * v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorizedFitOptions {
    /// L2 penalty `λ/2 ‖θ‖²` subtracted from the objective.
    pub l2: f64,
    /// Euclidean norm of the objective gradient at which to stop.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Divergence guard for unpenalized fits. With `l2 > 0` the maximizer
    /// always exists and the cap is not applied.
    pub theta_cap: f64,
}

impl Default for FactorizedFitOptions {
    fn default() -> Self {
        Self {
            l2: 0.0,
            grad_tol: 1e-9,
            max_iter: 500,
            theta_cap: 1e3,
        }
    }
}

struct Eval {
    value: f64,
    grad: DVector<f64>,
}

fn evaluate(
    model: &FactorizedModel,
    mu: &DVector<f64>,
    counts: &[(usize, f64)],
    theta: &DVector<f64>,
    l2: f64,
) -> Eval {
    let mut value = mu.dot(theta) - 0.5 * l2 * theta.norm_squared();
    let mut grad = mu - theta * l2;
    let th = Params(theta.clone());
    for &(a, c) in counts {
        let s: Vec<f64> = (0..model.num_labels).map(|b| model.score(theta, a, b)).collect();
        let lse = linalg::log_sum_exp(s.iter().copied());
        value -= c * lse;
        let p = model.conditional(&th, a);
        for (b, pb) in p.into_iter().enumerate() {
            model.accumulate(&mut grad, a, b, -c * pb);
        }
    }
    Eval { value, grad }
}

fn hessian(
    model: &FactorizedModel,
    counts: &[(usize, f64)],
    theta: &Params,
    l2: f64,
) -> DMatrix<f64> {
    let mut h = DMatrix::from_diagonal_element(model.dim, model.dim, l2);
    let k = model.num_labels;
    for &(a, c) in counts {
        let p = model.conditional(theta, a);
        for b in 0..k {
            for b2 in 0..k {
                let w = c * (if b == b2 { p[b] } else { 0.0 } - p[b] * p[b2]);
                if w == 0.0 {
                    continue;
                }
                for &(i, vi) in model.feature(a, b) {
                    for &(j, vj) in model.feature(a, b2) {
                        h[(i, j)] += w * vi * vj;
                    }
                }
            }
        }
    }
    h
}

/// Moment matching for the factorized model:
/// `argmax_θ μ̂ᵀθ − Σ_a c_a log Σ_b exp(f(a,b)ᵀθ) − λ/2 ‖θ‖²`,
/// where `c_a` is the average number of positions per sequence holding word
/// `a` over the provided inputs.
///
/// Damped Newton (pseudo-inverse on flat directions) with backtracking,
/// degrading to gradient ascent when a line search fails.
pub fn factorized_fit(
    model: &FactorizedModel,
    mu: &MomentVector,
    avg_position_counts: &[f64],
    opts: &FactorizedFitOptions,
) -> Result<Params> {
    if mu.mu.len() != model.dim {
        return Err(Error::InvalidInput(format!(
            "moment vector has length {}, model has d = {}",
            mu.mu.len(),
            model.dim
        )));
    }
    if avg_position_counts.len() != model.vocab_size {
        return Err(Error::InvalidInput("position counts must cover the vocabulary".into()));
    }
    let counts: Vec<(usize, f64)> = avg_position_counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != 0.0)
        .map(|(a, &c)| (a, c))
        .collect();
    if counts.iter().any(|&(_, c)| c < 0.0 || !c.is_finite()) {
        return Err(Error::InvalidInput("position counts must be nonnegative".into()));
    }

    if opts.l2 == 0.0 {
        check_consistent(model, &mu.mu, &counts)?;
    }

    let mut theta = DVector::<f64>::zeros(model.dim);
    let mut cur = evaluate(model, &mu.mu, &counts, &theta, opts.l2);
    let mut use_newton = true;
    let mut failures = 0;
    for _ in 0..opts.max_iter {
        let gnorm = cur.grad.norm();
        if gnorm <= opts.grad_tol {
            return Ok(Params(theta));
        }
        let norm = theta.norm();
        if opts.l2 == 0.0 && norm > opts.theta_cap {
            return Err(Error::NotInPolytope { norm });
        }
        let dir = if use_newton {
            let h = hessian(model, &counts, &Params(theta.clone()), opts.l2);
            pseudo_newton(&h, &cur.grad)
        } else {
            cur.grad.clone()
        };
        let slope = cur.grad.dot(&dir);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &theta + &dir * step;
            let next = evaluate(model, &mu.mu, &counts, &cand, opts.l2);
            let armijo = next.value >= cur.value + 1e-4 * step * slope;
            let flat = (next.value - cur.value).abs() <= 1e-14 * (1.0 + cur.value.abs())
                && next.grad.norm() < gnorm;
            if next.value.is_finite() && (armijo || flat) {
                accepted = Some((cand, next));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((t, e)) => {
                theta = t;
                cur = e;
            }
            None => {
                failures += 1;
                if !use_newton {
                    break;
                }
                if failures >= 3 {
                    use_newton = false;
                }
            }
        }
    }
    if opts.l2 == 0.0 && theta.norm() > opts.theta_cap {
        return Err(Error::NotInPolytope { norm: theta.norm() });
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        gradient_norm: cur.grad.norm(),
    })
}

/// Without a penalty the objective is unbounded unless `μ̂` minus the
/// per-word feature averages lies in the span of the centered features.
fn check_consistent(
    model: &FactorizedModel,
    mu: &DVector<f64>,
    counts: &[(usize, f64)],
) -> Result<()> {
    let k = model.num_labels;
    let mut offset = mu.clone();
    let mut centered = DMatrix::zeros(model.dim, counts.len() * k);
    for (slot, &(a, c)) in counts.iter().enumerate() {
        let mut mean = DVector::zeros(model.dim);
        for b in 0..k {
            model.accumulate(&mut mean, a, b, 1.0 / k as f64);
        }
        offset -= &mean * c;
        for b in 0..k {
            let mut col = -mean.clone();
            model.accumulate(&mut col, a, b, 1.0);
            centered.set_column(slot * k + b, &col);
        }
    }
    let basis = linalg::column_space(&centered, linalg::EIGEN_THRESHOLD);
    let outside = &offset - &basis * basis.tr_mul(&offset);
    let residual = outside.norm();
    if residual > 1e-9 * (1.0 + offset.norm()) {
        return Err(Error::NonIdentifiable {
            null_direction: (outside / residual).iter().copied().collect(),
            residual,
        });
    }
    Ok(())
}

fn pseudo_newton(h: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    if let Some(chol) = h.clone().cholesky() {
        let dir = chol.solve(g);
        if dir.iter().all(|v| v.is_finite()) {
            return dir;
        }
    }
    let eig = SymmetricEigen::new(h.clone());
    let max = eig.eigenvalues.amax().max(1e-300);
    let coeffs = eig.eigenvectors.tr_mul(g);
    let scaled = DVector::from_fn(coeffs.len(), |k, _| {
        let lam = eig.eigenvalues[k];
        if lam > 1e-10 * max {
            coeffs[k] / lam
        } else {
            // flat direction: only moves if the moments are inconsistent
            coeffs[k]
        }
    });
    &eig.eigenvectors * scaled
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::{fit_from_moments, FitOptions};
    use approx::assert_relative_eq;

    #[test]
    fn single_word_reduces_to_finite_family() {
        let f = DMatrix::from_row_slice(3, 6, &[
            1.0, 0.0, 0.0, 0.5, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, 0.0, 2.0,
        ]);
        let model = FactorizedModel::from_dense(2, 3, &f).unwrap();
        let fam = model.induced_family(1).unwrap();
        let star = Params::from_slice(&[0.3, -0.4, 0.2]);
        let mu = fam.mean_stats(&star);

        let direct = fit_from_moments(&fam, &mu, &FitOptions::default()).unwrap();
        let fact = factorized_fit(&model, &mu, &[0.0, 1.0], &FactorizedFitOptions::default()).unwrap();
        let p_direct = fam.distribution(&direct);
        let p_fact = model.conditional(&fact, 1);
        for b in 0..3 {
            assert_relative_eq!(p_direct[b], p_fact[b], epsilon = 1e-8);
        }
        assert_relative_eq!(direct.0, fact.0, epsilon = 1e-6);
    }

    #[test]
    fn saturated_model_reproduces_conditionals() {
        let w = [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]];
        let counts = [1.5, 2.0];
        let model = FactorizedModel::one_hot(2, 3);
        let mut mu = DVector::zeros(6);
        for a in 0..2 {
            for b in 0..3 {
                model.accumulate(&mut mu, a, b, counts[a] * w[a][b]);
            }
        }
        let th = factorized_fit(&model, &MomentVector::population(mu), &counts, &Default::default())
            .unwrap();
        for a in 0..2 {
            let p = model.conditional(&th, a);
            for b in 0..3 {
                assert_relative_eq!(p[b], w[a][b], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn inconsistent_moments_are_rejected() {
        // rows of the implied conditional do not sum to one
        let model = FactorizedModel::one_hot(1, 2);
        let mu = MomentVector::from_slice(&[0.5, 0.3]);
        let err = factorized_fit(&model, &mu, &[1.0], &Default::default()).unwrap_err();
        assert!(matches!(err, Error::NonIdentifiable { .. }), "{err:?}");
        let opts = FactorizedFitOptions {
            l2: 1e-3,
            ..Default::default()
        };
        assert!(factorized_fit(&model, &mu, &[1.0], &opts).is_ok());
    }

    #[test]
    fn boundary_moments_need_penalty_to_stay_bounded() {
        let model = FactorizedModel::one_hot(1, 2);
        let mu = MomentVector::from_slice(&[1.0, 0.0]);
        // unpenalized: either runs off towards the boundary or stops there
        match factorized_fit(&model, &mu, &[1.0], &Default::default()) {
            Ok(th) => assert!(model.conditional(&th, 0)[0] > 1.0 - 1e-5),
            Err(e) => assert!(matches!(e, Error::NotInPolytope { .. } | Error::NotConverged { .. })),
        }
        let opts = FactorizedFitOptions {
            l2: 1e-2,
            ..Default::default()
        };
        let th = factorized_fit(&model, &mu, &[1.0], &opts).unwrap();
        assert!(model.conditional(&th, 0)[0] > 0.9);
        assert!(th.0.norm() < 10.0);
    }
}
