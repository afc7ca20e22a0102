use nalgebra::DVector;
use rayon::prelude::*;

use super::{Corpus, RegionAnnotation};
use crate::error::{Error, Result};
use crate::expfam::{factorized_fit, FactorizedFitOptions, FactorizedModel, MomentVector, Params};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionEmOptions {
    pub max_iter: usize,
    /// Stop once the penalized marginal log-likelihood improves by less.
    pub tol: f64,
    pub fit: FactorizedFitOptions,
    /// Largest `K^w` the E-step may enumerate.
    pub budget: u128,
}

impl Default for RegionEmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            fit: super::default_fit_options(),
            budget: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionEmFit {
    pub theta: Params,
    /// Per-annotation marginal log-likelihood minus the penalty, at the
    /// initial point and after each iteration.
    pub ll_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Posterior {
    log_z: f64,
    /// `(word, marginal over tags)` for each region position.
    marginals: Vec<(usize, Vec<f64>)>,
}

/// Enumerates every labelling of the region consistent with the counts.
fn region_posterior(model: &FactorizedModel, theta: &Params, words: &[usize], counts: &[(usize, usize)]) -> Posterior {
    let k = model.num_labels();
    let w = words.len();
    let probs: Vec<Vec<f64>> = words.iter().map(|&a| model.conditional(theta, a)).collect();
    let mut z = 0.0;
    let mut marg = vec![vec![0.0; k]; w];
    let mut labels = vec![0usize; w];
    let total = k.pow(w as u32);
    let mut tally = vec![0usize; k];
    for idx in 0..total {
        let mut rest = idx;
        for l in labels.iter_mut() {
            *l = rest % k;
            rest /= k;
        }
        tally.iter_mut().for_each(|t| *t = 0);
        for &l in &labels {
            tally[l] += 1;
        }
        if counts.iter().any(|&(b, n)| tally[b] != n) {
            continue;
        }
        let weight: f64 = labels.iter().enumerate().map(|(j, &l)| probs[j][l]).product();
        z += weight;
        for (j, &l) in labels.iter().enumerate() {
            marg[j][l] += weight;
        }
    }
    if z > 0.0 {
        marg.iter_mut().flatten().for_each(|m| *m /= z);
    }
    Posterior {
        log_z: z.ln(),
        marginals: words.iter().copied().zip(marg).collect(),
    }
}

/// Maximum marginal likelihood of the count annotations by exact EM.
///
/// The E-step enumerates all `K^w` labellings of each annotated region and
/// keeps those matching the counts. Positions outside the region do not
/// interact with the observation under a factorized model, so they drop out
/// of the likelihood and only region positions enter the M-step.
///
/// # Panics
/// If an iteration lowers the penalized log-likelihood beyond round-off.
pub fn exact_marginal_em_baseline(
    corpus: &Corpus,
    annotations: &[RegionAnnotation],
    model: &FactorizedModel,
    theta_init: &Params,
    opts: &RegionEmOptions,
) -> Result<RegionEmFit> {
    if annotations.is_empty() {
        return Err(Error::NoData("no annotations".into()));
    }
    let k = model.num_labels() as u128;
    let max_w = annotations.iter().map(|a| a.window()).max().unwrap_or(0);
    let configurations = k.checked_pow(max_w as u32).unwrap_or(u128::MAX);
    if configurations > opts.budget {
        return Err(Error::RegionTooLarge {
            configurations,
            budget: opts.budget,
        });
    }
    let regions: Vec<&[usize]> = annotations
        .iter()
        .map(|a| {
            corpus
                .sequences
                .get(a.seq_id)
                .filter(|s| a.start <= a.end && a.end < s.len())
                .map(|s| &s.tokens[a.start..=a.end])
                .ok_or_else(|| Error::InvalidInput(format!("annotation outside sequence {}", a.seq_id)))
        })
        .collect::<Result<_>>()?;
    let n = annotations.len() as f64;
    let mut counts = vec![0.0; model.vocab_size()];
    for r in &regions {
        for &a in r.iter() {
            counts[a] += 1.0 / n;
        }
    }

    let e_step = |theta: &Params| -> (f64, DVector<f64>) {
        let posts: Vec<Posterior> = regions
            .par_iter()
            .zip(annotations.par_iter())
            .map(|(r, a)| region_posterior(model, theta, r, &a.counts))
            .collect();
        let mut ll = 0.0;
        let mut mu = DVector::zeros(model.dim());
        for p in &posts {
            ll += p.log_z;
            for (a, m) in &p.marginals {
                for (b, &pb) in m.iter().enumerate() {
                    if pb > 0.0 {
                        model.accumulate(&mut mu, *a, b, pb / n);
                    }
                }
            }
        }
        let penalty = 0.5 * opts.fit.l2 * theta.0.norm_squared();
        (ll / n - penalty, mu)
    };

    let mut theta = theta_init.clone();
    let (mut ll, mut mu) = e_step(&theta);
    let mut ll_trace = vec![ll];
    for it in 1..=opts.max_iter {
        let next = factorized_fit(model, &MomentVector::new(mu.clone(), annotations.len()), &counts, &opts.fit)?;
        let (next_ll, next_mu) = e_step(&next);
        assert!(
            next_ll >= ll - 1e-9 * ll.abs().max(1.0),
            "EM decreased the penalized log-likelihood from {ll} to {next_ll} at iteration {it}"
        );
        ll_trace.push(next_ll);
        let gain = next_ll - ll;
        theta = next;
        ll = next_ll;
        mu = next_mu;
        if gain < opts.tol {
            return Ok(RegionEmFit {
                theta,
                ll_trace,
                iterations: it,
                converged: true,
            });
        }
    }
    Ok(RegionEmFit {
        theta,
        ll_trace,
        iterations: opts.max_iter,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regioncount::{Corpus, SequenceExample};
    use approx::assert_relative_eq;

    #[test]
    fn forced_counts_give_point_masses() {
        let model = FactorizedModel::one_hot(3, 3);
        let theta = Params::from_slice(&[0.3, -0.2, 0.5, 0.0, 1.0, -1.0, 0.2, 0.2, 0.2]);
        let post = region_posterior(&model, &theta, &[0, 1, 2], &[(2, 3)]);
        for (_, m) in &post.marginals {
            assert_eq!(m, &vec![0.0, 0.0, 1.0]);
        }
        // window of one: the count reveals whether the label is b
        let post = region_posterior(&model, &theta, &[1], &[(0, 1)]);
        assert_eq!(post.marginals[0].1, vec![1.0, 0.0, 0.0]);
        let post = region_posterior(&model, &theta, &[1], &[(0, 0)]);
        let p = model.conditional(&theta, 1);
        assert_relative_eq!(post.marginals[0].1[1], p[1] / (p[1] + p[2]), epsilon = 1e-15);
        assert_relative_eq!(post.log_z, (p[1] + p[2]).ln(), epsilon = 1e-15);
    }

    #[test]
    fn full_reveal_window_one_matches_supervised_fit() {
        let corpus = Corpus {
            vocab_size: 2,
            num_labels: 2,
            words: vec![],
            sequences: vec![SequenceExample {
                tokens: vec![0, 1, 0, 1, 0],
                labels: Some(vec![0, 1, 1, 1, 0]),
            }],
            w_star: None,
        };
        let anns: Vec<RegionAnnotation> = (0..4)
            .map(|j| {
                let y = corpus.sequences[0].labels.as_ref().unwrap()[j];
                RegionAnnotation {
                    seq_id: 0,
                    start: j,
                    end: j,
                    counts: vec![(0, (y == 0) as usize), (1, (y == 1) as usize)],
                }
            })
            .collect();
        let model = FactorizedModel::one_hot(2, 2);
        let opts = RegionEmOptions::default();
        let fit = exact_marginal_em_baseline(&corpus, &anns, &model, &Params::zeros(4), &opts).unwrap();
        // supervised objective on the four annotated positions
        let mut mu = DVector::zeros(4);
        for j in 0..4 {
            model.accumulate(&mut mu, corpus.sequences[0].tokens[j], corpus.sequences[0].labels.as_ref().unwrap()[j], 0.25);
        }
        let sup = factorized_fit(&model, &MomentVector::new(mu, 4), &[0.5, 0.5], &opts.fit).unwrap();
        assert_relative_eq!(fit.theta.0, sup.0, epsilon = 1e-6);
        assert!(fit.iterations <= 2);
    }

    #[test]
    fn region_budget_is_enforced() {
        let corpus = Corpus {
            vocab_size: 1,
            num_labels: 10,
            words: vec![],
            sequences: vec![SequenceExample {
                tokens: vec![0; 8],
                labels: None,
            }],
            w_star: None,
        };
        let ann = RegionAnnotation {
            seq_id: 0,
            start: 0,
            end: 6,
            counts: vec![(0, 1)],
        };
        let model = FactorizedModel::one_hot(1, 10);
        assert!(matches!(
            exact_marginal_em_baseline(&corpus, &[ann], &model, &Params::zeros(10), &RegionEmOptions::default()),
            Err(Error::RegionTooLarge { configurations: 10_000_000, .. })
        ));
    }
}
