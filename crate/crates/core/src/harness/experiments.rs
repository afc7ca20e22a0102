use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spec::{ChannelSpec, ModelSpec};
use super::{fmt_f64, RowError, RunOutput, Table};
use crate::asymptotics::{covariance_report, mc_estimates, sigma_marg, sigma_mom, McEstimator};
use crate::channels::{dp_audit, ClassicRR, DEFAULT_AUDIT_BUDGET};
use crate::error::{Error, Result};
use crate::estimators::{
    kl_project, moment_requirement_check, one_em_step, pinv_recover, random_deterministic_channel, EmpiricalObsDist,
};
use crate::expfam::{FeatureMap, FitOptions, Params};
use crate::linalg::{self, rel_frobenius};
use crate::privreg::{
    aggregate_moments, exact_moments, privatize_dataset, read_regression_csv, scale_dataset, solve_and_score,
    synthetic_regression, Privatizer, Scheme, SyntheticRegressionConfig, DEFAULT_RIDGE,
};
use crate::regioncount::{
    accuracy, build_model, exact_marginal_em_baseline, generate_corpus, generate_corpus_range, moment_pipeline,
    sample_annotations, supervised_fit, AnnotationConfig, FeatureSpec, GeneratorConfig, PipelineOptions,
    RegionEmOptions,
};
use crate::rng;

/// Seed for a sub-experiment, derived from the root seed by key.
pub fn sub_seed(seed: u64, key: &[u64]) -> u64 {
    rng::stream(seed, key).next_u64()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";")
}

fn positive(name: &str, values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(**v > 0.0)) {
        Some(v) => Err(Error::InvalidInput(format!("{name} must be positive, got {v}"))),
        None => Ok(()),
    }
}

/// Records the error for row `row` and returns empty metric cells.
fn failed(errors: &mut Vec<RowError>, row: usize, context: String, e: &Error, cells: usize) -> Vec<String> {
    errors.push(RowError {
        row,
        context,
        message: e.to_string(),
    });
    vec![String::new(); cells]
}

// ---- efficiency curve

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfficiencyCurveParams {
    pub model: ModelSpec,
    pub thetas: Vec<Vec<f64>>,
    pub epsilons: Vec<f64>,
    /// Base distribution of the randomized response; uniform when absent.
    pub base: Option<Vec<f64>>,
}

impl Default for EfficiencyCurveParams {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            thetas: vec![vec![0.0, 0.0], vec![2.0, -0.1], vec![5.0, -1.0]],
            epsilons: vec![
                1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001,
            ],
            base: None,
        }
    }
}

/// Exact efficiency of the moment estimator under classic randomized
/// response, one row per `(θ, ε)`.
pub fn run_efficiency_curve(p: &EfficiencyCurveParams) -> Result<RunOutput> {
    positive("epsilons", &p.epsilons)?;
    if let Some(e) = p.epsilons.iter().find(|&&e| e > 1.0) {
        return Err(Error::InvalidInput(format!("epsilon {e} exceeds 1")));
    }
    let fm = p.model.build()?;
    for t in &p.thetas {
        if t.len() != fm.dim() {
            return Err(Error::InvalidInput(format!("theta {t:?} does not have d = {}", fm.dim())));
        }
    }
    let points: Vec<(usize, f64)> = (0..p.thetas.len())
        .flat_map(|ti| p.epsilons.iter().map(move |&e| (ti, e)))
        .collect();
    let results: Vec<Result<(f64, f64, f64)>> = points
        .par_iter()
        .map(|&(ti, eps)| {
            let ch = match &p.base {
                Some(u) => ClassicRR::new(eps, u.clone())?,
                None => ClassicRR::uniform(eps, fm.outcomes())?,
            };
            let rep = covariance_report(&fm, &Params::from_slice(&p.thetas[ti]), &ch)?;
            Ok((rep.efficiency, rep.sigma_marg.trace(), rep.sigma_mom.trace()))
        })
        .collect();
    let mut table = Table::new(&["theta", "epsilon", "eff", "trace_sigma_marg", "trace_sigma_mom", "error"]);
    let mut errors = Vec::new();
    for (row, (&(ti, eps), r)) in points.iter().zip(results).enumerate() {
        let mut cells = vec![join(&p.thetas[ti]), fmt_f64(eps)];
        match r {
            Ok((eff, a, b)) => cells.extend([fmt_f64(eff), fmt_f64(a), fmt_f64(b), String::new()]),
            Err(e) => {
                let msg = e.to_string();
                cells.extend(failed(&mut errors, row, format!("theta={} epsilon={eps}", cells[0]), &e, 3));
                cells.push(msg);
            }
        }
        table.rows.push(cells);
    }
    Ok(RunOutput { table, errors })
}

// ---- Monte Carlo validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McValidateParams {
    pub model: ModelSpec,
    pub theta: Vec<f64>,
    pub channels: Vec<ChannelSpec>,
    pub estimators: Vec<McEstimator>,
    pub n: usize,
    pub trials: usize,
}

impl Default for McValidateParams {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            theta: vec![2.0, -0.1],
            channels: vec![
                ChannelSpec::Identity,
                ChannelSpec::ClassicRr { epsilon: 0.3, base: None },
                ChannelSpec::ClassicRr { epsilon: 0.5, base: None },
                ChannelSpec::ClassicRr { epsilon: 0.8, base: None },
                ChannelSpec::PerValue {
                    alpha: 2.0,
                    delta_bar: None,
                },
            ],
            estimators: vec![McEstimator::Moment, McEstimator::MarginalEm],
            n: 100_000,
            trials: 200,
        }
    }
}

fn estimator_name(e: McEstimator) -> &'static str {
    match e {
        McEstimator::Moment => "moment",
        McEstimator::MarginalEm => "marginal_em",
    }
}

/// Empirical covariance of `√n(θ̂ − θ*)` against the asymptotic formula.
/// Channel `c` draws its trials from seed `sub_seed(seed, [c])`, so both
/// estimators see the same data.
pub fn run_mc_validate(p: &McValidateParams, seed: u64) -> Result<RunOutput> {
    if p.n == 0 || p.trials < 2 {
        return Err(Error::InvalidInput("need n ≥ 1 and at least two trials".into()));
    }
    let fm = p.model.build()?;
    if p.theta.len() != fm.dim() {
        return Err(Error::InvalidInput(format!("theta must have d = {}", fm.dim())));
    }
    let theta = Params::from_slice(&p.theta);
    let mut table = Table::new(&[
        "channel",
        "estimator",
        "n",
        "trials",
        "rel_frobenius",
        "trace_mc",
        "trace_formula",
        "error",
    ]);
    let mut errors = Vec::new();
    for (ci, spec) in p.channels.iter().enumerate() {
        let ch_seed = sub_seed(seed, &[ci as u64]);
        for &est in &p.estimators {
            let row = table.rows.len();
            let mut cells = vec![
                spec.label(),
                estimator_name(est).to_string(),
                p.n.to_string(),
                p.trials.to_string(),
            ];
            let result = (|| -> Result<(f64, f64, f64)> {
                let ch = spec.build(&fm)?;
                let formula = match est {
                    McEstimator::Moment => sigma_mom(&fm, &theta, ch.as_ref())?,
                    McEstimator::MarginalEm => sigma_marg(&fm, &theta, &ch.channel_matrix(&fm)?)?,
                };
                let estimates = mc_estimates(est, ch.as_ref(), &fm, &theta, p.n, p.trials, ch_seed)?;
                let mc = scaled_covariance(&estimates, &theta, p.n);
                Ok((rel_frobenius(&mc, &formula), mc.trace(), formula.trace()))
            })();
            match result {
                Ok((rel, a, b)) => cells.extend([fmt_f64(rel), fmt_f64(a), fmt_f64(b), String::new()]),
                Err(e) => {
                    let msg = e.to_string();
                    cells.extend(failed(&mut errors, row, format!("{} {}", cells[0], cells[1]), &e, 3));
                    cells.push(msg);
                }
            }
            table.rows.push(cells);
        }
    }
    Ok(RunOutput { table, errors })
}

fn scaled_covariance(estimates: &[Params], theta: &Params, n: usize) -> DMatrix<f64> {
    let d = theta.len();
    let scaled: Vec<DVector<f64>> = estimates.iter().map(|t| (&t.0 - &theta.0) * (n as f64).sqrt()).collect();
    let mean = scaled.iter().fold(DVector::zeros(d), |a, v| a + v) / scaled.len() as f64;
    let cov = scaled.iter().fold(DMatrix::zeros(d, d), |a, v| a + linalg::outer(&(v - &mean)));
    cov / (scaled.len() - 1) as f64
}

// ---- geometry

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryParams {
    pub trials: usize,
    pub max_outcomes: usize,
    pub max_dim: usize,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            trials: 20,
            max_outcomes: 8,
            max_dim: 3,
        }
    }
}

/// Random deterministic channels: distance between one EM step from `θ = 0`
/// and the moment answer, and the error of the closed-form pseudoinverse.
/// Trial `t` draws from stream `[t]`.
pub fn run_geometry(p: &GeometryParams, seed: u64) -> Result<RunOutput> {
    if p.max_outcomes < 2 || p.max_dim == 0 {
        return Err(Error::InvalidInput("need max_outcomes ≥ 2 and max_dim ≥ 1".into()));
    }
    let rows: Vec<(Vec<String>, Option<Error>)> = (0..p.trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, &[t as u64]);
            let m = r.random_range(2..=p.max_outcomes);
            let k = r.random_range(1..=m);
            let d = r.random_range(1..=p.max_dim);
            let mut cells = vec![t.to_string(), m.to_string(), k.to_string(), d.to_string()];
            let result = (|| -> Result<(f64, f64, String)> {
                let s = random_deterministic_channel(&mut r, m, k)?;
                let fm = FeatureMap::new(DMatrix::from_fn(d, m, |_, _| r.random_range(-1.0..1.0)))?;
                let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.1..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let q = EmpiricalObsDist::population(DVector::from_iterator(k, raw.iter().map(|v| v / total)))?;
                let opts = FitOptions {
                    tol: 1e-12,
                    ..FitOptions::default()
                };
                let em = one_em_step(&Params::zeros(d), &q, &s, &fm, &opts)?;
                let mom = kl_project(&pinv_recover(&q, &s)?.r, &fm, &opts)?;
                let closed = s.matrix().transpose() * DMatrix::from_diagonal(&s.matrix().column_sum().map(|v| 1.0 / v));
                let generic = linalg::pinv(s.matrix(), 1e-10);
                let req = moment_requirement_check(&fm, &s)?;
                let status = serde_json::to_value(req.status)?
                    .as_str()
                    .unwrap_or_default()
                    .to_string();
                Ok(((em.0 - mom.0).amax(), (closed - generic).amax(), status))
            })();
            match result {
                Ok((dist, pinv_err, status)) => {
                    cells.extend([fmt_f64(dist), fmt_f64(pinv_err), status, String::new()]);
                    (cells, None)
                }
                Err(e) => {
                    cells.extend([String::new(), String::new(), String::new(), e.to_string()]);
                    (cells, Some(e))
                }
            }
        })
        .collect();
    let mut table = Table::new(&[
        "trial",
        "outcomes",
        "observations",
        "dim",
        "em_step_distance",
        "pinv_identity_error",
        "requirement",
        "error",
    ]);
    let mut errors = Vec::new();
    for (row, (cells, err)) in rows.into_iter().enumerate() {
        if let Some(e) = err {
            errors.push(RowError {
                row,
                context: format!("trial {}", cells[0]),
                message: e.to_string(),
            });
        }
        table.rows.push(cells);
    }
    Ok(RunOutput { table, errors })
}

// ---- region counts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionCountParams {
    pub generator: GeneratorConfig,
    pub features: FeatureSpec,
    pub window: usize,
    pub tag_subset_size: usize,
    pub strict_start: bool,
    pub annotation_counts: Vec<usize>,
    pub trials: usize,
    pub project_simplex: bool,
    pub exact_em: bool,
    pub em_max_iter: usize,
}

impl Default for RegionCountParams {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            features: FeatureSpec::default(),
            window: 3,
            tag_subset_size: 1,
            strict_start: false,
            annotation_counts: vec![100, 1000, 10_000],
            trials: 3,
            project_simplex: false,
            exact_em: true,
            em_max_iter: 200,
        }
    }
}

/// Per trial: a fresh train/test corpus pair (seed `sub_seed(seed, [t, 0])`),
/// the supervised fit, then for each annotation count the moment pipeline
/// and optionally the exact EM baseline on the same annotations
/// (seed `sub_seed(seed, [t, 1, i])`).
pub fn run_region_count(p: &RegionCountParams, seed: u64) -> Result<RunOutput> {
    if p.annotation_counts.contains(&0) {
        return Err(Error::InvalidInput("annotation counts must be positive".into()));
    }
    let per_trial: Vec<Vec<(Vec<String>, Option<Error>)>> = (0..p.trials)
        .into_par_iter()
        .map(|t| region_trial(p, seed, t))
        .collect();
    let mut table = Table::new(&[
        "trial",
        "annotations",
        "window",
        "tag_subset_size",
        "method",
        "train_accuracy",
        "test_accuracy",
        "error",
    ]);
    let mut errors = Vec::new();
    for (cells, err) in per_trial.into_iter().flatten() {
        if let Some(e) = err {
            errors.push(RowError {
                row: table.rows.len(),
                context: format!("trial {} annotations {} {}", cells[0], cells[1], cells[4]),
                message: e.to_string(),
            });
        }
        table.rows.push(cells);
    }
    Ok(RunOutput { table, errors })
}

fn region_trial(p: &RegionCountParams, seed: u64, t: usize) -> Vec<(Vec<String>, Option<Error>)> {
    let mut out = Vec::new();
    let row = |n: usize, method: &str, r: Result<(f64, f64)>| {
        let mut cells = vec![
            t.to_string(),
            n.to_string(),
            p.window.to_string(),
            p.tag_subset_size.to_string(),
            method.to_string(),
        ];
        match r {
            Ok((a, b)) => {
                cells.extend([fmt_f64(a), fmt_f64(b), String::new()]);
                (cells, None)
            }
            Err(e) => {
                cells.extend([String::new(), String::new(), e.to_string()]);
                (cells, Some(e))
            }
        }
    };
    let corpus_seed = sub_seed(seed, &[t as u64, 0]);
    let setup = (|| -> Result<_> {
        let train = generate_corpus(&p.generator, corpus_seed)?;
        let test = generate_corpus_range(&p.generator, corpus_seed, p.generator.num_sequences)?;
        let model = build_model(&train, &p.features)?;
        Ok((train, test, model))
    })();
    let (train, test, model) = match setup {
        Ok(s) => s,
        Err(e) => {
            out.push(row(0, "supervised", Err(e)));
            return out;
        }
    };
    let opts = PipelineOptions {
        project_simplex: p.project_simplex,
        ..PipelineOptions::default()
    };
    let score = |theta: &Params| -> Result<(f64, f64)> { Ok((accuracy(&model, theta, &train)?, accuracy(&model, theta, &test)?)) };
    out.push(row(0, "supervised", supervised_fit(&train, &model, &opts.fit).and_then(|th| score(&th))));
    for (i, &n) in p.annotation_counts.iter().enumerate() {
        let cfg = AnnotationConfig {
            window: p.window,
            tag_subset_size: p.tag_subset_size,
            num_annotations: n,
            strict_start: p.strict_start,
        };
        let anns = match sample_annotations(&train, &cfg, sub_seed(seed, &[t as u64, 1, i as u64])) {
            Ok(a) => a,
            Err(e) => {
                out.push(row(n, "moment", Err(e)));
                continue;
            }
        };
        out.push(row(
            n,
            "moment",
            moment_pipeline(&train, &anns, &model, &opts).and_then(|f| score(&f.theta)),
        ));
        if p.exact_em {
            let em_opts = RegionEmOptions {
                max_iter: p.em_max_iter,
                ..RegionEmOptions::default()
            };
            out.push(row(
                n,
                "exact_em",
                exact_marginal_em_baseline(&train, &anns, &model, &Params::zeros(model.dim()), &em_opts)
                    .and_then(|f| score(&f.theta)),
            ));
        }
    }
    out
}

// ---- private regression

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RegressionData {
    /// Features and noise as in [`SyntheticRegressionConfig`].
    Synthetic {
        features: usize,
        noise_sd: f64,
        n_train: usize,
        n_test: usize,
    },
    /// The last `test_fraction` of the rows form the test split.
    Csv { path: PathBuf, test_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivateRegressionParams {
    pub data: RegressionData,
    pub alphas: Vec<f64>,
    pub schemes: Vec<Scheme>,
    pub trials: usize,
    pub ridge: f64,
}

impl Default for PrivateRegressionParams {
    fn default() -> Self {
        Self {
            data: RegressionData::Synthetic {
                features: SyntheticRegressionConfig::default().features,
                noise_sd: SyntheticRegressionConfig::default().noise_sd,
                n_train: 10_000,
                n_test: 5_000,
            },
            alphas: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            schemes: vec![Scheme::PerValue, Scheme::MixedCoord],
            trials: 10,
            ridge: DEFAULT_RIDGE,
        }
    }
}

/// `(train x, train y, test x, test y)`, unscaled.
type Split = (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>);

fn load_regression(data: &RegressionData, seed: u64) -> Result<Split> {
    match data {
        RegressionData::Synthetic {
            features,
            noise_sd,
            n_train,
            n_test,
        } => {
            let config = &SyntheticRegressionConfig {
                features: *features,
                noise_sd: *noise_sd,
            };
            let (x, y) = synthetic_regression(config, *n_train, seed, 0)?;
            let (tx, ty) = synthetic_regression(config, *n_test, seed, *n_train)?;
            Ok((x, y, tx, ty))
        }
        RegressionData::Csv { path, test_fraction } => {
            if !(0.0..1.0).contains(test_fraction) || *test_fraction == 0.0 {
                return Err(Error::InvalidInput("test_fraction must lie in (0, 1)".into()));
            }
            let (x, y) = read_regression_csv(path)?;
            let n = y.len();
            let n_test = ((n as f64) * test_fraction).round() as usize;
            if n_test == 0 || n_test >= n {
                return Err(Error::NoData(format!("{n} rows cannot be split with fraction {test_fraction}")));
            }
            let n_train = n - n_test;
            Ok((
                x.rows(0, n_train).into_owned(),
                y.rows(0, n_train).into_owned(),
                x.rows(n_train, n_test).into_owned(),
                y.rows(n_train, n_test).into_owned(),
            ))
        }
    }
}

/// Columns `alpha,trial,scheme,r2_paper,r2_standard,n`. The first row is the
/// non-private fit (`scheme = ols`, `alpha = inf`). Record `i` of trial `t`
/// under scheme `s` draws from stream `[t, i]` under seed
/// `sub_seed(seed, [1, s])` for every α, so the sweep uses common random
/// numbers. Failed trials leave the `r2` cells empty.
pub fn run_private_regression(p: &PrivateRegressionParams, seed: u64) -> Result<RunOutput> {
    positive("alphas", &p.alphas)?;
    if !(p.ridge >= 0.0) {
        return Err(Error::InvalidInput("ridge must be nonnegative".into()));
    }
    let (x, y, tx, ty) = load_regression(&p.data, sub_seed(seed, &[0]))?;
    let ds = scale_dataset(&x, &y)?;
    let (tx, ty) = ds.rescale(&tx, &ty)?;
    let n = ds.len().to_string();
    let mut table = Table::new(&["alpha", "trial", "scheme", "r2_paper", "r2_standard", "n"]);
    let mut errors = Vec::new();
    let mut push = |table: &mut Table, alpha: String, trial: usize, scheme: &str, r: Result<(f64, f64)>| {
        let (a, b) = match r {
            Ok((a, b)) => (fmt_f64(a), fmt_f64(b)),
            Err(e) => {
                errors.push(RowError {
                    row: table.rows.len(),
                    context: format!("alpha={alpha} trial={trial} scheme={scheme}"),
                    message: e.to_string(),
                });
                (String::new(), String::new())
            }
        };
        table.rows.push(vec![alpha, trial.to_string(), scheme.to_string(), a, b, n.clone()]);
    };
    let (sxx, sxy) = exact_moments(&ds);
    let ols = solve_and_score(&sxx, &sxy, &tx, &ty, p.ridge).map(|s| (s.r2_paper, s.r2_standard));
    push(&mut table, "inf".into(), 0, "ols", ols);
    for &alpha in &p.alphas {
        for t in 0..p.trials {
            for (si, &scheme) in p.schemes.iter().enumerate() {
                let r = (|| {
                    let priv_ = Privatizer::new(scheme, ds.features(), alpha)?;
                    let samples = privatize_dataset(&ds, &priv_, sub_seed(seed, &[1, si as u64]), &[t as u64])?;
                    let (a, b) = aggregate_moments(&samples, priv_.layout())?;
                    solve_and_score(&a, &b, &tx, &ty, p.ridge).map(|s| (s.r2_paper, s.r2_standard))
                })();
                push(&mut table, fmt_f64(alpha), t, scheme.as_str(), r);
            }
        }
    }
    Ok(RunOutput { table, errors })
}

// ---- privacy audit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditCase {
    pub model: ModelSpec,
    pub channel: ChannelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditParams {
    pub cases: Vec<AuditCase>,
    pub budget: u64,
}

impl Default for AuditParams {
    fn default() -> Self {
        let cube4 = ModelSpec::BinaryCube { d: 4 };
        Self {
            cases: vec![
                AuditCase {
                    model: cube4.clone(),
                    channel: ChannelSpec::PerValue {
                        alpha: 1.0,
                        delta_bar: None,
                    },
                },
                AuditCase {
                    model: cube4,
                    channel: ChannelSpec::CoordRelease { alpha: 1.0, c: None },
                },
                AuditCase {
                    model: ModelSpec::default(),
                    channel: ChannelSpec::ClassicRr { epsilon: 0.5, base: None },
                },
                AuditCase {
                    model: ModelSpec::RegressionStats {
                        d: 2,
                        levels: vec![0.0, 1.0],
                    },
                    channel: ChannelSpec::MixedCoord { d: 2, alpha: 1.0 },
                },
            ],
            budget: DEFAULT_AUDIT_BUDGET as u64,
        }
    }
}

/// Exhaustive privacy audit per case; no randomness.
pub fn run_audit(p: &AuditParams) -> Result<RunOutput> {
    let results: Vec<Result<(crate::channels::AuditReport, Option<f64>)>> = p
        .cases
        .par_iter()
        .map(|c| {
            let fm = c.model.build()?;
            let ch = c.channel.build(&fm)?;
            Ok((dp_audit(ch.as_ref(), &fm, p.budget as u128)?, c.channel.log_ratio_bound(&fm)))
        })
        .collect();
    let mut table = Table::new(&[
        "model",
        "channel",
        "max_log_ratio",
        "log_ratio_bound",
        "within_bound",
        "argmax_o",
        "argmax_y",
        "argmax_y2",
        "error",
    ]);
    let mut errors = Vec::new();
    for (row, (c, r)) in p.cases.iter().zip(results).enumerate() {
        let mut cells = vec![c.model.label(), c.channel.label()];
        match r {
            Ok((rep, bound)) => {
                let (o, y, y2) = rep.argmax;
                cells.extend([
                    fmt_f64(rep.max_log_ratio),
                    bound.map(fmt_f64).unwrap_or_default(),
                    bound
                        .map(|b| (rep.max_log_ratio <= b + 1e-9).to_string())
                        .unwrap_or_default(),
                    o.to_string(),
                    y.to_string(),
                    y2.to_string(),
                    String::new(),
                ]);
            }
            Err(e) => {
                let msg = e.to_string();
                let context = format!("{} {}", cells[0], cells[1]);
                cells.extend(failed(&mut errors, row, context, &e, 6));
                cells.push(msg);
            }
        }
        table.rows.push(cells);
    }
    Ok(RunOutput { table, errors })
}
