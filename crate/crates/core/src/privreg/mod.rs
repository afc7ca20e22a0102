//! Locally private linear regression from privatized sufficient statistics.
//!
//! Each record `(x, y)` with entries scaled into `[0, 1]` contributes the
//! statistic vector of all products `x_i x_j` (`i ≤ j`) followed by all
//! `x_i y`. Records are binarized, privatized, debiased and averaged into
//! estimates of `E[xxᵀ]` and `E[xy]`, from which the regression weights are
//! solved.

mod mixed;

pub use mixed::{MixedBranch, MixedCoordChannel};

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::PerValueChannel;
use crate::error::{Error, Result};
use crate::expfam::FeatureMap;
use crate::rng;

pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const MAX_CONDITION: f64 = 1e12;

/// Index layout of the regression statistic vector for `d` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatLayout {
    pub d: usize,
}

impl StatLayout {
    pub fn new(d: usize) -> Self {
        Self { d }
    }

    /// `d(d+1)/2 + d`.
    pub fn dim(&self) -> usize {
        self.d * (self.d + 1) / 2 + self.d
    }

    /// Index of `x_i x_j`; symmetric in `(i, j)`.
    pub fn xx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * self.d - i * (i + 1) / 2 + j
    }

    pub fn xy(&self, i: usize) -> usize {
        self.d * (self.d + 1) / 2 + i
    }

    pub fn stats(&self, x: &[f64], y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for i in 0..self.d {
            for j in i..self.d {
                out[self.xx(i, j)] = x[i] * x[j];
            }
            out[self.xy(i)] = x[i] * y;
        }
        out
    }

    /// Probability that one mixed-scheme release covers statistic `k`.
    pub fn selection_prob(&self, k: usize) -> f64 {
        let d = self.d as f64;
        if k >= self.xy(0) {
            return 0.5 / d;
        }
        let diagonal = (0..self.d).any(|i| self.xx(i, i) == k);
        if diagonal {
            // as the first or the second index of a block
            1.0 / d
        } else {
            1.0 / (d * (d - 1.0))
        }
    }

    /// Statistic vector back to `(Sxx, Sxy)`.
    pub fn unpack(&self, v: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let sxx = DMatrix::from_fn(self.d, self.d, |i, j| v[self.xx(i, j)]);
        let sxy = DVector::from_fn(self.d, |i, _| v[self.xy(i)]);
        (sxx, sxy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    PerValue,
    MixedCoord,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::PerValue => "per_value",
            Scheme::MixedCoord => "mixed_coord",
        }
    }
}

/// Affine map `v ↦ (v − min) / range` for one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingMap {
    pub min: f64,
    /// Zero for a constant column, which then maps to 0.
    pub range: f64,
}

impl ScalingMap {
    fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let min = values.clone().fold(f64::INFINITY, f64::min);
        let max = values.fold(f64::NEG_INFINITY, f64::max);
        Self { min, range: max - min }
    }

    pub fn is_degenerate(&self) -> bool {
        self.range <= 0.0
    }

    pub fn apply(&self, v: f64) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            (v - self.min) / self.range
        }
    }

    pub fn invert(&self, s: f64) -> f64 {
        self.min + s * self.range
    }
}

/// Design and response scaled into `[0, 1]` with the maps that did it.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x_maps: Vec<ScalingMap>,
    pub y_map: ScalingMap,
    /// Constant feature columns, mapped to 0.
    pub degenerate_columns: Vec<usize>,
}

impl RegressionDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x_maps.len()
    }

    /// Applies this dataset's maps to other data, e.g. a test split. The
    /// result may leave `[0, 1]` and is meant for scoring only.
    pub fn rescale(&self, raw_x: &DMatrix<f64>, raw_y: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
        if raw_x.ncols() != self.features() || raw_x.nrows() != raw_y.len() {
            return Err(Error::InvalidInput("shape does not match the fitted scaling".into()));
        }
        let x = DMatrix::from_fn(raw_x.nrows(), raw_x.ncols(), |r, c| self.x_maps[c].apply(raw_x[(r, c)]));
        let y = raw_y.map(|v| self.y_map.apply(v));
        Ok((x, y))
    }

    pub fn unscale(&self) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(self.x.nrows(), self.x.ncols(), |r, c| self.x_maps[c].invert(self.x[(r, c)]));
        (x, self.y.map(|v| self.y_map.invert(v)))
    }

    /// Weights fitted on the scaled data as `(intercept, weights)` on the raw
    /// scale.
    pub fn unscale_coefficients(&self, w: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut intercept = self.y_map.min;
        let raw = DVector::from_fn(w.len(), |i, _| {
            let m = self.x_maps[i];
            if m.is_degenerate() {
                return 0.0;
            }
            let slope = w[i] * self.y_map.range / m.range;
            intercept -= slope * m.min;
            slope
        });
        (intercept, raw)
    }
}

/// Per-column min-max scaling of design and response onto `[0, 1]`.
pub fn scale_dataset(raw_x: &DMatrix<f64>, raw_y: &DVector<f64>) -> Result<RegressionDataset> {
    if raw_y.is_empty() {
        return Err(Error::NoData("empty regression dataset".into()));
    }
    if raw_x.nrows() != raw_y.len() {
        return Err(Error::InvalidInput(format!(
            "design has {} rows, response has {}",
            raw_x.nrows(),
            raw_y.len()
        )));
    }
    if raw_x.iter().chain(raw_y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in regression data".into()));
    }
    let x_maps: Vec<ScalingMap> = raw_x.column_iter().map(|c| ScalingMap::fit(c.iter().copied())).collect();
    let y_map = ScalingMap::fit(raw_y.iter().copied());
    let degenerate_columns = x_maps
        .iter()
        .enumerate()
        .filter(|(_, m)| m.is_degenerate())
        .map(|(i, _)| i)
        .collect();
    let mut ds = RegressionDataset {
        x: DMatrix::zeros(0, 0),
        y: DVector::zeros(0),
        x_maps,
        y_map,
        degenerate_columns,
    };
    let (x, y) = ds.rescale(raw_x, raw_y)?;
    ds.x = x;
    ds.y = y;
    Ok(ds)
}

/// One privatized record. `values[t]` is the debiased estimate of statistic
/// `stats[t]`, before any selection weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivatizedStatSample {
    pub scheme: Scheme,
    pub stats: Vec<usize>,
    pub values: Vec<f64>,
}

/// A configured privatization mechanism for records with `d` features.
#[derive(Debug, Clone)]
pub enum Privatizer {
    PerValue { layout: StatLayout, channel: PerValueChannel },
    MixedCoord(MixedCoordChannel),
}

impl Privatizer {
    /// Per-value flips use `δ̄ = D`, the largest number of statistics that
    /// can binarize to 1 at once (an all-ones record).
    pub fn new(scheme: Scheme, d: usize, alpha: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput("no features".into()));
        }
        match scheme {
            Scheme::PerValue => {
                let layout = StatLayout::new(d);
                Ok(Privatizer::PerValue {
                    layout,
                    channel: PerValueChannel::new(alpha, layout.dim() as f64, 1.0)?,
                })
            }
            Scheme::MixedCoord => Ok(Privatizer::MixedCoord(MixedCoordChannel::new(d, alpha)?)),
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            Privatizer::PerValue { .. } => Scheme::PerValue,
            Privatizer::MixedCoord(_) => Scheme::MixedCoord,
        }
    }

    pub fn layout(&self) -> StatLayout {
        match self {
            Privatizer::PerValue { layout, .. } => *layout,
            Privatizer::MixedCoord(ch) => ch.layout(),
        }
    }

    /// Runs the mechanism on one scaled record.
    pub fn privatize<R: Rng + ?Sized>(&self, x: &[f64], y: f64, rng: &mut R) -> Result<PrivatizedStatSample> {
        let layout = self.layout();
        if x.len() != layout.d {
            return Err(Error::InvalidInput(format!("record has {} features, expected {}", x.len(), layout.d)));
        }
        let phi = layout.stats(x, y);
        check_unit(&phi)?;
        match self {
            Privatizer::PerValue { channel, .. } => {
                let tilde_o = binarize_unit(&phi, rng);
                let released = channel.sample(&tilde_o, rng);
                Ok(PrivatizedStatSample {
                    scheme: Scheme::PerValue,
                    stats: (0..layout.dim()).collect(),
                    values: channel.beta(&released)?.iter().copied().collect(),
                })
            }
            Privatizer::MixedCoord(ch) => {
                // coordinates binarize independently, so only the released
                // ones need drawing
                let branch = ch.draw_branch(rng);
                let stats = ch.released(branch);
                let mut tilde_o = vec![0u8; layout.dim()];
                let picked: Vec<f64> = stats.iter().map(|&k| phi[k]).collect();
                for (&k, b) in stats.iter().zip(binarize_unit(&picked, rng)) {
                    tilde_o[k] = b;
                }
                let bits = ch.release(branch, &tilde_o, rng);
                Ok(PrivatizedStatSample {
                    scheme: Scheme::MixedCoord,
                    stats,
                    values: ch.debias(branch, &bits)?,
                })
            }
        }
    }
}

fn check_unit(phi: &[f64]) -> Result<()> {
    match phi.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(k) => Err(Error::BoundViolation {
            outcome: 0,
            coordinate: k,
            value: phi[k],
            bound: 1.0,
        }),
        None => Ok(()),
    }
}

/// `õ[k] ~ Bernoulli(φ[k])` for statistics already in `[0, 1]`.
fn binarize_unit<R: Rng + ?Sized>(phi: &[f64], rng: &mut R) -> Vec<u8> {
    phi.iter().map(|&v| (rng.random::<f64>() < v) as u8).collect()
}

pub fn privatize_record<R: Rng + ?Sized>(
    x: &[f64],
    y: f64,
    scheme: Scheme,
    alpha: f64,
    rng: &mut R,
) -> Result<PrivatizedStatSample> {
    Privatizer::new(scheme, x.len(), alpha)?.privatize(x, y, rng)
}

/// Privatizes every record of `ds`, record `i` drawing from stream
/// `key ++ [i]`.
pub fn privatize_dataset(ds: &RegressionDataset, privatizer: &Privatizer, seed: u64, key: &[u64]) -> Result<Vec<PrivatizedStatSample>> {
    (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let mut k = key.to_vec();
            k.push(i as u64);
            let mut r = rng::stream(seed, &k);
            let x: Vec<f64> = ds.x.row(i).iter().copied().collect();
            privatizer.privatize(&x, ds.y[i], &mut r)
        })
        .collect()
}

/// Unbiased estimates of `E[xxᵀ]` and `E[xy]`.
///
/// Mixed-scheme values are weighted by the inverse probability that a release
/// covers their statistic. `Sxx` is symmetric by construction; it is not
/// projected onto the PSD cone.
pub fn aggregate_moments(samples: &[PrivatizedStatSample], layout: StatLayout) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if samples.is_empty() {
        return Err(Error::NoData("no privatized samples".into()));
    }
    let n = samples.len() as f64;
    let mut total = DVector::zeros(layout.dim());
    let mut seen = vec![false; layout.dim()];
    for s in samples {
        for (&k, &v) in s.stats.iter().zip(&s.values) {
            let w = match s.scheme {
                Scheme::PerValue => 1.0,
                Scheme::MixedCoord => 1.0 / layout.selection_prob(k),
            };
            total[k] += w * v;
            seen[k] = true;
        }
    }
    if let Some(coordinate) = seen.iter().position(|&s| !s) {
        return Err(Error::MissingCoordinate { coordinate });
    }
    Ok(layout.unpack(&(total / n)))
}

/// Non-private second moments of the scaled data.
pub fn exact_moments(ds: &RegressionDataset) -> (DMatrix<f64>, DVector<f64>) {
    let n = ds.len() as f64;
    let sxx = ds.x.transpose() * &ds.x / n;
    let sxy = ds.x.transpose() * &ds.y / n;
    (crate::linalg::symmetrize(&sxx), sxy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionScore {
    pub w: DVector<f64>,
    /// `‖Xw − Y‖² / ‖Y‖²`.
    pub r2_paper: f64,
    /// `1 − r2_paper`, the uncentered coefficient of determination.
    pub r2_standard: f64,
}

/// `w = (Sxx + λI)⁻¹ Sxy`, scored on held-out data.
pub fn solve_and_score(
    sxx: &DMatrix<f64>,
    sxy: &DVector<f64>,
    test_x: &DMatrix<f64>,
    test_y: &DVector<f64>,
    ridge: f64,
) -> Result<RegressionScore> {
    let d = sxy.len();
    if sxx.shape() != (d, d) || test_x.ncols() != d || test_x.nrows() != test_y.len() {
        return Err(Error::InvalidInput("regression shapes do not agree".into()));
    }
    let a = crate::linalg::symmetrize(sxx) + DMatrix::identity(d, d) * ridge;
    let eig = a.clone().symmetric_eigen();
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let (lo, hi) = abs
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let w = a.lu().solve(sxy).ok_or(Error::Singular { condition })?;
    let denom = test_y.norm_squared();
    if denom == 0.0 {
        return Err(Error::InvalidInput("test response is identically zero".into()));
    }
    let r2_paper = (test_x * &w - test_y).norm_squared() / denom;
    Ok(RegressionScore {
        w,
        r2_paper,
        r2_standard: 1.0 - r2_paper,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticRegressionConfig {
    pub features: usize,
    pub noise_sd: f64,
}

impl Default for SyntheticRegressionConfig {
    fn default() -> Self {
        Self {
            features: 8,
            noise_sd: 0.1,
        }
    }
}

/// Rows `offset..offset + n` of a synthetic regression problem: `x`
/// uniform on `[0, 1]^d`, `y = xᵀw* + noise` clipped to `[0, 1]`, with `w*`
/// nonnegative and summing to 1. Stream keys: `[0]` for `w*`, `[1, row]`
/// per row.
pub fn synthetic_regression(
    cfg: &SyntheticRegressionConfig,
    n: usize,
    seed: u64,
    offset: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = cfg.features;
    if d == 0 || !(cfg.noise_sd >= 0.0) {
        return Err(Error::InvalidInput("need d ≥ 1 and a nonnegative noise level".into()));
    }
    let w_star = synthetic_weights(d, seed);
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[1, (offset + i) as u64]);
            let x: Vec<f64> = (0..d).map(|_| r.random::<f64>()).collect();
            let mean: f64 = x.iter().zip(w_star.iter()).map(|(a, b)| a * b).sum();
            (x, (mean + noise.sample(&mut r)).clamp(0.0, 1.0))
        })
        .collect();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i].0[j]);
    let y = DVector::from_fn(n, |i, _| rows[i].1);
    Ok((x, y))
}

pub fn synthetic_weights(d: usize, seed: u64) -> DVector<f64> {
    let mut r = rng::stream(seed, &[0]);
    let w = DVector::from_fn(d, |_, _| r.random::<f64>());
    let s = w.sum();
    w / s
}

/// Header row, feature columns, response last.
pub fn read_regression_csv(path: &Path) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    if cols < 2 {
        return Err(Error::Format("need at least one feature column and a response".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("row {}: {e}", line + 1)))?;
        if row.len() != cols {
            return Err(Error::Format(format!("row {} has {} fields, expected {cols}", line + 1, row.len())));
        }
        rows.push(row);
    }
    let x = DMatrix::from_fn(rows.len(), cols - 1, |i, j| rows[i][j]);
    let y = DVector::from_fn(rows.len(), |i, _| rows[i][cols - 1]);
    Ok((x, y))
}

/// Statistic vectors of every record `(x, y) ∈ levels^{d+1}` as an
/// enumerable feature map, for exhaustive checks of the mechanisms.
pub fn statistics_feature_map(d: usize, levels: &[f64]) -> Result<FeatureMap> {
    let layout = StatLayout::new(d);
    let l = levels.len();
    let count = l.checked_pow(d as u32 + 1).ok_or_else(|| Error::InvalidInput("grid too large".into()))?;
    let outcomes: Vec<Vec<f64>> = (0..count)
        .map(|mut idx| {
            let mut v = vec![0.0; d + 1];
            for slot in v.iter_mut().rev() {
                *slot = levels[idx % l];
                idx /= l;
            }
            layout.stats(&v[..d], v[d])
        })
        .collect();
    FeatureMap::from_outcomes(&outcomes)?.with_bound(1.0)
}
