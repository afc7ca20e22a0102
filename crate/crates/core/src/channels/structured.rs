use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use super::{Channel, FlipProb};
use crate::error::{Error, Result};
use crate::expfam::{FeatureMap, OutcomeSampler};

/// Bits to index, coordinate 0 the most significant bit.
pub fn bits_to_index(bits: &[u8]) -> usize {
    bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
}

pub fn index_to_bits(index: usize, d: usize) -> Vec<u8> {
    (0..d).map(|i| ((index >> (d - 1 - i)) & 1) as u8).collect()
}

/// Random binary vector `õ` with `E[c·õ] = φ(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedStat {
    pub c: f64,
    pub tilde_o: Vec<u8>,
}

fn check_bound(fm: &FeatureMap, y: usize, c: f64) -> Result<()> {
    for i in 0..fm.dim() {
        let v = fm.matrix()[(i, y)];
        if !(0.0..=c).contains(&v) {
            return Err(Error::BoundViolation {
                outcome: y,
                coordinate: i,
                value: v,
                bound: c,
            });
        }
    }
    Ok(())
}

fn check_all_bounds(fm: &FeatureMap, c: f64) -> Result<()> {
    (0..fm.outcomes()).try_for_each(|y| check_bound(fm, y, c))
}

/// Draws `õ[i] ~ Bernoulli(φ(y)[i] / c)` independently.
///
/// Out-of-range features are refused rather than clipped.
pub fn binarize<R: Rng + ?Sized>(fm: &FeatureMap, y: usize, c: f64, rng: &mut R) -> Result<BinarizedStat> {
    check_bound(fm, y, c)?;
    let tilde_o = (0..fm.dim())
        .map(|i| {
            let p = fm.matrix()[(i, y)] / c;
            // p ∈ {0, 1} must stay deterministic
            (rng.random::<f64>() < p) as u8
        })
        .collect();
    Ok(BinarizedStat { c, tilde_o })
}

/// `R(õ | y)` as a `2^d × m` matrix (rows indexed by [`bits_to_index`]).
pub fn binarization_matrix(fm: &FeatureMap, c: f64, budget: u128) -> Result<DMatrix<f64>> {
    check_all_bounds(fm, c)?;
    let d = fm.dim();
    let terms = (1u128 << d.min(120)) * fm.outcomes() as u128 * d as u128;
    if d >= 64 || terms > budget {
        return Err(Error::TooLarge { terms, budget });
    }
    let rows = 1usize << d;
    Ok(DMatrix::from_fn(rows, fm.outcomes(), |idx, y| {
        (0..d)
            .map(|i| {
                let p = fm.matrix()[(i, y)] / c;
                if (idx >> (d - 1 - i)) & 1 == 1 {
                    p
                } else {
                    1.0 - p
                }
            })
            .product()
    }))
}

fn bit_probability(p_one: f64, keep: f64) -> f64 {
    p_one * keep + (1.0 - p_one) * (1.0 - keep)
}

/// Coordinate release: pick `j ~ p_cr`, release `õ[j]` kept with
/// probability `q_α`.
#[derive(Debug, Clone)]
pub struct CoordReleaseChannel {
    alpha: f64,
    p_cr: Vec<f64>,
    c: f64,
    flip: FlipProb,
    coord_sampler: OutcomeSampler,
}

impl CoordReleaseChannel {
    pub fn new(alpha: f64, p_cr: Vec<f64>, c: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::InvalidInput(format!("alpha must be nonnegative, got {alpha}")));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidInput(format!("bound must be positive, got {c}")));
        }
        if p_cr.is_empty() || p_cr.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::InvalidInput("coordinate distribution must be strictly positive".into()));
        }
        let total: f64 = p_cr.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("coordinate distribution sums to {total}")));
        }
        let coord_sampler = OutcomeSampler::new(&p_cr);
        Ok(Self {
            alpha,
            p_cr,
            c,
            flip: FlipProb::new(alpha),
            coord_sampler,
        })
    }

    pub fn uniform(d: usize, alpha: f64, c: f64) -> Result<Self> {
        Self::new(alpha, vec![1.0 / d as f64; d], c)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.p_cr.len()
    }

    pub fn flip(&self) -> FlipProb {
        self.flip
    }

    fn check(&self, fm: &FeatureMap) -> Result<()> {
        if fm.dim() != self.dim() {
            return Err(Error::InvalidInput(format!(
                "coordinate distribution has {} entries, feature map has d = {}",
                self.dim(),
                fm.dim()
            )));
        }
        check_all_bounds(fm, self.c)
    }

    pub fn sample<R: Rng + ?Sized>(&self, tilde_o: &[u8], rng: &mut R) -> (usize, u8) {
        let j = self.coord_sampler.sample(rng);
        let keep = rng.random::<f64>() < self.flip.q;
        let bit = if keep { tilde_o[j] } else { 1 - tilde_o[j] };
        (j, bit)
    }

    /// `p_cr(j)⁻¹ · (bit − 1 + q_α) / (2q_α − 1) · c · e_j`.
    pub fn beta(&self, j: usize, bit: u8) -> Result<DVector<f64>> {
        let contrast = self.flip.contrast();
        if contrast <= 0.0 {
            return Err(Error::DegeneratePrivacy);
        }
        let mut out = DVector::zeros(self.dim());
        out[j] = (bit as f64 - 1.0 + self.flip.q) / contrast * self.c / self.p_cr[j];
        Ok(out)
    }

    /// `Q((j, bit) | õ)` as a `2d × 2^d` matrix.
    fn release_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(2 * d, 1 << d, |obs, idx| {
            let (j, bit) = (obs / 2, (obs % 2) as u8);
            let tilde = ((idx >> (d - 1 - j)) & 1) as u8;
            let keep = if bit == tilde { self.flip.q } else { 1.0 - self.flip.q };
            self.p_cr[j] * keep
        })
    }
}

impl Channel for CoordReleaseChannel {
    fn name(&self) -> String {
        format!("coord_release(alpha={})", self.alpha)
    }

    fn observation_count(&self, fm: &FeatureMap) -> Result<usize> {
        self.check(fm)?;
        Ok(2 * fm.dim())
    }

    fn channel_matrix(&self, fm: &FeatureMap) -> Result<DMatrix<f64>> {
        self.check(fm)?;
        let d = fm.dim();
        Ok(DMatrix::from_fn(2 * d, fm.outcomes(), |obs, y| {
            let (j, bit) = (obs / 2, obs % 2);
            let one = bit_probability(fm.matrix()[(j, y)] / self.c, self.flip.q);
            self.p_cr[j] * if bit == 1 { one } else { 1.0 - one }
        }))
    }

    fn beta_table(&self, fm: &FeatureMap) -> Result<DMatrix<f64>> {
        self.check(fm)?;
        let d = fm.dim();
        let mut t = DMatrix::zeros(d, 2 * d);
        for obs in 0..2 * d {
            t.set_column(obs, &self.beta(obs / 2, (obs % 2) as u8)?);
        }
        Ok(t)
    }

    fn sample_observation(&self, fm: &FeatureMap, y: usize, rng: &mut dyn RngCore) -> Result<usize> {
        if fm.dim() != self.dim() {
            return Err(Error::InvalidInput("dimension mismatch".into()));
        }
        let b = binarize(fm, y, self.c, rng)?;
        let (j, bit) = self.sample(&b.tilde_o, rng);
        Ok(2 * j + bit as usize)
    }

    fn audit_matrix(&self, fm: &FeatureMap, budget: u128) -> Result<DMatrix<f64>> {
        self.check(fm)?;
        let d = fm.dim();
        let terms = 2 * d as u128 * (1u128 << d.min(120)) * fm.outcomes() as u128;
        if d >= 64 || terms > budget {
            return Err(Error::TooLarge { terms, budget });
        }
        Ok(self.release_matrix() * binarization_matrix(fm, self.c, budget)?)
    }
}

/// Per-value φ-RR: every coordinate of `õ` kept independently with
/// probability `q_{α/δ̄}`.
#[derive(Debug, Clone)]
pub struct PerValueChannel {
    alpha: f64,
    delta_bar: f64,
    c: f64,
    flip: FlipProb,
}

impl PerValueChannel {
    pub fn new(alpha: f64, delta_bar: f64, c: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::InvalidInput(format!("alpha must be nonnegative, got {alpha}")));
        }
        if !(delta_bar > 0.0) || !delta_bar.is_finite() {
            return Err(Error::InvalidInput(format!("delta_bar must be positive, got {delta_bar}")));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidInput(format!("bound must be positive, got {c}")));
        }
        Ok(Self {
            alpha,
            delta_bar,
            c,
            flip: FlipProb::new(alpha / delta_bar),
        })
    }

    /// Sets `δ̄` to the exact `sup ‖õ‖₁` over the support of the binarized
    /// statistics, using the feature map's recorded bound as `c`.
    pub fn with_enumerated_bound(fm: &FeatureMap, alpha: f64) -> Result<Self> {
        let c = fm
            .bound()
            .ok_or_else(|| Error::InvalidInput("feature map has no recorded bound".into()))?;
        let delta = support_l1(fm) as f64;
        Self::new(alpha, delta.max(1.0), c)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn delta_bar(&self) -> f64 {
        self.delta_bar
    }

    pub fn flip(&self) -> FlipProb {
        self.flip
    }

    fn check(&self, fm: &FeatureMap) -> Result<()> {
        check_all_bounds(fm, self.c)?;
        let delta = support_l1(fm) as f64;
        if self.delta_bar < delta {
            return Err(Error::InvalidInput(format!(
                "delta_bar = {} is below the support bound {delta}",
                self.delta_bar
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, tilde_o: &[u8], rng: &mut R) -> Vec<u8> {
        tilde_o
            .iter()
            .map(|&b| if rng.random::<f64>() < self.flip.q { b } else { 1 - b })
            .collect()
    }

    /// `(o_pv − 1 + q) / (2q − 1) · c` coordinatewise.
    pub fn beta(&self, o_pv: &[u8]) -> Result<DVector<f64>> {
        let contrast = self.flip.contrast();
        if contrast <= 0.0 {
            return Err(Error::DegeneratePrivacy);
        }
        Ok(DVector::from_iterator(
            o_pv.len(),
            o_pv.iter().map(|&b| (b as f64 - 1.0 + self.flip.q) / contrast * self.c),
        ))
    }

    fn release_matrix(&self, d: usize) -> DMatrix<f64> {
        let q = self.flip.q;
        DMatrix::from_fn(1 << d, 1 << d, |o, t| {
            let flips = (o ^ t).count_ones() as i32;
            q.powi(d as i32 - flips) * (1.0 - q).powi(flips)
        })
    }

    fn check_size(d: usize, m: usize, budget: u128) -> Result<()> {
        let terms = (1u128 << d.min(120)) * m as u128;
        if d >= 64 || terms > budget {
            return Err(Error::TooLarge { terms, budget });
        }
        Ok(())
    }
}

/// Largest number of coordinates that can binarize to 1 for one outcome.
fn support_l1(fm: &FeatureMap) -> usize {
    (0..fm.outcomes())
        .map(|y| fm.matrix().column(y).iter().filter(|&&v| v > 0.0).count())
        .max()
        .unwrap_or(0)
}

impl Channel for PerValueChannel {
    fn name(&self) -> String {
        format!("per_value(alpha={},delta_bar={})", self.alpha, self.delta_bar)
    }

    fn observation_count(&self, fm: &FeatureMap) -> Result<usize> {
        self.check(fm)?;
        Self::check_size(fm.dim(), 1, super::DEFAULT_AUDIT_BUDGET)?;
        Ok(1 << fm.dim())
    }

    fn channel_matrix(&self, fm: &FeatureMap) -> Result<DMatrix<f64>> {
        self.check(fm)?;
        let d = fm.dim();
        Self::check_size(d, fm.outcomes(), super::DEFAULT_AUDIT_BUDGET)?;
        Ok(DMatrix::from_fn(1 << d, fm.outcomes(), |o, y| {
            (0..d)
                .map(|i| {
                    let one = bit_probability(fm.matrix()[(i, y)] / self.c, self.flip.q);
                    if (o >> (d - 1 - i)) & 1 == 1 {
                        one
                    } else {
                        1.0 - one
                    }
                })
                .product()
        }))
    }

    fn beta_table(&self, fm: &FeatureMap) -> Result<DMatrix<f64>> {
        self.check(fm)?;
        let d = fm.dim();
        Self::check_size(d, 1, super::DEFAULT_AUDIT_BUDGET)?;
        let mut t = DMatrix::zeros(d, 1 << d);
        for o in 0..1usize << d {
            t.set_column(o, &self.beta(&index_to_bits(o, d))?);
        }
        Ok(t)
    }

    fn sample_observation(&self, fm: &FeatureMap, y: usize, rng: &mut dyn RngCore) -> Result<usize> {
        let b = binarize(fm, y, self.c, rng)?;
        Ok(bits_to_index(&self.sample(&b.tilde_o, rng)))
    }

    fn audit_matrix(&self, fm: &FeatureMap, budget: u128) -> Result<DMatrix<f64>> {
        self.check(fm)?;
        let d = fm.dim();
        let terms = (1u128 << (2 * d).min(120)) * fm.outcomes() as u128;
        if d >= 32 || terms > budget {
            return Err(Error::TooLarge { terms, budget });
        }
        Ok(self.release_matrix(d) * binarization_matrix(fm, self.c, budget)?)
    }
}
