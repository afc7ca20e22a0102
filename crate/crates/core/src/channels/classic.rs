use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use super::Channel;
use crate::error::{Error, Result};
use crate::expfam::{FeatureMap, OutcomeSampler};

/// Classic randomized response: reveal `y` with probability `ε`, otherwise
/// report a draw from the base distribution `u`.
#[derive(Debug, Clone)]
pub struct ClassicRR {
    epsilon: f64,
    base_u: Vec<f64>,
    base_sampler: OutcomeSampler,
}

impl ClassicRR {
    pub fn new(epsilon: f64, base_u: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::InvalidInput(format!("epsilon must lie in [0, 1], got {epsilon}")));
        }
        if base_u.is_empty() || base_u.iter().any(|&u| !(u >= 0.0) || !u.is_finite()) {
            return Err(Error::InvalidInput("base distribution must be nonnegative".into()));
        }
        let total: f64 = base_u.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("base distribution sums to {total}")));
        }
        let base_sampler = OutcomeSampler::new(&base_u);
        Ok(Self {
            epsilon,
            base_u,
            base_sampler,
        })
    }

    pub fn uniform(epsilon: f64, m: usize) -> Result<Self> {
        Self::new(epsilon, vec![1.0 / m as f64; m])
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn base_u(&self) -> &[f64] {
        &self.base_u
    }

    fn check(&self, fm: &FeatureMap) -> Result<()> {
        if fm.outcomes() != self.base_u.len() {
            return Err(Error::InvalidInput(format!(
                "base distribution has {} outcomes, feature map has {}",
                self.base_u.len(),
                fm.outcomes()
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, y: usize, rng: &mut R) -> usize {
        if rng.random::<f64>() < self.epsilon {
            y
        } else {
            self.base_sampler.sample(rng)
        }
    }

    /// `β(o) = (φ(o) − (1−ε) E_u[φ]) / ε`.
    pub fn beta(&self, fm: &FeatureMap, o: usize) -> Result<DVector<f64>> {
        self.check(fm)?;
        if self.epsilon == 0.0 {
            return Err(Error::DegeneratePrivacy);
        }
        let base_mean = fm.matrix() * DVector::from_column_slice(&self.base_u);
        Ok((fm.phi(o) - base_mean * (1.0 - self.epsilon)) / self.epsilon)
    }

    /// The closed-form privacy level `ε / ((1−ε) min_o u(o))`.
    pub fn dp_level(&self) -> Result<f64> {
        let m = self.base_u.len();
        if m == 1 {
            return Ok(0.0);
        }
        let min_u = self.base_u.iter().copied().fold(f64::INFINITY, f64::min);
        if self.epsilon == 1.0 || min_u == 0.0 {
            return Err(Error::InfinitePrivacyLoss { outcomes: m });
        }
        Ok(self.epsilon / ((1.0 - self.epsilon) * min_u))
    }
}

impl Channel for ClassicRR {
    fn name(&self) -> String {
        format!("classic_rr(eps={})", self.epsilon)
    }

    fn observation_count(&self, fm: &FeatureMap) -> Result<usize> {
        self.check(fm)?;
        Ok(fm.outcomes())
    }

    fn channel_matrix(&self, fm: &FeatureMap) -> Result<DMatrix<f64>> {
        self.check(fm)?;
        let m = fm.outcomes();
        Ok(DMatrix::from_fn(m, m, |o, y| {
            let hit = if o == y { self.epsilon } else { 0.0 };
            hit + (1.0 - self.epsilon) * self.base_u[o]
        }))
    }

    fn beta_table(&self, fm: &FeatureMap) -> Result<DMatrix<f64>> {
        let m = fm.outcomes();
        let mut t = DMatrix::zeros(fm.dim(), m);
        for o in 0..m {
            t.set_column(o, &self.beta(fm, o)?);
        }
        Ok(t)
    }

    fn sample_observation(&self, fm: &FeatureMap, y: usize, rng: &mut dyn RngCore) -> Result<usize> {
        self.check(fm)?;
        Ok(self.sample(y, rng))
    }
}
