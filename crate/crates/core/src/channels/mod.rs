//! Supervision channels `S(o | y)` with their debiasing observation functions
//! `β` (satisfying `E[β(o) | y] = φ(y)`) and an exhaustive differential
//! privacy auditor.
//!
//! Every channel exposes its full law over a finite observation space so that
//! unbiasedness, variances and privacy can be checked by enumeration rather
//! than sampling.

mod audit;
mod classic;
mod structured;

pub use audit::{dp_audit, AuditReport, DEFAULT_AUDIT_BUDGET};
pub use classic::ClassicRR;
pub use structured::{
    binarization_matrix, binarize, bits_to_index, index_to_bits, BinarizedStat, CoordReleaseChannel,
    PerValueChannel,
};

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::Result;
use crate::expfam::FeatureMap;

/// A finite supervision channel over the outcomes of a feature map.
pub trait Channel: Send + Sync {
    /// Short identifier used in reports.
    fn name(&self) -> String;

    /// Number of distinct observations `k`.
    fn observation_count(&self, fm: &FeatureMap) -> Result<usize>;

    /// `k × m` matrix with `S(o | y)` in row `o`, column `y`.
    fn channel_matrix(&self, fm: &FeatureMap) -> Result<DMatrix<f64>>;

    /// `d × k` table holding `β(o)` in column `o`.
    fn beta_table(&self, fm: &FeatureMap) -> Result<DMatrix<f64>>;

    /// Draws an observation index for private outcome `y` by running the
    /// mechanism itself.
    fn sample_observation(&self, fm: &FeatureMap, y: usize, rng: &mut dyn RngCore) -> Result<usize>;

    /// Channel matrix as seen by the privacy auditor. Mechanisms that first
    /// binarize override this to marginalize the intermediate `õ` explicitly.
    fn audit_matrix(&self, fm: &FeatureMap, _budget: u128) -> Result<DMatrix<f64>> {
        self.channel_matrix(fm)
    }
}

/// Keep probability `q_t = e^{t/2} / (1 + e^{t/2})` of the binary flips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlipProb {
    pub t: f64,
    pub q: f64,
}

impl FlipProb {
    /// `t = +∞` gives `q = 1` (no noise); `t = 0` gives exactly `1/2`.
    pub fn new(t: f64) -> Self {
        let q = 1.0 / (1.0 + (-0.5 * t).exp());
        Self { t, q }
    }

    /// `2q − 1`, the signal retained by one flip.
    pub fn contrast(&self) -> f64 {
        2.0 * self.q - 1.0
    }
}

/// `E_o[β(o) | y]` for every outcome, as a `d × m` matrix (should equal `Φ`).
pub fn conditional_beta_means(ch: &dyn Channel, fm: &FeatureMap) -> Result<DMatrix<f64>> {
    Ok(ch.beta_table(fm)? * ch.channel_matrix(fm)?)
}

/// `E[β(o)]` under the given outcome distribution.
pub fn expected_beta(ch: &dyn Channel, fm: &FeatureMap, p: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(conditional_beta_means(ch, fm)? * p)
}
