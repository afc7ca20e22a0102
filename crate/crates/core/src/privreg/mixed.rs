use nalgebra::DMatrix;
use rand::{Rng, RngCore};

use super::StatLayout;
use crate::channels::{binarization_matrix, binarize, index_to_bits, Channel, CoordReleaseChannel, PerValueChannel};
use crate::error::{Error, Result};
use crate::expfam::FeatureMap;

/// Which part of the statistic vector one mixed release covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixedBranch {
    /// `x_i y` through one-coordinate release.
    Response { i: usize },
    /// `[x_i², x_i x_j, x_j²]` through per-value flips with `δ̄ = 3`.
    Block { i: usize, j: usize },
}

/// The mixed mechanism: pick `i` uniformly, then with probability 1/2
/// release `x_i y`, otherwise pick `j ≠ i` uniformly and release the block
/// `[x_i², x_i x_j, x_j²]`. Both branches run at level `α`.
#[derive(Debug, Clone)]
pub struct MixedCoordChannel {
    layout: StatLayout,
    single: CoordReleaseChannel,
    block: PerValueChannel,
}

impl MixedCoordChannel {
    pub fn new(d: usize, alpha: f64) -> Result<Self> {
        if d < 2 {
            return Err(Error::InvalidInput("the mixed scheme needs at least two features".into()));
        }
        Ok(Self {
            layout: StatLayout::new(d),
            single: CoordReleaseChannel::uniform(1, alpha, 1.0)?,
            block: PerValueChannel::new(alpha, 3.0, 1.0)?,
        })
    }

    pub fn layout(&self) -> StatLayout {
        self.layout
    }

    pub fn alpha(&self) -> f64 {
        self.single.alpha()
    }

    fn block_stats(&self, i: usize, j: usize) -> [usize; 3] {
        let l = self.layout;
        [l.xx(i, i), l.xx(i, j), l.xx(j, j)]
    }

    /// Statistic indices released by a branch.
    pub fn released(&self, branch: MixedBranch) -> Vec<usize> {
        match branch {
            MixedBranch::Response { i } => vec![self.layout.xy(i)],
            MixedBranch::Block { i, j } => self.block_stats(i, j).to_vec(),
        }
    }

    /// Draws the branch; independent of the data.
    pub fn draw_branch<R: Rng + ?Sized>(&self, rng: &mut R) -> MixedBranch {
        let d = self.layout.d;
        let i = rng.random_range(0..d);
        if rng.random::<bool>() {
            MixedBranch::Response { i }
        } else {
            let j = rng.random_range(0..d - 1);
            MixedBranch::Block {
                i,
                j: if j >= i { j + 1 } else { j },
            }
        }
    }

    /// Releases the statistics picked by `branch` from the binarized vector.
    pub fn release<R: Rng + ?Sized>(&self, branch: MixedBranch, tilde_o: &[u8], rng: &mut R) -> Vec<u8> {
        match branch {
            MixedBranch::Response { i } => {
                let (_, bit) = self.single.sample(&tilde_o[self.layout.xy(i)..=self.layout.xy(i)], rng);
                vec![bit]
            }
            MixedBranch::Block { i, j } => {
                let bits: Vec<u8> = self.block_stats(i, j).iter().map(|&k| tilde_o[k]).collect();
                self.block.sample(&bits, rng)
            }
        }
    }

    /// Debiased values of the released statistics, without selection weights.
    pub fn debias(&self, branch: MixedBranch, bits: &[u8]) -> Result<Vec<f64>> {
        match branch {
            MixedBranch::Response { .. } => Ok(vec![self.single.beta(0, bits[0])?[0]]),
            MixedBranch::Block { .. } => Ok(self.block.beta(bits)?.iter().copied().collect()),
        }
    }

    fn pairs(&self) -> usize {
        self.layout.d * (self.layout.d - 1)
    }

    fn pair_at(&self, p: usize) -> (usize, usize) {
        let d = self.layout.d;
        let (i, r) = (p / (d - 1), p % (d - 1));
        (i, if r >= i { r + 1 } else { r })
    }

    /// Observation index to `(branch, released bits)`. Response releases come
    /// first as `2i + bit`, then ordered pairs `(i, j)`, eight bit patterns
    /// each.
    pub fn decode(&self, obs: usize) -> (MixedBranch, Vec<u8>) {
        let d = self.layout.d;
        if obs < 2 * d {
            (MixedBranch::Response { i: obs / 2 }, vec![(obs % 2) as u8])
        } else {
            let r = obs - 2 * d;
            let (i, j) = self.pair_at(r / 8);
            (MixedBranch::Block { i, j }, index_to_bits(r % 8, 3))
        }
    }

    fn branch_prob(&self, branch: MixedBranch) -> f64 {
        let d = self.layout.d as f64;
        match branch {
            MixedBranch::Response { .. } => 0.5 / d,
            MixedBranch::Block { .. } => 0.5 / (d * (d - 1.0)),
        }
    }

    fn check(&self, fm: &FeatureMap) -> Result<()> {
        if fm.dim() != self.layout.dim() {
            return Err(Error::InvalidInput(format!(
                "feature map has d = {}, the statistic layout needs {}",
                fm.dim(),
                self.layout.dim()
            )));
        }
        Ok(())
    }

    /// `Q(o | õ)` as a `k × 2^D` matrix.
    fn release_matrix(&self) -> DMatrix<f64> {
        let dim = self.layout.dim();
        let q_single = self.single.flip().q;
        let q_block = self.block.flip().q;
        let k = 2 * self.layout.d + 8 * self.pairs();
        DMatrix::from_fn(k, 1 << dim, |obs, idx| {
            let tilde = index_to_bits(idx, dim);
            let (branch, bits) = self.decode(obs);
            let q = match branch {
                MixedBranch::Response { .. } => q_single,
                MixedBranch::Block { .. } => q_block,
            };
            let keep: f64 = self
                .released(branch)
                .iter()
                .zip(&bits)
                .map(|(&s, &b)| if tilde[s] == b { q } else { 1.0 - q })
                .product();
            self.branch_prob(branch) * keep
        })
    }
}

impl Channel for MixedCoordChannel {
    fn name(&self) -> String {
        format!("mixed_coord(alpha={})", self.alpha())
    }

    fn observation_count(&self, fm: &FeatureMap) -> Result<usize> {
        self.check(fm)?;
        Ok(2 * self.layout.d + 8 * self.pairs())
    }

    fn channel_matrix(&self, fm: &FeatureMap) -> Result<DMatrix<f64>> {
        let k = self.observation_count(fm)?;
        let q_single = self.single.flip().q;
        let q_block = self.block.flip().q;
        Ok(DMatrix::from_fn(k, fm.outcomes(), |obs, y| {
            let (branch, bits) = self.decode(obs);
            let q = match branch {
                MixedBranch::Response { .. } => q_single,
                MixedBranch::Block { .. } => q_block,
            };
            let p: f64 = self
                .released(branch)
                .iter()
                .zip(&bits)
                .map(|(&s, &b)| {
                    let one = fm.matrix()[(s, y)] * q + (1.0 - fm.matrix()[(s, y)]) * (1.0 - q);
                    if b == 1 {
                        one
                    } else {
                        1.0 - one
                    }
                })
                .product();
            self.branch_prob(branch) * p
        }))
    }

    /// Debiased values scaled by the inverse selection probability of each
    /// released statistic.
    fn beta_table(&self, fm: &FeatureMap) -> Result<DMatrix<f64>> {
        let k = self.observation_count(fm)?;
        let mut t = DMatrix::zeros(self.layout.dim(), k);
        for obs in 0..k {
            let (branch, bits) = self.decode(obs);
            for (s, v) in self.released(branch).into_iter().zip(self.debias(branch, &bits)?) {
                t[(s, obs)] = v / self.layout.selection_prob(s);
            }
        }
        Ok(t)
    }

    fn sample_observation(&self, fm: &FeatureMap, y: usize, rng: &mut dyn RngCore) -> Result<usize> {
        self.check(fm)?;
        let b = binarize(fm, y, 1.0, rng)?;
        let branch = self.draw_branch(rng);
        let bits = self.release(branch, &b.tilde_o, rng);
        let d = self.layout.d;
        Ok(match branch {
            MixedBranch::Response { i } => 2 * i + bits[0] as usize,
            MixedBranch::Block { i, j } => {
                let p = i * (d - 1) + if j > i { j - 1 } else { j };
                2 * d + 8 * p + crate::channels::bits_to_index(&bits)
            }
        })
    }

    fn audit_matrix(&self, fm: &FeatureMap, budget: u128) -> Result<DMatrix<f64>> {
        let k = self.observation_count(fm)? as u128;
        let dim = self.layout.dim();
        let terms = k * (1u128 << dim.min(120)) * fm.outcomes() as u128;
        if dim >= 32 || terms > budget {
            return Err(Error::TooLarge { terms, budget });
        }
        Ok(self.release_matrix() * binarization_matrix(fm, 1.0, budget)?)
    }
}
