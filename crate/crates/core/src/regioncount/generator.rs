use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Corpus, SequenceExample};
use crate::error::{Error, Result};
use crate::expfam::OutcomeSampler;
use crate::rng;

const LETTERS: &[u8] = b"abcdefgh";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub num_labels: usize,
    pub num_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_exponent: f64,
    pub dirichlet_alpha: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            num_labels: 5,
            num_sequences: 1000,
            min_len: 8,
            max_len: 20,
            zipf_exponent: 1.0,
            dirichlet_alpha: 0.5,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.num_labels == 0 {
            return Err(Error::InvalidInput("vocabulary and tag set must be nonempty".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidInput(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if !(self.zipf_exponent >= 0.0) || !(self.dirichlet_alpha > 0.0) {
            return Err(Error::InvalidInput("zipf exponent and dirichlet alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Draws one Dirichlet(α, …, α) vector by normalizing Gamma(α, 1) draws.
fn dirichlet_row<R: Rng + ?Sized>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 {
            return g.into_iter().map(|v| v / total).collect();
        }
    }
}

fn synthetic_word<R: Rng + ?Sized>(rng: &mut R) -> String {
    let len = rng.random_range(3..=7);
    (0..len)
        .map(|_| LETTERS[rng.random_range(0..LETTERS.len())] as char)
        .collect()
}

/// Synthetic corpus whose labels are drawn independently per position from
/// `w*(x[j], ·)`.
///
/// Stream keys: `[0]` for `w*` and word strings, `[1, i]` for sequence `i`.
/// `offset` shifts the sequence keys so train and test corpora sharing one
/// `w*` can be drawn from the same seed.
pub fn generate_corpus(cfg: &GeneratorConfig, seed: u64) -> Result<Corpus> {
    generate_corpus_range(cfg, seed, 0)
}

pub fn generate_corpus_range(cfg: &GeneratorConfig, seed: u64, offset: usize) -> Result<Corpus> {
    cfg.validate()?;
    let (v, k) = (cfg.vocab_size, cfg.num_labels);
    let mut root = rng::stream(seed, &[0]);
    let mut w_star = DMatrix::zeros(v, k);
    for a in 0..v {
        for (b, p) in dirichlet_row(k, cfg.dirichlet_alpha, &mut root).into_iter().enumerate() {
            w_star[(a, b)] = p;
        }
    }
    let words: Vec<String> = (0..v).map(|_| synthetic_word(&mut root)).collect();

    let zipf = Zipf::new(v as f64, cfg.zipf_exponent).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let label_samplers: Vec<OutcomeSampler> = (0..v)
        .map(|a| OutcomeSampler::new(w_star.row(a).iter().copied().collect::<Vec<_>>().as_slice()))
        .collect();
    let sequences = (0..cfg.num_sequences)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, &[1, (offset + i) as u64]);
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let tokens: Vec<usize> = (0..len).map(|_| zipf.sample(&mut rng) as usize - 1).collect();
            let labels = tokens.iter().map(|&a| label_samplers[a].sample(&mut rng)).collect();
            SequenceExample {
                tokens,
                labels: Some(labels),
            }
        })
        .collect();
    Ok(Corpus {
        vocab_size: v,
        num_labels: k,
        words,
        sequences,
        w_star: Some(w_star),
    })
}
