//! Learning a per-position tagger from region count annotations: an annotator
//! reports, for a window of a sequence and a few tags, how many positions in
//! the window carry each tag.

mod em;
mod generator;
mod io;

pub use em::{exact_marginal_em_baseline, RegionEmFit, RegionEmOptions};
pub use generator::{generate_corpus, generate_corpus_range, GeneratorConfig};
pub use io::{read_annotations_csv, read_corpus_csv, write_annotations_csv, write_corpus_csv};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{factorized_fit, FactorizedFitOptions, FactorizedModel, MomentVector, Params};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceExample {
    pub tokens: Vec<usize>,
    pub labels: Option<Vec<usize>>,
}

impl SequenceExample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab_size: usize,
    pub num_labels: usize,
    /// Surface strings of the vocabulary; empty when unknown.
    pub words: Vec<String>,
    pub sequences: Vec<SequenceExample>,
    /// The generating conditional, when known.
    pub w_star: Option<DMatrix<f64>>,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::InvalidInput(format!("sequence {i} is empty")));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::InvalidInput(format!("sequence {i} has token {t} outside the vocabulary")));
            }
            if let Some(labels) = &s.labels {
                if labels.len() != s.len() {
                    return Err(Error::InvalidInput(format!("sequence {i} has mismatched label length")));
                }
                if let Some(&b) = labels.iter().find(|&&b| b >= self.num_labels) {
                    return Err(Error::InvalidInput(format!("sequence {i} has label {b} outside the tag set")));
                }
            }
        }
        Ok(())
    }

    fn labels(&self, seq: usize) -> Result<&[usize]> {
        self.sequences[seq]
            .labels
            .as_deref()
            .ok_or_else(|| Error::InvalidInput(format!("sequence {seq} has no labels")))
    }

    pub fn positions(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }
}

/// Counts of selected tags inside the window `start..=end` (0-based) of one
/// sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionAnnotation {
    pub seq_id: usize,
    pub start: usize,
    pub end: usize,
    /// `(tag, count)` pairs sorted by tag; the tags form the set `B`.
    pub counts: Vec<(usize, usize)>,
}

impl RegionAnnotation {
    pub fn window(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn tags(&self) -> impl Iterator<Item = usize> + '_ {
        self.counts.iter().map(|&(b, _)| b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub window: usize,
    pub tag_subset_size: usize,
    pub num_annotations: usize,
    /// Draw starts from `0..L−w` (the last window is never chosen) instead of
    /// `0..=L−w`.
    pub strict_start: bool,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            window: 3,
            tag_subset_size: 1,
            num_annotations: 1000,
            strict_start: false,
        }
    }
}

/// Draws one annotation of sequence `seq_id`: a uniform window of length
/// `window`, a uniform tag subset of size `tag_subset_size`, and the exact
/// counts of those tags inside the window.
pub fn sample_annotation<R: Rng + ?Sized>(
    seq_id: usize,
    x: &SequenceExample,
    num_labels: usize,
    window: usize,
    tag_subset_size: usize,
    strict_start: bool,
    rng: &mut R,
) -> Result<RegionAnnotation> {
    let labels = x
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("sequence {seq_id} has no labels")))?;
    let len = x.len();
    if window == 0 || len <= window {
        return Err(Error::SequenceTooShort { length: len, window });
    }
    if tag_subset_size == 0 || tag_subset_size > num_labels {
        return Err(Error::InvalidInput(format!(
            "tag subset size {tag_subset_size} must lie in 1..={num_labels}"
        )));
    }
    let last = if strict_start { len - window - 1 } else { len - window };
    let start = rng.random_range(0..=last);
    let end = start + window - 1;
    let mut tags: Vec<usize> = index::sample(rng, num_labels, tag_subset_size).into_vec();
    tags.sort_unstable();
    let counts = tags
        .into_iter()
        .map(|b| (b, labels[start..=end].iter().filter(|&&y| y == b).count()))
        .collect();
    Ok(RegionAnnotation {
        seq_id,
        start,
        end,
        counts,
    })
}

/// `cfg.num_annotations` annotations, each on a sequence drawn uniformly from
/// those longer than the window. Annotation `i` uses the stream `(seed, 2, i)`.
pub fn sample_annotations(corpus: &Corpus, cfg: &AnnotationConfig, seed: u64) -> Result<Vec<RegionAnnotation>> {
    let eligible: Vec<usize> = (0..corpus.sequences.len())
        .filter(|&i| corpus.sequences[i].len() > cfg.window)
        .collect();
    if eligible.is_empty() {
        let longest = corpus.sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        return Err(Error::SequenceTooShort {
            length: longest,
            window: cfg.window,
        });
    }
    (0..cfg.num_annotations)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, &[2, i as u64]);
            let seq = eligible[rng.random_range(0..eligible.len())];
            sample_annotation(
                seq,
                &corpus.sequences[seq],
                corpus.num_labels,
                cfg.window,
                cfg.tag_subset_size,
                cfg.strict_start,
                &mut rng,
            )
        })
        .collect()
}

/// Least-squares estimate of `w*(a, b) = P[y[j] = b | x[j] = a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalConditional {
    /// `V × K`, unconstrained.
    pub w: DMatrix<f64>,
    /// `covered[(a, b)]`: word `a` occurs in some region annotated for tag `b`.
    pub covered: DMatrix<bool>,
    /// Sum of squared residuals of the regression.
    pub residual: f64,
}

impl LocalConditional {
    /// Words covered for every tag.
    pub fn covered_words(&self) -> Vec<bool> {
        self.covered.row_iter().map(|r| r.iter().all(|&c| c)).collect()
    }

    /// Euclidean projection of each row onto the probability simplex.
    pub fn projected_to_simplex(&self) -> Self {
        let mut w = self.w.clone();
        for mut row in w.row_iter_mut() {
            let v: Vec<f64> = row.iter().copied().collect();
            for (dst, p) in row.iter_mut().zip(project_simplex(&v)) {
                *dst = p;
            }
        }
        Self {
            w,
            covered: self.covered.clone(),
            residual: self.residual,
        }
    }
}

fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

/// Ridge used for rank safety in the regression.
const LS_RIDGE: f64 = 1e-8;
/// Iterated-ridge refinements; each one shrinks the ridge bias by a factor of
/// about `λ / σ` on every direction, converging to the minimum-norm solution.
const LS_REFINEMENTS: usize = 3;

/// `argmin_w Σ_i Σ_{b∈B_i} (Σ_{j∈r_i} w(x_i[j], b) − N_i[b])²`.
///
/// The problem separates over tags; each tag's `V` unknowns are solved from
/// their normal equations. Words never seen for a tag get 0.
pub fn ls_recover_w(annotations: &[RegionAnnotation], corpus: &Corpus) -> Result<LocalConditional> {
    solve_regions(annotations, corpus, |_, _, n| n as f64)
}

/// [`ls_recover_w`] with every count replaced by its expectation
/// `Σ_{j∈r} w(x[j], b)` under `w` (population-exact counts).
pub fn ls_recover_w_expected(
    annotations: &[RegionAnnotation],
    corpus: &Corpus,
    w: &DMatrix<f64>,
) -> Result<LocalConditional> {
    if w.shape() != (corpus.vocab_size, corpus.num_labels) {
        return Err(Error::InvalidInput("w does not match the corpus vocabulary and tag set".into()));
    }
    solve_regions(annotations, corpus, |tokens, b, _| tokens.iter().map(|&a| w[(a, b)]).sum())
}

type RegressionRow = (usize, Vec<(usize, f64)>, f64);

fn solve_regions(
    annotations: &[RegionAnnotation],
    corpus: &Corpus,
    target: impl Fn(&[usize], usize, usize) -> f64,
) -> Result<LocalConditional> {
    if annotations.is_empty() {
        return Err(Error::NoData("no annotations".into()));
    }
    let (v, k) = (corpus.vocab_size, corpus.num_labels);
    let mut normal: Vec<DMatrix<f64>> = vec![DMatrix::zeros(v, v); k];
    let mut rhs: Vec<DVector<f64>> = vec![DVector::zeros(v); k];
    let mut covered = DMatrix::from_element(v, k, false);
    // (tag, word counts in the region, target count)
    let mut rows: Vec<RegressionRow> = Vec::new();
    for ann in annotations {
        let seq = corpus
            .sequences
            .get(ann.seq_id)
            .ok_or_else(|| Error::InvalidInput(format!("annotation refers to missing sequence {}", ann.seq_id)))?;
        if ann.end >= seq.len() || ann.start > ann.end {
            return Err(Error::InvalidInput(format!(
                "region {}..={} outside sequence {} of length {}",
                ann.start,
                ann.end,
                ann.seq_id,
                seq.len()
            )));
        }
        let mut word_counts: BTreeMap<usize, f64> = BTreeMap::new();
        for &a in &seq.tokens[ann.start..=ann.end] {
            *word_counts.entry(a).or_default() += 1.0;
        }
        let c: Vec<(usize, f64)> = word_counts.into_iter().collect();
        for &(b, count) in &ann.counts {
            if b >= k {
                return Err(Error::InvalidInput(format!("tag {b} outside the tag set")));
            }
            let n = target(&seq.tokens[ann.start..=ann.end], b, count);
            for &(a1, c1) in &c {
                covered[(a1, b)] = true;
                rhs[b][a1] += c1 * n;
                for &(a2, c2) in &c {
                    normal[b][(a1, a2)] += c1 * c2;
                }
            }
            rows.push((b, c.clone(), n));
        }
    }
    let columns: Vec<DVector<f64>> = (0..k)
        .into_par_iter()
        .map(|b| min_norm_solve(&normal[b], &rhs[b]))
        .collect::<Result<_>>()?;
    let mut w = DMatrix::zeros(v, k);
    for (b, col) in columns.iter().enumerate() {
        w.set_column(b, col);
    }
    let residual = rows
        .iter()
        .map(|(b, c, n)| {
            let pred: f64 = c.iter().map(|&(a, cnt)| cnt * w[(a, *b)]).sum();
            (pred - n).powi(2)
        })
        .sum();
    Ok(LocalConditional { w, covered, residual })
}

fn min_norm_solve(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    let reg = a + DMatrix::identity(n, n) * LS_RIDGE;
    let chol = reg
        .cholesky()
        .ok_or(Error::Singular { condition: f64::INFINITY })?;
    let mut x = chol.solve(rhs);
    for _ in 0..LS_REFINEMENTS {
        x = chol.solve(&(rhs + &x * LS_RIDGE));
    }
    Ok(x)
}

/// `(1/n) Σ_seq Σ_j Σ_b w(x[j], b) f(x[j], b)`, restricted to positions whose
/// word passes `mask` (all positions when `None`).
pub fn mu_from_w(
    w: &DMatrix<f64>,
    sequences: &[SequenceExample],
    model: &FactorizedModel,
    mask: Option<&[bool]>,
) -> Result<MomentVector> {
    if sequences.is_empty() {
        return Err(Error::NoData("no sequences".into()));
    }
    if w.shape() != (model.vocab_size(), model.num_labels()) {
        return Err(Error::InvalidInput("w does not match the model's vocabulary and tag set".into()));
    }
    let counts = position_counts(sequences, model.vocab_size(), mask);
    let mut mu = DVector::zeros(model.dim());
    for (a, &c) in counts.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        for b in 0..model.num_labels() {
            model.accumulate(&mut mu, a, b, c * w[(a, b)]);
        }
    }
    Ok(MomentVector::new(mu, sequences.len()))
}

/// Average number of positions per sequence holding each word.
pub fn position_counts(sequences: &[SequenceExample], vocab_size: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut counts = vec![0.0; vocab_size];
    for s in sequences {
        for &a in &s.tokens {
            if mask.is_none_or(|m| m[a]) {
                counts[a] += 1.0;
            }
        }
    }
    let n = sequences.len().max(1) as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    counts
}

/// Which word functions contribute features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub word: bool,
    pub prefix: bool,
    pub suffix: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            word: true,
            prefix: true,
            suffix: true,
        }
    }
}

/// Node features `1[g(x[j]) = a, y[j] = b]` for each enabled word function `g`
/// (identity, first letter, last letter).
pub fn build_model(corpus: &Corpus, spec: &FeatureSpec) -> Result<FactorizedModel> {
    let (v, k) = (corpus.vocab_size, corpus.num_labels);
    if (spec.prefix || spec.suffix) && corpus.words.len() != v {
        return Err(Error::InvalidInput("prefix and suffix features need word strings".into()));
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut sizes = Vec::new();
    if spec.word {
        groups.push((0..v).collect());
        sizes.push(v);
    }
    let mut add_char_group = |pick: fn(&str) -> Option<char>| {
        let mut ids: BTreeMap<char, usize> = BTreeMap::new();
        for w in &corpus.words {
            let n = ids.len();
            ids.entry(pick(w).unwrap_or(' ')).or_insert(n);
        }
        groups.push(corpus.words.iter().map(|w| ids[&pick(w).unwrap_or(' ')]).collect());
        sizes.push(ids.len());
    };
    if spec.prefix {
        add_char_group(|w| w.chars().next());
    }
    if spec.suffix {
        add_char_group(|w| w.chars().last());
    }
    if groups.is_empty() {
        return Err(Error::InvalidInput("no features enabled".into()));
    }
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut dim = 0;
    for &s in &sizes {
        offsets.push(dim);
        dim += s * k;
    }
    let columns = (0..v * k)
        .map(|col| {
            let (a, b) = (col / k, col % k);
            groups
                .iter()
                .zip(&offsets)
                .map(|(g, &off)| (off + g[a] * k + b, 1.0))
                .collect()
        })
        .collect();
    FactorizedModel::new(v, k, dim, columns)
}

/// Fraction of labelled positions where the most probable label is correct.
pub fn accuracy(model: &FactorizedModel, theta: &Params, corpus: &Corpus) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, s) in corpus.sequences.iter().enumerate() {
        let labels = corpus.labels(i)?;
        for (&a, &y) in s.tokens.iter().zip(labels) {
            hits += (model.predict(theta, a) == y) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::NoData("no labelled positions".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Default penalty for the factorized fits. Saturated word features put
/// unseen (word, tag) pairs on the boundary of the polytope, where the
/// unpenalized optimum does not exist.
pub const DEFAULT_L2: f64 = 1e-3;

pub fn default_fit_options() -> FactorizedFitOptions {
    FactorizedFitOptions {
        l2: DEFAULT_L2,
        ..FactorizedFitOptions::default()
    }
}

/// Fully supervised fit on the gold labels.
pub fn supervised_fit(corpus: &Corpus, model: &FactorizedModel, opts: &FactorizedFitOptions) -> Result<Params> {
    if corpus.sequences.is_empty() {
        return Err(Error::NoData("no sequences".into()));
    }
    let mut mu = DVector::zeros(model.dim());
    for (i, s) in corpus.sequences.iter().enumerate() {
        for (&a, &b) in s.tokens.iter().zip(corpus.labels(i)?) {
            model.accumulate(&mut mu, a, b, 1.0);
        }
    }
    mu /= corpus.sequences.len() as f64;
    let counts = position_counts(&corpus.sequences, model.vocab_size(), None);
    factorized_fit(model, &MomentVector::new(mu, corpus.sequences.len()), &counts, opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub fit: FactorizedFitOptions,
    /// Project rows of `ŵ` onto the simplex before assembling moments.
    pub project_simplex: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            fit: default_fit_options(),
            project_simplex: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentPipelineFit {
    pub theta: Params,
    pub w_hat: LocalConditional,
    /// Words whose positions entered the moments (covered for every tag).
    pub used_words: Vec<bool>,
}

/// Annotations → `ŵ` → `μ̂` → factorized fit.
///
/// Only positions whose word is covered for every tag enter the moments and
/// the log-partition term; elsewhere `ŵ` carries no information.
pub fn moment_pipeline(
    corpus: &Corpus,
    annotations: &[RegionAnnotation],
    model: &FactorizedModel,
    opts: &PipelineOptions,
) -> Result<MomentPipelineFit> {
    let mut w_hat = ls_recover_w(annotations, corpus)?;
    if opts.project_simplex {
        w_hat = w_hat.projected_to_simplex();
    }
    let used_words = w_hat.covered_words();
    let mu = mu_from_w(&w_hat.w, &corpus.sequences, model, Some(&used_words))?;
    let counts = position_counts(&corpus.sequences, model.vocab_size(), Some(&used_words));
    let theta = factorized_fit(model, &mu, &counts, &opts.fit)?;
    Ok(MomentPipelineFit {
        theta,
        w_hat,
        used_words,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndToEndReport {
    pub theta: Params,
    pub annotations: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Samples annotations on `train`, runs [`moment_pipeline`] and scores the
/// per-position argmax on both corpora.
pub fn end_to_end_fit(
    train: &Corpus,
    test: &Corpus,
    ann: &AnnotationConfig,
    model: &FactorizedModel,
    opts: &PipelineOptions,
    seed: u64,
) -> Result<EndToEndReport> {
    if ann.num_annotations == 0 {
        return Err(Error::NoData("zero annotations requested".into()));
    }
    let annotations = sample_annotations(train, ann, seed)?;
    let fit = moment_pipeline(train, &annotations, model, opts)?;
    Ok(EndToEndReport {
        train_accuracy: accuracy(model, &fit.theta, train)?,
        test_accuracy: accuracy(model, &fit.theta, test)?,
        theta: fit.theta,
        annotations: annotations.len(),
    })
}
