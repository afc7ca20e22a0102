use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, RegionAnnotation, SequenceExample};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct TokenRow {
    seq_id: usize,
    position: usize,
    token: usize,
    label: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    seq_id: usize,
    start: usize,
    end: usize,
    tag: usize,
    count: usize,
}

/// One row per token: `seq_id,position,token,label` (0-based positions,
/// empty label when unknown).
pub fn write_corpus_csv(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, s) in corpus.sequences.iter().enumerate() {
        for (j, &t) in s.tokens.iter().enumerate() {
            w.serialize(TokenRow {
                seq_id: i,
                position: j,
                token: t,
                label: s.labels.as_ref().map(|l| l[j]),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus_csv`]. Sequence ids must be
/// `0..n` and positions within each sequence `0..L`. Vocabulary and tag-set
/// sizes default to one past the largest index seen.
pub fn read_corpus_csv(path: &Path, vocab_size: Option<usize>, num_labels: Option<usize>) -> Result<Corpus> {
    let mut r = csv::Reader::from_path(path)?;
    let mut seqs: BTreeMap<usize, Vec<TokenRow>> = BTreeMap::new();
    for row in r.deserialize() {
        let row: TokenRow = row?;
        seqs.entry(row.seq_id).or_default().push(row);
    }
    let mut sequences = Vec::with_capacity(seqs.len());
    let (mut max_tok, mut max_lab) = (0, 0);
    for (expect, (id, mut rows)) in seqs.into_iter().enumerate() {
        if id != expect {
            return Err(Error::Format(format!("sequence ids must be contiguous; missing {expect}")));
        }
        rows.sort_by_key(|r| r.position);
        if rows.iter().enumerate().any(|(j, r)| r.position != j) {
            return Err(Error::Format(format!("sequence {id} has gaps or duplicate positions")));
        }
        let all_labelled = rows.iter().all(|r| r.label.is_some());
        if !all_labelled && rows.iter().any(|r| r.label.is_some()) {
            return Err(Error::Format(format!("sequence {id} is partially labelled")));
        }
        for r in &rows {
            max_tok = max_tok.max(r.token);
            max_lab = max_lab.max(r.label.unwrap_or(0));
        }
        sequences.push(SequenceExample {
            tokens: rows.iter().map(|r| r.token).collect(),
            labels: all_labelled.then(|| rows.iter().map(|r| r.label.expect("checked")).collect()),
        });
    }
    let corpus = Corpus {
        vocab_size: vocab_size.unwrap_or(max_tok + 1),
        num_labels: num_labels.unwrap_or(max_lab + 1),
        words: vec![],
        sequences,
        w_star: None,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// One row per annotated tag: `seq_id,start,end,tag,count`.
pub fn write_annotations_csv(annotations: &[RegionAnnotation], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for a in annotations {
        for &(tag, count) in &a.counts {
            w.serialize(AnnotationRow {
                seq_id: a.seq_id,
                start: a.start,
                end: a.end,
                tag,
                count,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Consecutive rows sharing `(seq_id, start, end)` form one annotation.
pub fn read_annotations_csv(path: &Path) -> Result<Vec<RegionAnnotation>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<RegionAnnotation> = Vec::new();
    for row in r.deserialize() {
        let row: AnnotationRow = row?;
        if row.end < row.start {
            return Err(Error::Format(format!("region end {} before start {}", row.end, row.start)));
        }
        match out.last_mut() {
            Some(a)
                if a.seq_id == row.seq_id
                    && a.start == row.start
                    && a.end == row.end
                    && a.counts.last().is_some_and(|&(t, _)| t < row.tag) =>
            {
                a.counts.push((row.tag, row.count));
            }
            _ => out.push(RegionAnnotation {
                seq_id: row.seq_id,
                start: row.start,
                end: row.end,
                counts: vec![(row.tag, row.count)],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regioncount::{generate_corpus, sample_annotations, AnnotationConfig, GeneratorConfig};

    #[test]
    fn corpus_and_annotations_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(
            &GeneratorConfig {
                num_sequences: 20,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        let path = dir.path().join("corpus.csv");
        write_corpus_csv(&corpus, &path).unwrap();
        let back = read_corpus_csv(&path, Some(corpus.vocab_size), Some(corpus.num_labels)).unwrap();
        assert_eq!(back.sequences, corpus.sequences);

        let anns = sample_annotations(
            &corpus,
            &AnnotationConfig {
                tag_subset_size: 2,
                num_annotations: 40,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        let path = dir.path().join("ann.csv");
        write_annotations_csv(&anns, &path).unwrap();
        assert_eq!(read_annotations_csv(&path).unwrap(), anns);
    }
}
