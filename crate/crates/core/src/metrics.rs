//! Corpus BLEU-1..4 and mean sentence-level ROUGE-L F1.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::model::{BOS, EOS, PAD};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
}

/// Score record written by `evaluate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub bp: f64,
    pub n: usize,
}

impl CorpusScore {
    pub fn bleu(&self) -> [f64; 4] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bleu {
    /// `scores[n - 1]` is BLEU-n.
    pub scores: Vec<f64>,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn check<T>(hyps: &[T], refs: &[T]) -> Result<(), MetricError> {
    if hyps.len() != refs.len() {
        return Err(MetricError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU with one reference per hypothesis: clipped n-gram counts are
/// pooled over the corpus, BLEU-n is the brevity penalty times the geometric
/// mean of precisions 1..n. `smooth` adds one to numerator and denominator
/// for orders above 1 (diagnostics only).
pub fn bleu<T: Eq + Hash>(
    hyps: &[Vec<T>],
    refs: &[Vec<T>],
    max_n: usize,
    smooth: bool,
) -> Result<Bleu, MetricError> {
    check(hyps, refs)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp()
    };
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            let (m, t) = if smooth && i > 0 {
                (matched[i] + 1, total[i] + 1)
            } else {
                (matched[i], total[i])
            };
            if t == 0 {
                0.0
            } else {
                m as f64 / t as f64
            }
        })
        .collect();
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    for (i, &p) in precisions.iter().enumerate() {
        log_sum += p.ln();
        let geo = (log_sum / (i + 1) as f64).exp();
        scores.push(if geo.is_finite() { brevity_penalty * geo } else { 0.0 });
    }
    Ok(Bleu {
        scores,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_sentence<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    let l = lcs_len(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean sentence-level ROUGE-L F1.
pub fn rouge_l<T: Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64, MetricError> {
    check(hyps, refs)?;
    let sum: f64 = hyps.iter().zip(refs).map(|(h, r)| rouge_l_sentence(h, r)).sum();
    Ok(sum / hyps.len() as f64)
}

/// Drops padding and sentence markers.
pub fn strip_special(tokens: &[usize]) -> Vec<usize> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != PAD && t != BOS && t != EOS)
        .collect()
}

/// BLEU-1..4 and ROUGE-L over token-id sentences, after stripping special ids.
pub fn score_corpus(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<CorpusScore, MetricError> {
    let hyps: Vec<Vec<usize>> = hyps.iter().map(|h| strip_special(h)).collect();
    let refs: Vec<Vec<usize>> = refs.iter().map(|r| strip_special(r)).collect();
    let b = bleu(&hyps, &refs, 4, false)?;
    Ok(CorpusScore {
        bleu1: b.scores[0],
        bleu2: b.scores[1],
        bleu3: b.scores[2],
        bleu4: b.scores[3],
        rouge_l: rouge_l(&hyps, &refs)?,
        bp: b.brevity_penalty,
        n: hyps.len(),
    })
}

/// Fraction of position-aligned matches between decoded and reference
/// sentences, over `sum max(|hyp|, |ref|)`. Missing or extra tokens count as
/// errors. Special ids are stripped first.
pub fn token_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64, MetricError> {
    check(hyps, refs)?;
    let (mut hits, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (strip_special(h), strip_special(r));
        hits += h.iter().zip(&r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}

/// Teacher-forced accuracy: matches between the row-wise argmax of
/// `[rows, V]` logits and `gold`, over non-PAD rows. Returns `(hits, rows)`.
pub fn argmax_hits<F: crate::Float>(logits: &crate::Tensor<F>, gold: &[usize]) -> (usize, usize) {
    let mut hits = 0;
    let mut n = 0;
    for (r, &g) in gold.iter().enumerate() {
        if g == PAD {
            continue;
        }
        n += 1;
        let row = logits.row(r);
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        hits += usize::from(best == g);
    }
    (hits, n)
}
