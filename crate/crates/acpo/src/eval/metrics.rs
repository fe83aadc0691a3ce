//! Scoring primitives: confusion-matrix metrics and caption metrics.
//!
//! The caption metrics operate on token-id sequences. `cider_d` is the
//! consensus TF-IDF n-gram cosine with count clipping and a Gaussian length
//! penalty, scaled to [0, 10]. `meteor_lite` is an exact-match unigram
//! variant of the alignment metric: the synthetic vocabulary has no
//! morphology, so stemming and synonymy stages would be dead code.

use crate::tokens::TokenId;
use std::collections::BTreeMap;

/// Binary yes/no outcome counts. YES is the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

/// Derived rates; any 0/0 is reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct QaMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Accuracy on yes-instances (equals recall).
    pub pa: f64,
    /// Accuracy on no-instances.
    pub hr: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn record(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.true_pos += 1,
            (false, true) => self.false_pos += 1,
            (true, false) => self.false_neg += 1,
            (false, false) => self.true_neg += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn metrics(&self) -> QaMetrics {
        let precision = ratio(self.true_pos, self.true_pos + self.false_pos);
        let recall = ratio(self.true_pos, self.true_pos + self.false_neg);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        QaMetrics {
            precision,
            recall,
            f1,
            accuracy: ratio(self.true_pos + self.true_neg, self.total()),
            pa: recall,
            hr: ratio(self.true_neg, self.true_neg + self.false_pos),
        }
    }
}

const MAX_NGRAM: usize = 4;
const LENGTH_PENALTY_SIGMA: f64 = 6.0;

// Ordered map so every reduction runs in a fixed order and scores are
// bitwise reproducible.
type NgramCounts = BTreeMap<Vec<TokenId>, f64>;

fn ngram_counts(tokens: &[TokenId], n: usize) -> NgramCounts {
    let mut counts = NgramCounts::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// CIDEr-D over n-grams of order 1..=4 with a single reference per
/// candidate. `corpus_refs` supply the document frequencies; a gram absent
/// from the corpus gets the maximum idf, matching the reference scorer.
pub fn cider_d(
    candidates: &[Vec<TokenId>],
    references: &[Vec<TokenId>],
    corpus_refs: &[Vec<TokenId>],
) -> f64 {
    assert_eq!(
        candidates.len(),
        references.len(),
        "candidates and references must align by index"
    );
    if candidates.is_empty() {
        return 0.0;
    }
    let n_docs = corpus_refs.len().max(1) as f64;
    let mut doc_freq: Vec<NgramCounts> = vec![NgramCounts::new(); MAX_NGRAM];
    for doc in corpus_refs {
        for (n, df) in doc_freq.iter_mut().enumerate() {
            for gram in ngram_counts(doc, n + 1).into_keys() {
                *df.entry(gram).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf = |n: usize, gram: &Vec<TokenId>| -> f64 {
        let df = doc_freq[n].get(gram).copied().unwrap_or(0.0).max(1.0);
        n_docs.ln() - df.ln()
    };

    let mut total = 0.0;
    for (cand, reference) in candidates.iter().zip(references) {
        let mut item = 0.0;
        for n in 0..MAX_NGRAM {
            let cand_tf = ngram_counts(cand, n + 1);
            let ref_tf = ngram_counts(reference, n + 1);
            let cand_vec: NgramCounts = cand_tf
                .iter()
                .map(|(g, &tf)| (g.clone(), tf * idf(n, g)))
                .collect();
            let ref_vec: NgramCounts = ref_tf
                .iter()
                .map(|(g, &tf)| (g.clone(), tf * idf(n, g)))
                .collect();
            let cand_norm: f64 = cand_vec.values().map(|v| v * v).sum::<f64>().sqrt();
            let ref_norm: f64 = ref_vec.values().map(|v| v * v).sum::<f64>().sqrt();
            if cand_norm == 0.0 || ref_norm == 0.0 {
                continue;
            }
            // Candidate counts clipped to the reference counts.
            let mut dot = 0.0;
            for (gram, &cv) in &cand_vec {
                if let Some(&rv) = ref_vec.get(gram) {
                    dot += cv.min(rv) * rv;
                }
            }
            let delta = cand.len() as f64 - reference.len() as f64;
            let penalty =
                (-delta * delta / (2.0 * LENGTH_PENALTY_SIGMA * LENGTH_PENALTY_SIGMA)).exp();
            item += dot / (cand_norm * ref_norm) * penalty;
        }
        total += 10.0 * item / MAX_NGRAM as f64;
    }
    total / candidates.len() as f64
}

/// Exact-match unigram alignment score in [0, 1].
///
/// Matching is leftmost-maximal: each candidate token takes the leftmost
/// unmatched reference occurrence. F weighs recall 9:1 and a chunk-count
/// penalty discounts fragmented alignments.
pub fn meteor_lite(candidate: &[TokenId], reference: &[TokenId]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut ref_used = vec![false; reference.len()];
    // Matched reference position per candidate position.
    let mut match_of: Vec<Option<usize>> = vec![None; candidate.len()];
    for (i, tok) in candidate.iter().enumerate() {
        for (j, r) in reference.iter().enumerate() {
            if !ref_used[j] && r == tok {
                ref_used[j] = true;
                match_of[i] = Some(j);
                break;
            }
        }
    }
    let m = match_of.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let precision = m as f64 / candidate.len() as f64;
    let recall = m as f64 / reference.len() as f64;
    let f = 10.0 * precision * recall / (recall + 9.0 * precision);

    let mut chunks = 0usize;
    let mut prev: Option<(usize, usize)> = None;
    for (i, j) in match_of
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
    {
        let contiguous = matches!(prev, Some((pi, pj)) if i == pi + 1 && j == pj + 1);
        if !contiguous {
            chunks += 1;
        }
        prev = Some((i, j));
    }
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}
