//! Corpus BLEU with `multi-bleu.perl` semantics, and token accuracy.
//!
//! BLEU pools clipped n-gram matches over the whole corpus for n = 1..4
//! against a single case-sensitive reference. An order with no candidate
//! n-grams at all (every hypothesis shorter than n) has precision 0, which
//! makes the score 0, as the perl script does.

use std::collections::HashMap;
use std::fmt;

use crate::corpus::WordId;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BleuScore {
    /// Modified n-gram precisions as fractions in `[0, 1]`.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    /// In `[0, 100]`.
    pub score: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|p| 100.0 * p);
        write!(
            f,
            "BLEU = {:.2} ({:.1}/{:.1}/{:.1}/{:.1}, BP={:.3})",
            self.score, p[0], p[1], p[2], p[3], self.brevity_penalty
        )
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    counts
}

pub fn bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch { left: hypotheses.len(), right: references.len() });
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut correct = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                correct[n - 1] += count.min(ref_counts.get(&gram).copied().unwrap_or(0));
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    let precisions: [f64; MAX_ORDER] =
        std::array::from_fn(|i| if total[i] == 0 { 0.0 } else { correct[i] as f64 / total[i] as f64 });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().all(|&p| p > 0.0) {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
    } else {
        0.0
    };
    Ok(BleuScore { precisions, brevity_penalty, score, hyp_len, ref_len })
}

/// Position-wise matches over the longer of each pair, averaged over pairs.
pub fn token_accuracy(hypotheses: &[Vec<WordId>], references: &[Vec<WordId>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch { left: hypotheses.len(), right: references.len() });
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sum: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| {
            let positions = h.len().max(r.len());
            if positions == 0 {
                1.0
            } else {
                h.iter().zip(r).filter(|(a, b)| a == b).count() as f64 / positions as f64
            }
        })
        .sum();
    Ok(sum / hypotheses.len() as f64)
}
