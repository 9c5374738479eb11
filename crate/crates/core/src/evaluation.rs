//! Unsmoothed corpus BLEU-4 and its sentence- and document-level variants.

use std::collections::HashMap;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::pipeline::{Alignment, Vocab};

pub const MAX_ORDER: usize = 4;

/// Sufficient statistics for BLEU; additive over segments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngrams<T: Eq + std::hash::Hash>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_default() += 1;
        }
    }
    m
}

impl BleuStats {
    /// Clipped n-gram counts of one hypothesis against one reference.
    pub fn segment<T: Eq + std::hash::Hash>(hyp: &[T], reference: &[T]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngrams(hyp, n);
            let r = ngrams(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    /// `100 · BP · exp(¼ Σ log p_n)`; zero when any order has no match.
    pub fn score(&self) -> f64 {
        if self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..MAX_ORDER)
            .map(|i| (self.matches[i] as f64 / self.totals[i] as f64).ln())
            .sum::<f64>()
            / MAX_ORDER as f64;
        let bp = if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        100.0 * bp * log_p.exp()
    }
}

impl Add for BleuStats {
    type Output = BleuStats;

    fn add(mut self, o: BleuStats) -> BleuStats {
        self += o;
        self
    }
}

impl AddAssign for BleuStats {
    fn add_assign(&mut self, o: BleuStats) {
        for i in 0..MAX_ORDER {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

pub fn corpus_stats<T: Eq + std::hash::Hash>(pairs: &[(Vec<T>, Vec<T>)]) -> BleuStats {
    pairs
        .iter()
        .map(|(h, r)| BleuStats::segment(h, r))
        .fold(BleuStats::default(), Add::add)
}

pub fn corpus_bleu<T: Eq + std::hash::Hash>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    Ok(corpus_stats(pairs).score())
}

fn strip(vocab: &Vocab, toks: &[usize]) -> Vec<usize> {
    toks.iter().copied().filter(|&t| !vocab.is_special(t)).collect()
}

/// Whole documents as single segments after removing every reserved token.
pub fn d_bleu(documents: &[(Vec<usize>, Vec<usize>)], vocab: &Vocab) -> Result<f64> {
    let pairs: Vec<_> = documents
        .iter()
        .map(|(h, r)| (strip(vocab, h), strip(vocab, r)))
        .collect();
    corpus_bleu(&pairs)
}

/// One segment per reference sentence; a missing hypothesis segment
/// scores as an empty string.
pub fn s_bleu(alignments: &[Alignment], references: &[Vec<Vec<usize>>], vocab: &Vocab) -> Result<f64> {
    if alignments.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} alignments but {} reference documents",
            alignments.len(),
            references.len()
        )));
    }
    let mut pairs = Vec::new();
    for (a, refs) in alignments.iter().zip(references) {
        if a.segments.len() != refs.len() {
            return Err(Error::Contract("alignment and reference sentence counts differ".into()));
        }
        for (seg, r) in a.segments.iter().zip(refs) {
            let h = seg.as_deref().map(|s| strip(vocab, s)).unwrap_or_default();
            pairs.push((h, strip(vocab, r)));
        }
    }
    corpus_bleu(&pairs)
}
