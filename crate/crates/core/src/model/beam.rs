//! Length-controlled beam search over any incremental scorer.

use std::cmp::Ordering;

use crate::config::KvText;
use crate::error::{Error, Result};
use crate::tensor::Real;

use super::{DecoderCache, Seq2SeqModel};

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub lenpen: f64,
    pub max_len_a: f64,
    pub max_len_b: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 5,
            lenpen: 1.0,
            max_len_a: 1.1,
            max_len_b: 7,
        }
    }
}

impl BeamConfig {
    const KEYS: [&'static str; 4] = ["beam_size", "lenpen", "max_len_a", "max_len_b"];

    pub fn greedy() -> Self {
        BeamConfig {
            beam_size: 1,
            ..BeamConfig::default()
        }
    }

    /// Generation cap `⌊a·I_src⌋ + b`.
    pub fn cap(&self, src_len: usize) -> usize {
        (self.max_len_a * src_len as f64).floor() as usize + self.max_len_b
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("beam_size", self.beam_size);
        kv.set("lenpen", self.lenpen);
        kv.set("max_len_a", self.max_len_a);
        kv.set("max_len_b", self.max_len_b);
        kv
    }

    pub fn from_kv(kv: &KvText) -> Result<Self> {
        kv.ensure_known("decode", &Self::KEYS)?;
        let mut c = BeamConfig::default();
        kv.take("beam_size", &mut c.beam_size)?;
        kv.take("lenpen", &mut c.lenpen)?;
        kv.take("max_len_a", &mut c.max_len_a)?;
        kv.take("max_len_b", &mut c.max_len_b)?;
        Ok(c)
    }
}

/// Anything that can extend a prefix one token at a time.
pub trait StepScorer {
    type State: Clone;

    fn start(&self, src: &[usize]) -> Result<Self::State>;

    /// Consumes `token` and returns log-probabilities over the vocabulary
    /// for the next position.
    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;

    /// Hard bound on the number of tokens fed to `step`.
    fn max_steps(&self) -> usize {
        usize::MAX
    }
}

impl<T: Real> StepScorer for Seq2SeqModel<T> {
    type State = DecoderCache<T>;

    fn start(&self, src: &[usize]) -> Result<DecoderCache<T>> {
        self.start_decoding(src)
    }

    fn step(&self, state: &mut DecoderCache<T>, token: usize) -> Result<Vec<f64>> {
        Ok(self.decode_step(state, token)?.into_iter().map(Real::as_f64).collect())
    }

    fn max_steps(&self) -> usize {
        self.config().max_len
    }
}

/// A finished output: generated tokens (start token excluded, end token
/// included when emitted), its total log-probability and its
/// length-normalized score.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub score: f64,
}

impl Hypothesis {
    fn new(tokens: Vec<usize>, log_prob: f64, lenpen: f64) -> Self {
        let len = tokens.len().max(1) as f64;
        Hypothesis {
            score: log_prob / len.powf(lenpen),
            tokens,
            log_prob,
        }
    }
}

struct Live<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
}

/// Beam search from `sos` until `beam_size` hypotheses have emitted `eos`
/// or the length cap is hit; hypotheses alive at the cap are finalized
/// as they stand. Exact score ties go to the lower token id.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    src: &[usize],
    cfg: &BeamConfig,
    sos: usize,
    eos: usize,
) -> Result<Hypothesis> {
    if cfg.beam_size == 0 {
        return Err(Error::Config("beam_size must be at least 1".into()));
    }
    let k = cfg.beam_size;
    let cap = cfg.cap(src.len()).min(scorer.max_steps());
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: scorer.start(src)?,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..cap {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, h) in live.iter_mut().enumerate() {
            let last = h.tokens.last().copied().unwrap_or(sos);
            let lp = scorer.step(&mut h.state, last)?;
            for (v, &p) in lp.iter().enumerate() {
                if p.is_finite() {
                    cands.push((h.log_prob + p, i, v));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.2.cmp(&b.2))
                .then(a.1.cmp(&b.1))
        });
        let last_step = step + 1 == cap;
        let mut next = Vec::with_capacity(k);
        let mut kept = 0;
        for (rank, &(lp, i, v)) in cands.iter().enumerate() {
            if kept == k || rank >= 2 * k {
                break;
            }
            let mut tokens = live[i].tokens.clone();
            tokens.push(v);
            if v == eos {
                if rank < k {
                    finished.push(Hypothesis::new(tokens, lp, cfg.lenpen));
                }
                continue;
            }
            kept += 1;
            if last_step {
                finished.push(Hypothesis::new(tokens, lp, cfg.lenpen));
            } else {
                next.push(Live {
                    tokens,
                    log_prob: lp,
                    state: live[i].state.clone(),
                });
            }
        }
        if finished.len() >= k || last_step {
            break;
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    finished
        .into_iter()
        .reduce(|best, h| {
            if h.score > best.score || (h.score == best.score && h.tokens < best.tokens) {
                h
            } else {
                best
            }
        })
        .ok_or(Error::Empty("beam search produced no hypothesis"))
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy_decode<S: StepScorer>(scorer: &S, src: &[usize], cfg: &BeamConfig, sos: usize, eos: usize) -> Result<Vec<usize>> {
    let cap = cfg.cap(src.len()).min(scorer.max_steps());
    let mut state = scorer.start(src)?;
    let mut out = Vec::new();
    let mut last = sos;
    while out.len() < cap {
        let lp = scorer.step(&mut state, last)?;
        let mut best = 0;
        for (v, &p) in lp.iter().enumerate() {
            if p > lp[best] {
                best = v;
            }
        }
        out.push(best);
        if best == eos {
            break;
        }
        last = best;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed next-token distributions keyed by prefix length and last token.
    struct Toy {
        table: Vec<Vec<Vec<f64>>>,
    }

    impl StepScorer for Toy {
        type State = usize;

        fn start(&self, _src: &[usize]) -> Result<usize> {
            Ok(0)
        }

        fn step(&self, state: &mut usize, token: usize) -> Result<Vec<f64>> {
            let row = &self.table[(*state).min(self.table.len() - 1)][token];
            *state += 1;
            Ok(row.iter().map(|p| p.ln()).collect())
        }
    }

    // vocabulary: 0 = eos, 1 = a, 2 = b, 3 = sos
    fn toy() -> Toy {
        let first = vec![0.0, 0.0, 0.0, 0.0];
        let s0 = vec![first.clone(), first.clone(), first.clone(), vec![0.3, 0.4, 0.3, 0.0]];
        let s1 = vec![first, vec![0.9, 0.05, 0.05, 0.0], vec![0.1, 0.5, 0.4, 0.0], vec![0.0; 4]];
        Toy { table: vec![s0, s1] }
    }

    fn enumerate(t: &Toy, lenpen: f64, cap: usize) -> Hypothesis {
        let mut all = Vec::new();
        let mut frontier = vec![(vec![], 0.0, 3usize)];
        for step in 0..cap {
            let mut next = Vec::new();
            for (toks, lp, last) in frontier {
                let row = &t.table[step][last];
                for (v, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let mut tk: Vec<usize> = toks.clone();
                    tk.push(v);
                    let l = lp + p.ln();
                    if v == 0 || step + 1 == cap {
                        all.push(Hypothesis::new(tk, l, lenpen));
                    } else {
                        next.push((tk, l, v));
                    }
                }
            }
            frontier = next;
        }
        all.into_iter()
            .reduce(|a, b| if b.score > a.score { b } else { a })
            .unwrap()
    }

    #[test]
    fn wide_beam_matches_exhaustive_enumeration() {
        let t = toy();
        let cfg = BeamConfig {
            beam_size: 8,
            lenpen: 1.0,
            max_len_a: 0.0,
            max_len_b: 2,
        };
        let got = beam_search(&t, &[5], &cfg, 3, 0).unwrap();
        let want = enumerate(&t, 1.0, 2);
        assert_eq!(got.tokens, want.tokens);
        // "a eos": (ln 0.4 + ln 0.9) / 2
        assert_eq!(got.tokens, vec![1, 0]);
        assert!((got.score - (0.4f64.ln() + 0.9f64.ln()) / 2.0).abs() < 1e-12);
        let want0 = enumerate(&t, 0.0, 2);
        let got0 = beam_search(&t, &[5], &BeamConfig { lenpen: 0.0, ..cfg }, 3, 0).unwrap();
        assert_eq!(got0.tokens, want0.tokens);
    }

    #[test]
    fn beam_one_is_greedy() {
        let t = toy();
        let cfg = BeamConfig {
            beam_size: 1,
            lenpen: 1.0,
            max_len_a: 0.0,
            max_len_b: 2,
        };
        let b = beam_search(&t, &[5], &cfg, 3, 0).unwrap();
        assert_eq!(b.tokens, greedy_decode(&t, &[5], &cfg, 3, 0).unwrap());
    }

    #[test]
    fn cap_formula() {
        let cfg = BeamConfig::default();
        assert_eq!(cfg.cap(10), 18);
        assert_eq!(cfg.cap(0), 7);
        assert!(beam_search(&toy(), &[1], &BeamConfig { beam_size: 0, ..cfg }, 3, 0).is_err());
    }
}
