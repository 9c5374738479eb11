//! Toy parallel corpora with known translations.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::corpus::RawDocument;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    /// Target equals source.
    Copy,
    /// Each sentence reversed word by word.
    Reverse,
    /// Word `wI` becomes `tJ` under a fixed random bijection.
    Map,
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthTask::Copy => "copy",
            SynthTask::Reverse => "reverse",
            SynthTask::Map => "map",
        })
    }
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SynthTask::Copy),
            "reverse" => Ok(SynthTask::Reverse),
            "map" => Ok(SynthTask::Map),
            _ => Err(Error::Config(format!("unknown synthetic task `{s}` (copy, reverse, map)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub task: SynthTask,
    pub docs: usize,
    pub words: usize,
    pub sent_len: (usize, usize),
    pub doc_sents: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            task: SynthTask::Map,
            docs: 200,
            words: 24,
            sent_len: (4, 12),
            doc_sents: (2, 12),
            seed: 1,
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<RawDocument>> {
    let (lo, hi) = cfg.sent_len;
    let (dlo, dhi) = cfg.doc_sents;
    if cfg.words == 0 || lo == 0 || lo > hi || dlo == 0 || dlo > dhi {
        return Err(Error::Config("synthetic corpus needs words >= 1 and non-empty ranges".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mapping: Vec<usize> = (0..cfg.words).collect();
    mapping.shuffle(&mut rng);
    let mut docs = Vec::with_capacity(cfg.docs);
    for _ in 0..cfg.docs {
        let n = rng.random_range(dlo..=dhi);
        let mut src = Vec::with_capacity(n);
        let mut tgt = Vec::with_capacity(n);
        for _ in 0..n {
            let len = rng.random_range(lo..=hi);
            let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.words)).collect();
            let s: Vec<String> = ids.iter().map(|i| format!("w{i}")).collect();
            let t: Vec<String> = match cfg.task {
                SynthTask::Copy => s.clone(),
                SynthTask::Reverse => s.iter().rev().cloned().collect(),
                SynthTask::Map => ids.iter().map(|&i| format!("t{}", mapping[i])).collect(),
            };
            src.push(s.join(" "));
            tgt.push(t.join(" "));
        }
        docs.push(RawDocument { src, tgt: Some(tgt) });
    }
    Ok(docs)
}
