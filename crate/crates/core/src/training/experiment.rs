//! Drivers for the input-length, data-scale, ablation and probing
//! comparisons. Each writes one CSV.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionFlags;
use crate::config::{KvText, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{d_bleu, s_bleu};
use crate::model::beam::{beam_search, greedy_decode, BeamConfig};
use crate::model::Seq2SeqModel;
use crate::pipeline::{
    build_instances, coverage_stats, recover_alignment, split_subdocuments, Coverage, Document, Mode,
    TrainingInstance, Vocab, EOS, SOS,
};
use crate::probing::{extract_states, probe_absolute, ProbeConfig};

use super::{evaluate_loss, TrainSummary, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    LengthSweep,
    ScaleSweep,
    Ablation,
    ProbeCompare,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentKind::LengthSweep => "length_sweep",
            ExperimentKind::ScaleSweep => "scale_sweep",
            ExperimentKind::Ablation => "ablation",
            ExperimentKind::ProbeCompare => "probe_compare",
        })
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "length_sweep" => Ok(ExperimentKind::LengthSweep),
            "scale_sweep" => Ok(ExperimentKind::ScaleSweep),
            "ablation" => Ok(ExperimentKind::Ablation),
            "probe_compare" => Ok(ExperimentKind::ProbeCompare),
            _ => Err(Error::Config(format!(
                "unknown experiment `{s}` (length_sweep, scale_sweep, ablation, probe_compare)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub lengths: Vec<usize>,
    pub scales: Vec<f64>,
    pub ablation_length: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            lengths: vec![64, 128, 256, 384, 512],
            scales: vec![0.25, 0.5, 1.0],
            ablation_length: 384,
        }
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn split_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| Error::Config(format!("{key}: cannot parse `{s}`: {e}"))))
        .collect()
}

impl ExperimentConfig {
    const KEYS: [&'static str; 3] = ["lengths", "scales", "ablation_length"];

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("lengths", join(&self.lengths));
        kv.set("scales", join(&self.scales));
        kv.set("ablation_length", self.ablation_length);
        kv
    }

    pub fn from_kv(kv: &KvText) -> Result<Self> {
        kv.ensure_known("experiment", &Self::KEYS)?;
        let mut c = ExperimentConfig::default();
        if let Some(v) = kv.get("lengths") {
            c.lengths = split_list("experiment.lengths", v)?;
        }
        if let Some(v) = kv.get("scales") {
            c.scales = split_list("experiment.scales", v)?;
        }
        kv.take("ablation_length", &mut c.ablation_length)?;
        if c.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Config("experiment.scales must lie in (0, 1]".into()));
        }
        Ok(c)
    }
}

/// Encoded parallel documents for an experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub vocab: Vocab,
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
}

/// Rows of the component ablation: the full model, then each component
/// removed.
pub fn ablation_settings() -> Vec<(&'static str, AttentionFlags)> {
    let full = AttentionFlags::full();
    vec![
        ("full", full),
        ("-cross-attn", AttentionFlags { pos_cross: false, ..full }),
        (
            "-self-src,-self-tgt",
            AttentionFlags {
                pos_self_src: false,
                pos_self_tgt: false,
                ..full
            },
        ),
        ("-self-src", AttentionFlags { pos_self_src: false, ..full }),
        ("-self-tgt", AttentionFlags { pos_self_tgt: false, ..full }),
        ("-rel-self", AttentionFlags { rel_self: false, ..full }),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslationScores {
    pub valid_loss: f64,
    pub d_bleu: f64,
    pub s_bleu: f64,
    pub coverage: Coverage,
    /// Position-wise agreement of the decoded output with the reference,
    /// over reference tokens.
    pub token_accuracy: f64,
}

/// Splits documents at `length` tokens (both sides).
pub fn split_all(docs: &[Document], length: usize, n_sep: usize) -> Vec<Document> {
    docs.iter().flat_map(|d| split_subdocuments(d, length, n_sep)).collect()
}

fn with_length(run: &RunConfig, length: usize, flags: AttentionFlags) -> RunConfig {
    let mut r = run.clone();
    r.data.max_tokens = length;
    r.data.mode = Mode::Doc2Doc;
    r.model.max_len = r.model.max_len.max(length);
    r.model.flags = flags;
    r
}

/// Trains a Doc2Doc model on documents split at `length` and returns it
/// with the validation instances it was selected on.
pub fn train_doc2doc(
    run: &RunConfig,
    data: &ExperimentData,
    length: usize,
    flags: AttentionFlags,
) -> Result<(Seq2SeqModel<f32>, TrainSummary, Vec<TrainingInstance>)> {
    let mut r = with_length(run, length, flags);
    r.model.vocab_size = data.vocab.len();
    let train = build_instances(&data.train, Mode::Doc2Doc, &r.data)?;
    let valid = build_instances(&data.valid, Mode::Doc2Doc, &r.data)?;
    // Sentence-level pairs are mixed in unless the ratio is pinned to zero.
    let sent = if r.train.mix_sent_ratio == Some(0.0) {
        Vec::new()
    } else {
        build_instances(&data.train, Mode::Sent, &r.data)?
    };
    let mut trainer = Trainer::new(r, train, sent, valid.clone())?;
    let summary = trainer.run(None)?;
    Ok((trainer.best_model()?, summary, valid))
}

/// Decodes every validation sub-document and scores it.
pub fn evaluate_doc2doc(
    model: &Seq2SeqModel<f32>,
    docs: &[Document],
    vocab: &Vocab,
    decode: &BeamConfig,
) -> Result<TranslationScores> {
    let n_sep = vocab.n_separators();
    let instances = build_instances(docs, Mode::Doc2Doc, &Default::default())?;
    let mut hyps = Vec::with_capacity(docs.len());
    let mut pairs = Vec::with_capacity(docs.len());
    let (mut agree, mut total) = (0usize, 0usize);
    let mut aligns = Vec::new();
    let mut refs = Vec::new();
    for (doc, inst) in docs.iter().zip(&instances) {
        let hyp = if decode.beam_size == 1 {
            greedy_decode(model, &inst.src, decode, SOS, EOS)?
        } else {
            beam_search(model, &inst.src, decode, SOS, EOS)?.tokens
        };
        let reference = &inst.tgt[1..];
        agree += reference.iter().zip(&hyp).filter(|(a, b)| a == b).count();
        total += reference.len();
        aligns.push(recover_alignment(doc.len(), &hyp, n_sep));
        refs.push(doc.tgt.clone().unwrap_or_default());
        pairs.push((hyp.clone(), inst.tgt.clone()));
        hyps.push(hyp);
    }
    Ok(TranslationScores {
        valid_loss: evaluate_loss(model, &instances)?,
        d_bleu: d_bleu(&pairs, vocab)?,
        s_bleu: s_bleu(&aligns, &refs, vocab)?,
        coverage: coverage_stats(docs, &hyps, n_sep)?,
        token_accuracy: 100.0 * agree as f64 / total.max(1) as f64,
    })
}

fn write_csv(out_dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display(), e))?;
    let p = out_dir.join(name);
    std::fs::write(&p, text).map_err(|e| Error::io(p.display(), e))?;
    Ok(p)
}

fn model_label(flags: AttentionFlags) -> &'static str {
    if flags == AttentionFlags::vanilla() {
        "vanilla"
    } else if flags == AttentionFlags::full() {
        "p-transformer"
    } else {
        "custom"
    }
}

/// Runs one experiment and writes `<kind>.csv` into `out_dir`.
pub fn run_experiment(
    kind: ExperimentKind,
    run: &RunConfig,
    exp: &ExperimentConfig,
    data: &ExperimentData,
    out_dir: &Path,
) -> Result<PathBuf> {
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Empty("experiment corpus"));
    }
    let n_sep = data.vocab.n_separators();
    let sentences: usize = data.train.iter().map(Document::len).sum();
    let mut csv = String::new();
    match kind {
        ExperimentKind::LengthSweep => {
            csv.push_str("length,model,subdocuments,sentences,valid_loss,d_bleu,s_bleu,coverage,token_accuracy\n");
            for &len in &exp.lengths {
                let pieces = split_all(&data.train, len, n_sep);
                let kept: usize = pieces.iter().map(Document::len).sum();
                if kept != sentences {
                    return Err(Error::Contract(format!("splitting at {len} lost sentences")));
                }
                for flags in [AttentionFlags::vanilla(), AttentionFlags::full()] {
                    let (model, _, _) = train_doc2doc(run, data, len, flags)?;
                    let s = evaluate_doc2doc(&model, &split_all(&data.valid, len, n_sep), &data.vocab, &run.decode)?;
                    csv.push_str(&format!(
                        "{len},{},{},{kept},{:.4},{:.2},{:.2},{:.1},{:.2}\n",
                        model_label(flags),
                        pieces.len(),
                        s.valid_loss,
                        s.d_bleu,
                        s.s_bleu,
                        s.coverage.percentage(),
                        s.token_accuracy
                    ));
                }
            }
        }
        ExperimentKind::ScaleSweep => {
            csv.push_str("scale,documents,sentences,valid_loss,d_bleu,s_bleu\n");
            let mut order: Vec<usize> = (0..data.train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(run.seed));
            let len = run.data.max_tokens;
            for &scale in &exp.scales {
                let n = ((data.train.len() as f64 * scale).ceil() as usize).max(1);
                let subset = ExperimentData {
                    vocab: data.vocab.clone(),
                    train: order[..n].iter().map(|&i| data.train[i].clone()).collect(),
                    valid: data.valid.clone(),
                };
                let sents: usize = subset.train.iter().map(Document::len).sum();
                let (model, _, _) = train_doc2doc(run, &subset, len, run.model.flags)?;
                let s = evaluate_doc2doc(&model, &split_all(&data.valid, len, n_sep), &data.vocab, &run.decode)?;
                csv.push_str(&format!("{scale},{n},{sents},{:.4},{:.2},{:.2}\n", s.valid_loss, s.d_bleu, s.s_bleu));
            }
        }
        ExperimentKind::Ablation => {
            csv.push_str("model,flags,valid_loss,d_bleu,s_bleu,drop\n");
            let len = exp.ablation_length;
            let valid = split_all(&data.valid, len, n_sep);
            let mut full_bleu = None;
            for (name, flags) in ablation_settings() {
                let (model, _, _) = train_doc2doc(run, data, len, flags)?;
                let s = evaluate_doc2doc(&model, &valid, &data.vocab, &run.decode)?;
                let base = *full_bleu.get_or_insert(s.d_bleu);
                csv.push_str(&format!(
                    "\"{name}\",\"{flags}\",{:.4},{:.2},{:.2},{:.2}\n",
                    s.valid_loss,
                    s.d_bleu,
                    s.s_bleu,
                    s.d_bleu - base
                ));
            }
        }
        ExperimentKind::ProbeCompare => {
            csv.push_str("length,vanilla_accuracy,p_transformer_accuracy\n");
            for &len in &exp.lengths {
                let mut acc = Vec::new();
                for flags in [AttentionFlags::vanilla(), AttentionFlags::full()] {
                    let (model, _, valid) = train_doc2doc(run, data, len, flags)?;
                    let mut seqs: Vec<Vec<usize>> = build_instances(&data.train, Mode::Doc2Doc, &with_length(run, len, flags).data)?
                        .into_iter()
                        .map(|i| i.src)
                        .collect();
                    seqs.extend(valid.into_iter().map(|i| i.src));
                    let layer = model.config().n_enc_layers;
                    let states = extract_states(&model, &seqs, layer)?;
                    let cfg = ProbeConfig {
                        layer,
                        max_positions: len,
                        ..run.probe.clone()
                    };
                    let report = probe_absolute(&states, &cfg, run.seed)?;
                    acc.push(report.overall().and_then(|r| r.accuracy).unwrap_or(0.0));
                }
                csv.push_str(&format!("{len},{:.2},{:.2}\n", acc[0], acc[1]));
            }
        }
    }
    write_csv(out_dir, &format!("{kind}.csv"), &csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows() {
        let rows = ablation_settings();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0].1, AttentionFlags::full());
        assert!(!rows[1].1.pos_cross && rows[1].1.pos_self_src && rows[1].1.rel_self);
        let names: Vec<&str> = rows.iter().map(|r| r.0).collect();
        assert_eq!(names[1..], ["-cross-attn", "-self-src,-self-tgt", "-self-src", "-self-tgt", "-rel-self"]);
    }

    #[test]
    fn config_round_trip() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_kv(&c.to_kv()).unwrap(), c);
        let mut kv = c.to_kv();
        kv.set("scales", "0.5,2");
        assert!(ExperimentConfig::from_kv(&kv).is_err());
        assert_eq!("ablation".parse::<ExperimentKind>().unwrap(), ExperimentKind::Ablation);
    }
}
