use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use log::info;
use posattn::evaluation::{d_bleu, s_bleu};
use posattn::model::{beam_search, greedy_decode, Checkpoint};
use posattn::pipeline::{
    build_instances, corpus, recover_alignment, split_train_valid, Document, Mode, TrainingInstance, Vocab, EOS, SOS,
};
use posattn::probing::{extract_states, probe as run_probe};
use posattn::training::experiment::{run_experiment, ExperimentData, ExperimentKind};
use posattn::training::Trainer;
use posattn::{Error, KvText, RunConfig, Seq2SeqModel};

use crate::Common;

/// Config file, then `--set`, then the dedicated flags.
fn run_config(c: &Common) -> Result<RunConfig> {
    let mut kv = KvText::new();
    for s in &c.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        kv.set(k.trim(), v.trim());
    }
    let mut put = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.set(key, v);
        }
    };
    put("seed", c.seed.map(|v| v.to_string()));
    put("data.mode", c.mode.clone());
    put("data.max_tokens", c.max_tokens.map(|v| v.to_string()));
    put("decode.beam_size", c.beam.map(|v| v.to_string()));
    put("decode.lenpen", c.lenpen.map(|v| v.to_string()));
    put("decode.max_len_a", c.max_len_a.map(|v| v.to_string()));
    put("decode.max_len_b", c.max_len_b.map(|v| v.to_string()));
    put("probe.layer", c.layer.map(|v| v.to_string()));
    put("probe.task", c.task.clone());
    put("model.flags", c.flags.clone());
    Ok(RunConfig::load(c.config.as_deref(), &kv)?)
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    Ok(())
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Creates the output directory and records the effective config in it.
fn start_output(out: &Path, run: &RunConfig) -> Result<()> {
    create_dir(out)?;
    write(out.join("config.txt"), &run.to_kv().render())
}

fn encode_raw(docs: &[Vec<String>], vocab: &Vocab) -> Result<Vec<Document>> {
    docs.iter()
        .enumerate()
        .map(|(i, d)| Ok(Document::new(format!("doc{i}"), d.iter().map(|s| vocab.encode(s)).collect(), None)?))
        .collect()
}

fn load_model(checkpoint: &Path, vocab: Option<&Path>) -> Result<(Seq2SeqModel<f32>, Vocab)> {
    let ck = Checkpoint::read(checkpoint)?;
    let model = ck.to_model()?;
    let vocab_path = match vocab {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("vocab.txt"),
    };
    let vocab = Vocab::read(&vocab_path)?;
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Config(format!(
            "{} has {} entries but the checkpoint expects {}",
            vocab_path.display(),
            vocab.len(),
            model.config().vocab_size
        ))
        .into());
    }
    Ok((model, vocab))
}

pub fn prep(c: &Common, src: &Path, tgt: &Path, out: &Path) -> Result<()> {
    let run = run_config(c)?;
    let raw = corpus::read_parallel(src, Some(tgt))?;
    if raw.is_empty() {
        return Err(Error::Empty("corpus").into());
    }
    let (train_raw, valid_raw) = split_train_valid(&raw, run.data.valid_fraction, run.seed);
    if valid_raw.is_empty() {
        return Err(Error::Config("need at least two documents for a validation split".into()).into());
    }
    let vocab = Vocab::build(corpus::all_sentences(&train_raw), run.data.min_freq, run.data.separators)?;
    let train_docs = corpus::encode_documents(&train_raw, &vocab)?;
    let valid_docs = corpus::encode_documents(&valid_raw, &vocab)?;
    let mode = run.mode();
    let train = build_instances(&train_docs, mode, &run.data)?;
    let valid = build_instances(&valid_docs, mode, &run.data)?;

    start_output(out, &run)?;
    vocab.write(&out.join("vocab.txt"))?;
    corpus::write_instances(&out.join("train.tsv"), &train, &vocab)?;
    corpus::write_instances(&out.join("valid.tsv"), &valid, &vocab)?;
    if mode != Mode::Sent {
        let sent = build_instances(&train_docs, Mode::Sent, &run.data)?;
        corpus::write_instances(&out.join("train.sent.tsv"), &sent, &vocab)?;
    }
    corpus::write_parallel(&out.join("valid.src"), &out.join("valid.tgt"), &valid_raw)?;
    info!(
        "{} train / {} valid documents, {} / {} {mode} instances, vocabulary {}",
        train_raw.len(),
        valid_raw.len(),
        train.len(),
        valid.len(),
        vocab.len()
    );
    Ok(())
}

pub fn train(c: &Common, data: &Path, out: &Path) -> Result<()> {
    let mut run = run_config(c)?;
    let vocab = Vocab::read(&data.join("vocab.txt"))?;
    run.model.vocab_size = vocab.len();
    run.data.separators = vocab.n_separators();
    if run.data.max_tokens > run.model.max_len {
        return Err(Error::Config(format!(
            "data.max_tokens {} exceeds model.max_len {}",
            run.data.max_tokens, run.model.max_len
        ))
        .into());
    }
    let mode = run.mode();
    let train = corpus::read_instances(&data.join("train.tsv"), &vocab, mode)?;
    let valid = corpus::read_instances(&data.join("valid.tsv"), &vocab, mode)?;
    let sent_path = data.join("train.sent.tsv");
    let sent = if mode != Mode::Sent && run.train.mix_sent_ratio != Some(0.0) && sent_path.exists() {
        corpus::read_instances(&sent_path, &vocab, Mode::Sent)?
    } else {
        Vec::new()
    };
    start_output(out, &run)?;
    vocab.write(&out.join("vocab.txt"))?;
    let mut trainer = Trainer::new(run, train, sent, valid)?;
    info!(
        "{} parameters, sentence mix ratio {:.3}",
        trainer.model().num_params(),
        trainer.mix_ratio()
    );
    let s = trainer.run(Some(out))?;
    let [doc, sent] = trainer.sampled();
    info!(
        "{} steps (early stop: {}), best valid {:.4}, last valid {:.4}; micro-batches {doc} main / {sent} sentence",
        s.steps, s.stopped_early, s.best_valid, s.last_valid
    );
    Ok(())
}

/// Sentences an instance translates: the whole piece, or only the last
/// sentence of a context window.
fn translated(inst: &TrainingInstance) -> (usize, usize) {
    let r = &inst.sentences;
    match inst.mode {
        Mode::Doc2Sent => (r.end - 1, 1),
        _ => (r.start, r.len()),
    }
}

pub fn translate(c: &Common, checkpoint: &Path, vocab: Option<&Path>, src: &Path, out: &Path) -> Result<()> {
    let run = run_config(c)?;
    let (model, vocab) = load_model(checkpoint, vocab)?;
    let docs = encode_raw(&corpus::read_documents(src)?, &vocab)?;
    let mode = run.mode();
    let mut data = run.data.clone();
    data.separators = vocab.n_separators();
    start_output(out, &run)?;
    let mut lines = String::new();
    let mut n = 0;
    for (d, doc) in docs.iter().enumerate() {
        for inst in build_instances(std::slice::from_ref(doc), mode, &data)? {
            let mut hyp = if run.decode.beam_size == 1 {
                greedy_decode(&model, &inst.src, &run.decode, SOS, EOS)?
            } else {
                beam_search(&model, &inst.src, &run.decode, SOS, EOS)?.tokens
            };
            if hyp.last() == Some(&EOS) {
                hyp.pop();
            }
            let (offset, count) = translated(&inst);
            lines.push_str(&format!("{d}\t{offset}\t{count}\t{}\n", vocab.decode(&hyp)));
            n += 1;
        }
    }
    write(out.join("hypotheses.tsv"), &lines)?;
    info!("{n} {mode} segments from {} documents", docs.len());
    Ok(())
}

struct HypLine {
    doc: usize,
    offset: usize,
    count: usize,
    tokens: Vec<usize>,
}

fn parse_hypotheses(path: &Path, vocab: &Vocab) -> Result<Vec<HypLine>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let bad = |n: usize, why: &str| Error::Format {
        what: "hypothesis file",
        detail: format!("line {}: {why}", n + 1),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.splitn(4, '\t').collect();
        if f.len() != 4 {
            return Err(bad(n, "expected doc, offset, count and text").into());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(n, "non-numeric field"));
        out.push(HypLine {
            doc: num(f[0])?,
            offset: num(f[1])?,
            count: num(f[2])?,
            tokens: vocab.parse_serialized(f[3]),
        });
    }
    Ok(out)
}

pub fn eval(c: &Common, hyp: &Path, reference: &Path, vocab: &Path, out: &Path) -> Result<()> {
    let run = run_config(c)?;
    let vocab = Vocab::read(vocab)?;
    let refs = encode_raw(&corpus::read_documents(reference)?, &vocab)?;
    let lines = parse_hypotheses(hyp, &vocab)?;
    if lines.is_empty() {
        return Err(Error::Empty("hypothesis file").into());
    }
    let n_sep = vocab.n_separators();
    let mut aligns = Vec::new();
    let mut ref_sents = Vec::new();
    let mut covered = 0;
    let mut per_doc: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (n, h) in lines.iter().enumerate() {
        let doc = refs
            .get(h.doc)
            .ok_or_else(|| anyhow!(Error::Index(format!("hypothesis line {} names document {}", n + 1, h.doc))))?;
        let sents = doc.src.get(h.offset..h.offset + h.count).ok_or_else(|| {
            anyhow!(Error::Index(format!(
                "hypothesis line {} covers sentences beyond document {}",
                n + 1,
                h.doc
            )))
        })?;
        let a = recover_alignment(h.count, &h.tokens, n_sep);
        covered += usize::from(a.covered());
        aligns.push(a);
        ref_sents.push(sents.to_vec());
        per_doc.entry(h.doc).or_default().extend(&h.tokens);
    }
    let doc_pairs: Vec<(Vec<usize>, Vec<usize>)> = per_doc
        .into_iter()
        .map(|(d, toks)| (toks, refs[d].src.concat()))
        .collect();
    let s = s_bleu(&aligns, &ref_sents, &vocab)?;
    let d = d_bleu(&doc_pairs, &vocab)?;
    let total = lines.len();
    let line = format!(
        "s-BLEU {s:.2} d-BLEU {d:.2} coverage {covered}/{total} ({:.1}%)",
        100.0 * covered as f64 / total as f64
    );
    start_output(out, &run)?;
    write(out.join("eval.txt"), &format!("{line}\n"))?;
    println!("{line}");
    Ok(())
}

pub fn probe(c: &Common, checkpoint: &Path, vocab: Option<&Path>, src: &Path, out: &Path) -> Result<()> {
    let run = run_config(c)?;
    let (model, vocab) = load_model(checkpoint, vocab)?;
    let docs = encode_raw(&corpus::read_documents(src)?, &vocab)?;
    let mut data = run.data.clone();
    data.separators = vocab.n_separators();
    let seqs: Vec<Vec<usize>> = build_instances(&docs, run.mode(), &data)?.into_iter().map(|i| i.src).collect();
    let states = extract_states(&model, &seqs, run.probe.layer)?;
    let report = run_probe(&states, &run.probe, run.seed)?;
    start_output(out, &run)?;
    write(out.join("probe.csv"), &report.to_csv())?;
    if let Some(acc) = report.overall().and_then(|r| r.accuracy) {
        println!("{} probe, layer {}: {acc:.2}%", run.probe.task, run.probe.layer);
    }
    Ok(())
}

pub fn experiment(c: &Common, kind: &str, src: &Path, tgt: &Path, out: &Path) -> Result<()> {
    let run = run_config(c)?;
    let kind: ExperimentKind = kind.parse()?;
    let raw = corpus::read_parallel(src, Some(tgt))?;
    let (train_raw, valid_raw) = split_train_valid(&raw, run.data.valid_fraction, run.seed);
    let vocab = Vocab::build(corpus::all_sentences(&train_raw), run.data.min_freq, run.data.separators)?;
    let data = ExperimentData {
        train: corpus::encode_documents(&train_raw, &vocab)?,
        valid: corpus::encode_documents(&valid_raw, &vocab)?,
        vocab,
    };
    start_output(out, &run)?;
    let path = run_experiment(kind, &run, &run.experiment, &data, out).with_context(|| format!("{kind} experiment"))?;
    println!("{}", path.display());
    Ok(())
}
