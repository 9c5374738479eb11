//! Writes a synthetic parallel corpus to `<dir>/train.{src,tgt}`, holding the
//! last HELDOUT documents out as `<dir>/test.{src,tgt}`. One generation
//! shares a single word mapping, so the two files must come from one run.
//!
//! cargo run --example synth_corpus -- DIR [copy|reverse|map] [DOCS] [MIN_SENTS] [MAX_SENTS] [SEED] [HELDOUT]

use std::path::PathBuf;

use posattn::pipeline::corpus::{write_parallel, RawDocument};
use posattn::pipeline::synthetic::{generate, SynthConfig};

fn main() -> posattn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(dir) = args.first() else {
        eprintln!("usage: synth_corpus DIR [copy|reverse|map] [DOCS] [MIN_SENTS] [MAX_SENTS] [SEED] [HELDOUT]");
        std::process::exit(2);
    };
    let num = |i: usize, d: usize| args.get(i).map_or(Ok(d), |s| s.parse().map_err(|_| posattn::Error::Config(format!("bad number `{s}`"))));
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        task: args.get(1).map_or(Ok(d.task), |s| s.parse())?,
        docs: num(2, d.docs)?,
        doc_sents: (num(3, d.doc_sents.0)?, num(4, d.doc_sents.1)?),
        seed: num(5, d.seed as usize)? as u64,
        ..d
    };
    let heldout = num(6, 0)?;
    if heldout >= cfg.docs {
        return Err(posattn::Error::Config(format!("HELDOUT {heldout} leaves no training documents")));
    }
    let docs = generate(&cfg)?;
    let (train, test) = docs.split_at(docs.len() - heldout);
    let dir = PathBuf::from(dir);
    std::fs::create_dir_all(&dir).map_err(|e| posattn::Error::io(dir.display(), e))?;
    write_parallel(&dir.join("train.src"), &dir.join("train.tgt"), train)?;
    if !test.is_empty() {
        write_parallel(&dir.join("test.src"), &dir.join("test.tgt"), test)?;
    }
    let sents = |ds: &[RawDocument]| -> usize { ds.iter().map(|d| d.src.len()).sum() };
    println!("{} train / {} test documents, {} / {} sentences", train.len(), test.len(), sents(train), sents(test));
    Ok(())
}
