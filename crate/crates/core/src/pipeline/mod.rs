//! Sentence, context and whole-document training instances with
//! index-aware separators.

pub mod corpus;
pub mod synthetic;
pub mod vocab;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvText;
use crate::error::{Error, Result};

pub use vocab::{Vocab, DEFAULT_SEPARATORS, EOS, PAD, SEP_BASE, SOS, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Sent,
    Doc2Sent,
    Doc2Doc,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sent => "sent",
            Mode::Doc2Sent => "doc2sent",
            Mode::Doc2Doc => "doc2doc",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sent" | "sent2sent" => Ok(Mode::Sent),
            "doc2sent" => Ok(Mode::Doc2Sent),
            "doc2doc" => Ok(Mode::Doc2Doc),
            _ => Err(Error::Config(format!("unknown mode `{s}` (sent, doc2sent, doc2doc)"))),
        }
    }
}

/// Token-id document. `offset` is the index of `src[0]` in the document
/// it was split from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub offset: usize,
    pub src: Vec<Vec<usize>>,
    pub tgt: Option<Vec<Vec<usize>>>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, src: Vec<Vec<usize>>, tgt: Option<Vec<Vec<usize>>>) -> Result<Self> {
        if let Some(t) = &tgt {
            if t.len() != src.len() {
                return Err(Error::Contract(format!(
                    "parallel document has {} source and {} target sentences",
                    src.len(),
                    t.len()
                )));
            }
        }
        Ok(Document {
            doc_id: doc_id.into(),
            offset: 0,
            src,
            tgt,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub mode: Mode,
    pub src: Vec<usize>,
    /// Empty when the document has no target side.
    pub tgt: Vec<usize>,
    pub doc_id: String,
    /// Sentence indices (in the original document) the instance covers.
    pub sentences: Range<usize>,
}

impl TrainingInstance {
    pub fn tokens(&self) -> usize {
        self.src.len() + self.tgt.len()
    }
}

/// Length of `<sos> s1 <sep1> … sN <eos>`.
pub fn serialized_len(sentences: &[Vec<usize>]) -> usize {
    sentences.iter().map(Vec::len).sum::<usize>() + sentences.len().saturating_sub(1) + 2
}

fn serialize(sentences: &[Vec<usize>], n_sep: usize) -> Result<Vec<usize>> {
    if sentences.len() > n_sep + 1 {
        return Err(Error::Config(format!(
            "{} sentences need more than the {n_sep} available separators",
            sentences.len()
        )));
    }
    let mut out = Vec::with_capacity(serialized_len(sentences));
    out.push(SOS);
    for (i, s) in sentences.iter().enumerate() {
        if i > 0 {
            out.push(SEP_BASE + i - 1);
        }
        out.extend_from_slice(s);
    }
    out.push(EOS);
    Ok(out)
}

/// `<sos> S1 <sep1> S2 … SN <eos>` on both sides.
pub fn make_doc2doc(doc: &Document, n_sep: usize) -> Result<TrainingInstance> {
    let tgt = match &doc.tgt {
        Some(t) => serialize(t, n_sep)?,
        None => Vec::new(),
    };
    Ok(TrainingInstance {
        mode: Mode::Doc2Doc,
        src: serialize(&doc.src, n_sep)?,
        tgt,
        doc_id: doc.doc_id.clone(),
        sentences: doc.offset..doc.offset + doc.len(),
    })
}

fn check_index(doc: &Document, n: usize) -> Result<()> {
    if n == 0 || n > doc.len() {
        return Err(Error::Index(format!(
            "sentence {n} outside 1..={} of document {}",
            doc.len(),
            doc.doc_id
        )));
    }
    Ok(())
}

/// Sentence `n` (1-based) alone: `<sos> S_n <eos>`.
pub fn make_sent(doc: &Document, n: usize) -> Result<TrainingInstance> {
    check_index(doc, n)?;
    let wrap = |s: &Vec<usize>| {
        let mut v = vec![SOS];
        v.extend_from_slice(s);
        v.push(EOS);
        v
    };
    Ok(TrainingInstance {
        mode: Mode::Sent,
        src: wrap(&doc.src[n - 1]),
        tgt: doc.tgt.as_ref().map(|t| wrap(&t[n - 1])).unwrap_or_default(),
        doc_id: doc.doc_id.clone(),
        sentences: doc.offset + n - 1..doc.offset + n,
    })
}

/// Up to `k` preceding sentences as separated context, then sentence `n`
/// (1-based); the target is the single sentence `<sos> T_n <eos>`.
pub fn make_doc2sent(doc: &Document, n: usize, k: usize, n_sep: usize) -> Result<TrainingInstance> {
    check_index(doc, n)?;
    let first = n - 1 - k.min(n - 1);
    let mut inst = make_sent(doc, n)?;
    inst.mode = Mode::Doc2Sent;
    inst.src = serialize(&doc.src[first..n], n_sep)?;
    inst.sentences = doc.offset + first..doc.offset + n;
    Ok(inst)
}

/// Greedy packing at sentence boundaries so that each piece serializes to
/// at most `max_tokens` on both sides and needs at most `n_sep`
/// separators. A sentence too long on its own becomes its own piece.
pub fn split_subdocuments(doc: &Document, max_tokens: usize, n_sep: usize) -> Vec<Document> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < doc.len() {
        let mut end = start + 1;
        while end < doc.len() && end - start < n_sep + 1 {
            let fits = |side: &[Vec<usize>]| serialized_len(&side[start..=end]) <= max_tokens;
            let ok = fits(&doc.src) && doc.tgt.as_ref().is_none_or(|t| fits(t));
            if !ok {
                break;
            }
            end += 1;
        }
        let piece = Document {
            doc_id: doc.doc_id.clone(),
            offset: doc.offset + start,
            src: doc.src[start..end].to_vec(),
            tgt: doc.tgt.as_ref().map(|t| t[start..end].to_vec()),
        };
        let too_long = serialized_len(&piece.src) > max_tokens
            || piece.tgt.as_ref().is_some_and(|t| serialized_len(t) > max_tokens);
        if too_long {
            log::warn!(
                "document {} sentence {} exceeds {max_tokens} tokens on its own",
                doc.doc_id,
                doc.offset + start + 1
            );
        }
        out.push(piece);
        start = end;
    }
    out
}

/// Sentence-level view of a document-level hypothesis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    /// One slot per source sentence; `None` where the hypothesis ran out
    /// of segments.
    pub segments: Vec<Option<Vec<usize>>>,
    /// Separators out of index order, or more segments than sentences.
    pub malformed: bool,
}

impl Alignment {
    pub fn covered(&self) -> bool {
        self.segments.iter().all(Option::is_some)
    }
}

/// Splits `hyp` on separators in order of appearance (ignoring a leading
/// `<sos>` and anything from the first `<eos>` on) and pairs segment `n`
/// with source sentence `n`.
pub fn recover_alignment(n_src: usize, hyp: &[usize], n_sep: usize) -> Alignment {
    let is_sep = |t: usize| (SEP_BASE..SEP_BASE + n_sep).contains(&t);
    let body = hyp.strip_prefix(&[SOS]).unwrap_or(hyp);
    let body = &body[..body.iter().position(|&t| t == EOS).unwrap_or(body.len())];
    let mut segments = vec![Vec::new()];
    let mut malformed = false;
    for &t in body {
        if is_sep(t) {
            if t - SEP_BASE + 1 != segments.len() {
                malformed = true;
            }
            segments.push(Vec::new());
        } else {
            segments.last_mut().expect("non-empty").push(t);
        }
    }
    if segments.len() > n_src {
        malformed = true;
    }
    let mut segments: Vec<Option<Vec<usize>>> = segments.into_iter().take(n_src).map(Some).collect();
    segments.resize(n_src, None);
    Alignment { segments, malformed }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Coverage {
    pub correct: usize,
    pub total: usize,
}

impl Coverage {
    pub fn percentage(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

impl fmt::Display for Coverage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {} / {:.1}%", self.correct, self.total, self.percentage())
    }
}

/// Documents whose every source sentence receives a segment.
pub fn coverage_stats(documents: &[Document], hypotheses: &[Vec<usize>], n_sep: usize) -> Result<Coverage> {
    if documents.len() != hypotheses.len() {
        return Err(Error::Contract(format!(
            "{} documents but {} hypotheses",
            documents.len(),
            hypotheses.len()
        )));
    }
    let correct = documents
        .iter()
        .zip(hypotheses)
        .filter(|(d, h)| recover_alignment(d.len(), h, n_sep).covered())
        .count();
    Ok(Coverage {
        correct,
        total: documents.len(),
    })
}

/// Data preparation knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub mode: Mode,
    pub max_tokens: usize,
    pub separators: usize,
    pub context: usize,
    pub min_freq: usize,
    /// Fraction of documents held out for validation.
    pub valid_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            mode: Mode::Doc2Doc,
            max_tokens: 512,
            separators: DEFAULT_SEPARATORS,
            context: 4,
            min_freq: 1,
            valid_fraction: 0.1,
        }
    }
}

impl DataConfig {
    const KEYS: [&'static str; 6] = ["mode", "max_tokens", "separators", "context", "min_freq", "valid_fraction"];

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("mode", self.mode);
        kv.set("max_tokens", self.max_tokens);
        kv.set("separators", self.separators);
        kv.set("context", self.context);
        kv.set("min_freq", self.min_freq);
        kv.set("valid_fraction", self.valid_fraction);
        kv
    }

    pub fn from_kv(kv: &KvText) -> Result<Self> {
        kv.ensure_known("data", &Self::KEYS)?;
        let mut c = DataConfig::default();
        kv.take("mode", &mut c.mode)?;
        kv.take("max_tokens", &mut c.max_tokens)?;
        kv.take("separators", &mut c.separators)?;
        kv.take("context", &mut c.context)?;
        kv.take("min_freq", &mut c.min_freq)?;
        kv.take("valid_fraction", &mut c.valid_fraction)?;
        if !(0.0..1.0).contains(&c.valid_fraction) {
            return Err(Error::Config(format!("data.valid_fraction {} outside [0, 1)", c.valid_fraction)));
        }
        Ok(c)
    }
}

/// All instances of one mode for a document set. Doc2Doc splits every
/// document to `max_tokens` first; context windows for Doc2Sent always
/// come from the full document.
pub fn build_instances(docs: &[Document], mode: Mode, cfg: &DataConfig) -> Result<Vec<TrainingInstance>> {
    let mut out = Vec::new();
    for doc in docs {
        match mode {
            Mode::Doc2Doc => {
                for piece in split_subdocuments(doc, cfg.max_tokens, cfg.separators) {
                    out.push(make_doc2doc(&piece, cfg.separators)?);
                }
            }
            Mode::Sent => {
                for n in 1..=doc.len() {
                    out.push(make_sent(doc, n)?);
                }
            }
            Mode::Doc2Sent => {
                for n in 1..=doc.len() {
                    let mut k = cfg.context.min(cfg.separators);
                    let mut inst = make_doc2sent(doc, n, k, cfg.separators)?;
                    while inst.src.len() > cfg.max_tokens && k > 0 {
                        k -= 1;
                        inst = make_doc2sent(doc, n, k, cfg.separators)?;
                    }
                    out.push(inst);
                }
            }
        }
    }
    Ok(out)
}

/// Seeded document-level split; at least one validation document when
/// there are two or more.
pub fn split_train_valid<T: Clone>(docs: &[T], valid_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = if docs.len() < 2 {
        0
    } else {
        ((docs.len() as f64 * valid_fraction).round() as usize).clamp(1, docs.len() - 1)
    };
    let (v, t) = order.split_at(n_valid);
    let (mut v, mut t) = (v.to_vec(), t.to_vec());
    v.sort_unstable();
    t.sort_unstable();
    let pick = |ix: &[usize]| ix.iter().map(|&i| docs[i].clone()).collect();
    (pick(&t), pick(&v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(src: &[&[usize]]) -> Document {
        let s: Vec<Vec<usize>> = src.iter().map(|x| x.to_vec()).collect();
        Document::new("d", s.clone(), Some(s)).unwrap()
    }

    const A: usize = 100;
    const B: usize = 101;
    const C: usize = 102;

    #[test]
    fn doc2doc_layout() {
        let i = make_doc2doc(&doc(&[&[A, B], &[C]]), 64).unwrap();
        assert_eq!(i.src, vec![SOS, A, B, SEP_BASE, C, EOS]);
        assert_eq!(i.tgt, i.src);
        let one = make_doc2doc(&doc(&[&[A, B]]), 64).unwrap();
        assert_eq!(one.src, vec![SOS, A, B, EOS]);
        let three = make_doc2doc(&doc(&[&[A], &[B], &[C]]), 64).unwrap();
        let seps: Vec<usize> = three.src.iter().copied().filter(|&t| (SEP_BASE..SEP_BASE + 64).contains(&t)).collect();
        assert_eq!(seps, vec![SEP_BASE, SEP_BASE + 1]);
        assert!(make_doc2doc(&doc(&[&[A], &[B], &[C]]), 1).is_err());
    }

    #[test]
    fn doc2sent_windows() {
        let sents: Vec<Vec<usize>> = (0..6).map(|i| vec![A + i]).collect();
        let d = Document::new("d", sents.clone(), Some(sents)).unwrap();
        let i1 = make_doc2sent(&d, 1, 4, 64).unwrap();
        assert_eq!(i1.src, vec![SOS, A, EOS]);
        assert_eq!(i1.tgt, vec![SOS, A, EOS]);
        assert_eq!(make_doc2sent(&d, 3, 4, 64).unwrap().sentences, 0..3);
        let i6 = make_doc2sent(&d, 6, 4, 64).unwrap();
        assert_eq!(i6.src, vec![SOS, A + 1, SEP_BASE, A + 2, SEP_BASE + 1, A + 3, SEP_BASE + 2, A + 4, SEP_BASE + 3, A + 5, EOS]);
        assert_eq!(i6.tgt, vec![SOS, A + 5, EOS]);
        assert!(make_doc2sent(&d, 0, 4, 64).is_err());
        assert!(make_doc2sent(&d, 7, 4, 64).is_err());
    }

    #[test]
    fn split_packs_greedily() {
        // 99 tokens + one separator each is 100 serialized tokens apiece
        let sents: Vec<Vec<usize>> = (0..10).map(|_| vec![A; 99]).collect();
        let d = Document::new("d", sents.clone(), Some(sents)).unwrap();
        let pieces = split_subdocuments(&d, 512, 64);
        assert_eq!(pieces.iter().map(Document::len).collect::<Vec<_>>(), vec![5, 5]);
        assert_eq!(pieces[1].offset, 5);
        assert_eq!(split_subdocuments(&d, 100_000, 64).len(), 1);
        assert_eq!(split_subdocuments(&d, 100_000, 3).len(), 3);
    }

    #[test]
    fn split_respects_target_side() {
        let d = Document::new("d", vec![vec![A]; 4], Some(vec![vec![B; 10]; 4])).unwrap();
        for p in split_subdocuments(&d, 16, 64) {
            assert!(serialized_len(p.tgt.as_ref().unwrap()) <= 16);
        }
    }

    #[test]
    fn alignment_cases() {
        let ok = recover_alignment(2, &[SOS, A, SEP_BASE, B, EOS], 64);
        assert_eq!(ok.segments, vec![Some(vec![A]), Some(vec![B])]);
        assert!(ok.covered() && !ok.malformed);

        let short = recover_alignment(2, &[SOS, A, EOS, SEP_BASE, B], 64);
        assert_eq!(short.segments, vec![Some(vec![A]), None]);
        assert!(!short.covered());

        let swapped = recover_alignment(3, &[SOS, A, SEP_BASE + 1, B, SEP_BASE, C, EOS], 64);
        assert_eq!(swapped.segments, vec![Some(vec![A]), Some(vec![B]), Some(vec![C])]);
        assert!(swapped.malformed);

        let extra = recover_alignment(1, &[A, SEP_BASE, B], 64);
        assert_eq!(extra.segments, vec![Some(vec![A])]);
        assert!(extra.malformed);
    }

    #[test]
    fn coverage_rendering() {
        let c = Coverage { correct: 3779, total: 3818 };
        assert_eq!(c.to_string(), "3779 / 3818 / 99.0%");
        let docs = vec![doc(&[&[A], &[B]]); 4];
        let mut hyps = vec![vec![SOS, A, SEP_BASE, B, EOS]; 4];
        hyps[2] = vec![SOS, A, EOS];
        let c = coverage_stats(&docs, &hyps, 64).unwrap();
        assert_eq!((c.correct, c.total), (3, 4));
        assert_eq!(c.percentage(), 75.0);
        assert!(coverage_stats(&docs, &hyps[..2], 64).is_err());
    }

    #[test]
    fn mode_round_trip() {
        for m in [Mode::Sent, Mode::Doc2Sent, Mode::Doc2Doc] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("docs".parse::<Mode>().is_err());
    }

    #[test]
    fn train_valid_split_is_seeded_and_disjoint() {
        let docs: Vec<usize> = (0..50).collect();
        let (t, v) = split_train_valid(&docs, 0.1, 3);
        assert_eq!((t.len(), v.len()), (45, 5));
        assert_eq!(split_train_valid(&docs, 0.1, 3), (t.clone(), v.clone()));
        let mut all = [t, v].concat();
        all.sort_unstable();
        assert_eq!(all, docs);
        assert_eq!(split_train_valid(&[1, 2], 0.0, 1).1.len(), 1);
        assert_eq!(split_train_valid(&[1], 0.5, 1).1.len(), 0);
    }
}
