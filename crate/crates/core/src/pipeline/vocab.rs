use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
/// Id of `<sep1>`; `<sepI>` is `SEP_BASE + I - 1`.
pub const SEP_BASE: usize = 4;
pub const DEFAULT_SEPARATORS: usize = 64;

/// Token/id bijection. Ids `0..4 + n_sep` are reserved for
/// `<pad> <unk> <sos> <eos> <sep1> … <sepM>`; words follow by descending
/// frequency, ties broken by byte order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    n_sep: usize,
}

fn reserved(n_sep: usize) -> Vec<String> {
    let mut v: Vec<String> = ["<pad>", "<unk>", "<sos>", "<eos>"].map(String::from).to_vec();
    v.extend((1..=n_sep).map(|i| format!("<sep{i}>")));
    v
}

impl Vocab {
    /// Words seen fewer than `min_freq` times are left out and encode as
    /// `<unk>`.
    pub fn build<'s>(sentences: impl IntoIterator<Item = &'s str>, min_freq: usize, n_sep: usize) -> Result<Self> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for s in sentences {
            any = true;
            for w in s.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Empty("corpus"));
        }
        let specials = reserved(n_sep);
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_freq.max(1) && !specials.iter().any(|s| s == w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens = specials;
        tokens.extend(words.into_iter().map(|(w, _)| w.to_string()));
        Ok(Self::from_tokens(tokens, n_sep))
    }

    fn from_tokens(tokens: Vec<String>, n_sep: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index, n_sep }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_separators(&self) -> usize {
        self.n_sep
    }

    /// Ids below this are reserved.
    pub fn first_word(&self) -> usize {
        SEP_BASE + self.n_sep
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.first_word()
    }

    pub fn sep(&self, i: usize) -> Option<usize> {
        (1..=self.n_sep).contains(&i).then(|| SEP_BASE + i - 1)
    }

    pub fn id(&self, word: &str) -> usize {
        match self.index.get(word) {
            Some(&i) if i >= self.first_word() => i,
            _ => UNK,
        }
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    /// Whitespace tokenization; literal special names in text become `<unk>`.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Serialized specials (`<sos>`, `<sep3>` …) map back to their ids.
    pub fn parse_serialized(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// One token per line, in id order.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path.display(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        let n_sep = tokens
            .iter()
            .skip(SEP_BASE)
            .take_while(|t| t.starts_with("<sep") && t.ends_with('>'))
            .count();
        if tokens.len() < SEP_BASE || tokens[..SEP_BASE + n_sep] != reserved(n_sep)[..] {
            return Err(Error::format("vocabulary", "reserved block missing or out of order"));
        }
        let vocab = Self::from_tokens(tokens, n_sep);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::format("vocabulary", "duplicate tokens"));
        }
        Ok(vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_and_unknowns() {
        let v = Vocab::build(["a a b", "c b a"], 1, 2).unwrap();
        assert_eq!(v.first_word(), 6);
        assert!(v.id("a") < v.id("b"));
        assert!(v.id("b") < v.id("c"));
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.id("<sep1>"), UNK);
        assert_eq!(v.decode(&v.encode("c a b")), "c a b");
        assert_eq!(v.sep(2), Some(5));
        assert_eq!(v.sep(3), None);
    }

    #[test]
    fn min_freq_and_empty_corpus() {
        let v = Vocab::build(["a a b"], 2, 0).unwrap();
        assert_eq!(v.encode("b"), vec![UNK]);
        assert!(matches!(Vocab::build(Vec::<&str>::new(), 1, 4), Err(Error::Empty(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocab::build(["x y z x"], 1, 3).unwrap();
        v.write(&p).unwrap();
        assert_eq!(Vocab::read(&p).unwrap(), v);
        assert_eq!(v.parse_serialized("<sos> x <sep2> y"), vec![SOS, v.id("x"), 5, v.id("y")]);
    }
}
