//! Canonical `key=value` configuration text and the run configuration that
//! addresses every model, training, probing, data and decoding knob by
//! dotted path.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::beam::BeamConfig;
use crate::model::ModelConfig;
use crate::pipeline::{DataConfig, Mode};
use crate::probing::{ProbeConfig, ProbeTask};
use crate::training::{ExperimentConfig, TrainConfig};

/// Sorted `key=value` map. Rendering is canonical: one entry per line, keys
/// in byte order, trailing newline.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvText(BTreeMap<String, String>);

impl KvText {
    pub fn new() -> Self {
        KvText(BTreeMap::new())
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KvText(map))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.0.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn merge(&mut self, other: &KvText) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    /// Parses `key` if present, leaving `slot` untouched otherwise.
    pub fn take<F: FromStr>(&self, key: &str, slot: &mut F) -> Result<()>
    where
        F::Err: Display,
    {
        if let Some(v) = self.get(key) {
            *slot = v
                .parse()
                .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))?;
        }
        Ok(())
    }

    pub fn require<F: FromStr>(&self, key: &str) -> Result<F>
    where
        F::Err: Display,
    {
        let v = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key}")))?;
        v.parse()
            .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
    }

    /// Entries whose key starts with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvText {
        let p = format!("{prefix}.");
        KvText(
            self.0
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        )
    }

    pub fn prefixed(&self, prefix: &str) -> KvText {
        KvText(
            self.0
                .iter()
                .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
                .collect(),
        )
    }

    /// Copy without the entries under `prefix.`.
    pub fn without(&self, prefix: &str) -> KvText {
        let p = format!("{prefix}.");
        KvText(self.0.iter().filter(|(k, _)| !k.starts_with(&p)).map(|(k, v)| (k.clone(), v.clone())).collect())
    }

    /// Rejects any key outside `allowed`.
    pub fn ensure_known(&self, section: &str, allowed: &[&str]) -> Result<()> {
        for k in self.0.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{section}.{k}`")));
            }
        }
        Ok(())
    }
}

/// Everything a run needs, addressable as `section.key`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub data: DataConfig,
    pub decode: BeamConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            data: DataConfig::default(),
            decode: BeamConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KvText) -> Result<Self> {
        const SECTIONS: [&str; 6] = ["model", "train", "probe", "data", "decode", "experiment"];
        for k in kv.keys() {
            let known = k == "seed" || SECTIONS.iter().any(|s| k.starts_with(&format!("{s}.")));
            if !known {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        let mut cfg = RunConfig::default();
        kv.take("seed", &mut cfg.seed)?;
        cfg.model = ModelConfig::from_kv(&kv.section("model"))?;
        cfg.train = TrainConfig::from_kv(&kv.section("train"))?;
        cfg.probe = ProbeConfig::from_kv(&kv.section("probe"))?;
        cfg.data = DataConfig::from_kv(&kv.section("data"))?;
        cfg.decode = BeamConfig::from_kv(&kv.section("decode"))?;
        cfg.experiment = ExperimentConfig::from_kv(&kv.section("experiment"))?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("seed", self.seed);
        kv.merge(&self.model.to_kv().prefixed("model"));
        kv.merge(&self.train.to_kv().prefixed("train"));
        kv.merge(&self.probe.to_kv().prefixed("probe"));
        kv.merge(&self.data.to_kv().prefixed("data"));
        kv.merge(&self.decode.to_kv().prefixed("decode"));
        kv.merge(&self.experiment.to_kv().prefixed("experiment"));
        kv
    }

    /// Loads an optional config file and layers `overrides` on top.
    pub fn load(path: Option<&Path>, overrides: &KvText) -> Result<Self> {
        let mut kv = match path {
            Some(p) => KvText::read(p)?,
            None => KvText::new(),
        };
        kv.merge(overrides);
        Self::from_kv(&kv)
    }

    /// The paper-scale base transformer: 6+6 layers, 8 heads, width 512,
    /// feed-forward 2048, dropout 0.3, 4k warmup, label smoothing 0.1.
    pub fn base() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model.n_enc_layers = 6;
        cfg.model.n_dec_layers = 6;
        cfg.model.n_heads = 8;
        cfg.model.d_model = 512;
        cfg.model.ffn_dim = 2048;
        cfg.model.dropout = 0.3;
        cfg.train.warmup_steps = 4000;
        cfg.train.label_smoothing = 0.1;
        cfg.train.lr_scale = 1.0;
        cfg
    }

    pub fn mode(&self) -> Mode {
        self.data.mode
    }

    pub fn probe_task(&self) -> ProbeTask {
        self.probe.task
    }
}
