//! Linear probes for absolute position, relative distance and word order
//! over frozen encoder states.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KvText;
use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;
use crate::tensor::{gemm, Real, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProbeTask {
    Absolute,
    Relative,
    Order,
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeTask::Absolute => "absolute",
            ProbeTask::Relative => "relative",
            ProbeTask::Order => "order",
        })
    }
}

impl FromStr for ProbeTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(ProbeTask::Absolute),
            "relative" => Ok(ProbeTask::Relative),
            "order" => Ok(ProbeTask::Order),
            _ => Err(Error::Config(format!("unknown probe task `{s}` (absolute, relative, order)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub task: ProbeTask,
    pub layer: usize,
    /// Class count for the absolute task; every position must be below it.
    pub max_positions: usize,
    /// Window for pair sampling in the relative and order tasks.
    pub max_distance: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    /// Control run: labels are permuted before training.
    pub shuffle_labels: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            task: ProbeTask::Absolute,
            layer: 2,
            max_positions: 512,
            max_distance: 20,
            epochs: 20,
            lr: 0.1,
            batch_size: 256,
            train_fraction: 0.8,
            valid_fraction: 0.1,
            shuffle_labels: false,
        }
    }
}

impl ProbeConfig {
    const KEYS: [&'static str; 10] = [
        "task",
        "layer",
        "max_positions",
        "max_distance",
        "epochs",
        "lr",
        "batch_size",
        "train_fraction",
        "valid_fraction",
        "shuffle_labels",
    ];

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("task", self.task);
        kv.set("layer", self.layer);
        kv.set("max_positions", self.max_positions);
        kv.set("max_distance", self.max_distance);
        kv.set("epochs", self.epochs);
        kv.set("lr", self.lr);
        kv.set("batch_size", self.batch_size);
        kv.set("train_fraction", self.train_fraction);
        kv.set("valid_fraction", self.valid_fraction);
        kv.set("shuffle_labels", self.shuffle_labels);
        kv
    }

    pub fn from_kv(kv: &KvText) -> Result<Self> {
        kv.ensure_known("probe", &Self::KEYS)?;
        let mut c = ProbeConfig::default();
        kv.take("task", &mut c.task)?;
        kv.take("layer", &mut c.layer)?;
        kv.take("max_positions", &mut c.max_positions)?;
        kv.take("max_distance", &mut c.max_distance)?;
        kv.take("epochs", &mut c.epochs)?;
        kv.take("lr", &mut c.lr)?;
        kv.take("batch_size", &mut c.batch_size)?;
        kv.take("train_fraction", &mut c.train_fraction)?;
        kv.take("valid_fraction", &mut c.valid_fraction)?;
        kv.take("shuffle_labels", &mut c.shuffle_labels)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_positions == 0 || self.max_distance == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("probe class counts, epochs and batch size must be positive".into()));
        }
        let (t, v) = (self.train_fraction, self.valid_fraction);
        if t <= 0.0 || v < 0.0 || t + v >= 1.0 {
            return Err(Error::Config(format!("probe split fractions {t}/{v} leave no test split")));
        }
        Ok(())
    }
}

/// Hidden states of one encoder layer for a set of sequences, one row per
/// token occurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct States {
    pub dim: usize,
    pub layer: usize,
    /// Row-major `[rows × dim]`.
    pub rows: Vec<f32>,
    /// Position of each row within its sequence, from 0.
    pub position: Vec<usize>,
    pub sequence: Vec<usize>,
    pub seq_len: Vec<usize>,
}

impl States {
    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.rows[r * self.dim..(r + 1) * self.dim]
    }

    pub fn n_sequences(&self) -> usize {
        self.sequence.last().map_or(0, |s| s + 1)
    }

    /// Row index of each sequence's first token.
    fn starts(&self) -> Vec<usize> {
        let mut s = Vec::new();
        for (r, &q) in self.sequence.iter().enumerate() {
            if q == s.len() {
                s.push(r);
            }
        }
        s
    }
}

/// Runs the frozen encoder over every sequence and keeps layer `layer`
/// (0 is the embedded input).
pub fn extract_states<T: Real>(model: &Seq2SeqModel<T>, sequences: &[Vec<usize>], layer: usize) -> Result<States> {
    let n_layers = model.config().n_enc_layers;
    if layer > n_layers {
        return Err(Error::Index(format!("layer {layer} outside 0..={n_layers}")));
    }
    let dim = model.config().d_model;
    let mut out = States {
        dim,
        layer,
        rows: Vec::new(),
        position: Vec::new(),
        sequence: Vec::new(),
        seq_len: Vec::new(),
    };
    for (q, seq) in sequences.iter().enumerate() {
        let states = model.encode(seq)?;
        out.rows.extend(states[layer].data().iter().map(|v| v.as_f64() as f32));
        for p in 0..seq.len() {
            out.position.push(p);
            out.sequence.push(q);
            out.seq_len.push(seq.len());
        }
    }
    Ok(out)
}

/// For each position `i`, one partner `j ≠ i` drawn uniformly from the
/// `±k` window clipped to the sequence.
pub fn sample_pairs<R: Rng>(len: usize, k: usize, rng: &mut R) -> Vec<(usize, usize)> {
    if len < 2 || k == 0 {
        return Vec::new();
    }
    (0..len)
        .map(|i| {
            let lo = i.saturating_sub(k);
            let hi = (i + k).min(len - 1);
            // draw from the window with `i` removed
            let r = rng.random_range(lo..hi);
            (i, if r >= i { r + 1 } else { r })
        })
        .collect()
}

/// Class index of a signed distance in `[-k, -1] ∪ [1, k]`.
pub fn relative_class(distance: isize, k: usize) -> Result<usize> {
    let k = k as isize;
    match distance {
        0 => Err(Error::Contract("zero-distance pair has no relative class".into())),
        d if d < -k || d > k => Err(Error::Index(format!("distance {d} outside ±{k}"))),
        d if d < 0 => Ok((d + k) as usize),
        d => Ok((d + k - 1) as usize),
    }
}

pub fn class_distance(class: usize, k: usize) -> isize {
    let (c, k) = (class as isize, k as isize);
    if c < k {
        c - k
    } else {
        c - k + 1
    }
}

/// One CSV row: `bucket` is `None` for whole-split figures.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub task: ProbeTask,
    pub layer: usize,
    pub bucket: Option<isize>,
    pub accuracy: Option<f64>,
    pub relaxed_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

impl ProbeReport {
    pub const HEADER: &'static str = "task,layer,bucket,accuracy,relaxed_accuracy";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let bucket = r.bucket.map_or_else(|| "all".to_string(), |b| b.to_string());
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.task,
                r.layer,
                bucket,
                opt(r.accuracy),
                opt(r.relaxed_accuracy)
            ));
        }
        s
    }

    /// Accuracy over the whole test split.
    pub fn overall(&self) -> Option<&ProbeRow> {
        self.rows.iter().find(|r| r.bucket.is_none())
    }

    /// Per-distance rows only.
    pub fn buckets(&self) -> impl Iterator<Item = &ProbeRow> {
        self.rows.iter().filter(|r| r.bucket.is_some())
    }

    pub fn extend(&mut self, other: ProbeReport) {
        self.rows.extend(other.rows);
    }
}

struct Split {
    train: Vec<usize>,
    valid: Vec<usize>,
    test: Vec<usize>,
}

/// Assigns whole sequences to train/valid/test.
fn split_sequences<R: Rng>(n: usize, cfg: &ProbeConfig, rng: &mut R) -> Result<(Vec<u8>, usize)> {
    if n < 3 {
        return Err(Error::Contract(format!("probing needs at least 3 sequences, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 2);
    let n_valid = ((n as f64 * cfg.valid_fraction).round() as usize).clamp(1, n - n_train - 1);
    let mut which = vec![2u8; n];
    for (rank, &q) in order.iter().enumerate() {
        which[q] = if rank < n_train {
            0
        } else if rank < n_train + n_valid {
            1
        } else {
            2
        };
    }
    Ok((which, n_train))
}

/// Features `[n × d]` with a class label each, grouped by sequence.
struct Dataset {
    dim: usize,
    x: Vec<f32>,
    y: Vec<usize>,
    sequence: Vec<usize>,
    classes: usize,
}

/// Minibatch gradient descent on softmax cross-entropy with a bias-free
/// linear map; features are standardized with training-split statistics.
/// Returns test-split predictions from the epoch with the best validation
/// accuracy.
fn train_probe<R: Rng>(data: &Dataset, split: &Split, cfg: &ProbeConfig, rng: &mut R) -> Vec<usize> {
    let (d, c) = (data.dim, data.classes);
    let mut mean = vec![0f64; d];
    let mut var = vec![0f64; d];
    for &r in &split.train {
        for (k, v) in data.x[r * d..(r + 1) * d].iter().enumerate() {
            mean[k] += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= split.train.len() as f64);
    for &r in &split.train {
        for (k, v) in data.x[r * d..(r + 1) * d].iter().enumerate() {
            var[k] += (*v as f64 - mean[k]).powi(2);
        }
    }
    let inv_std: Vec<f32> = var
        .iter()
        .map(|v| 1.0 / ((v / split.train.len() as f64).sqrt().max(1e-6)) as f32)
        .collect();
    let norm = |idx: &[usize]| -> Vec<f32> {
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            for k in 0..d {
                out.push((data.x[r * d + k] - mean[k] as f32) * inv_std[k]);
            }
        }
        out
    };
    let predict = |w: &[f32], x: &[f32], n: usize| -> Vec<usize> {
        let mut logits = vec![0f32; n * c];
        gemm(View::matrix(x, n, d, false), View::matrix(w, c, d, true), &mut logits, c, 1, false);
        logits
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    let x_valid = norm(&split.valid);
    let x_test = norm(&split.test);
    let mut w = vec![0f32; c * d];
    let mut best_w = w.clone();
    let mut best_acc = -1.0;
    let mut order = split.train.clone();
    let lr = cfg.lr as f32;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len();
            let xb = norm(batch);
            let mut p = vec![0f32; n * c];
            gemm(View::matrix(&xb, n, d, false), View::matrix(&w, c, d, true), &mut p, c, 1, false);
            for (row, &r) in p.chunks_mut(c).zip(batch) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum * n as f32;
                }
                row[data.y[r]] -= 1.0 / n as f32;
            }
            // W -= lr · (P − Y)ᵀ X / n
            let mut g = vec![0f32; c * d];
            gemm(View::matrix(&p, n, c, true), View::matrix(&xb, n, d, false), &mut g, d, 1, false);
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= lr * gi;
            }
        }
        let preds = predict(&w, &x_valid, split.valid.len());
        let acc = preds.iter().zip(&split.valid).filter(|(p, &r)| **p == data.y[r]).count() as f64;
        if acc > best_acc {
            best_acc = acc;
            best_w.copy_from_slice(&w);
        }
    }
    predict(&best_w, &x_test, split.test.len())
}

/// `(prediction, row)` for every test row.
fn run<R: Rng>(mut data: Dataset, cfg: &ProbeConfig, rng: &mut R) -> Result<(Vec<(usize, usize)>, Dataset)> {
    let n_seq = data.sequence.last().map_or(0, |s| s + 1);
    let (which, _) = split_sequences(n_seq, cfg, rng)?;
    let mut split = Split {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (r, &q) in data.sequence.iter().enumerate() {
        match which[q] {
            0 => split.train.push(r),
            1 => split.valid.push(r),
            _ => split.test.push(r),
        }
    }
    if split.test.is_empty() || split.train.is_empty() {
        return Err(Error::Contract("probe split left no training or test rows".into()));
    }
    let first = data.y[split.train[0]];
    if split.train.iter().all(|&r| data.y[r] == first) {
        return Err(Error::Contract("probe training split has a single class".into()));
    }
    if cfg.shuffle_labels {
        data.y.shuffle(rng);
    }
    let preds = train_probe(&data, &split, cfg, rng);
    Ok((preds.into_iter().zip(split.test).collect(), data))
}

fn percent(hit: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| 100.0 * hit as f64 / n as f64)
}

/// Predicts each token's position from its state; reports exact and ±3
/// accuracy on the test split.
pub fn probe_absolute(states: &States, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    cfg.validate()?;
    if let Some(&p) = states.position.iter().find(|&&p| p >= cfg.max_positions) {
        return Err(Error::Config(format!(
            "position {p} needs max_positions > {p} (have {})",
            cfg.max_positions
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Dataset {
        dim: states.dim,
        x: states.rows.clone(),
        y: states.position.clone(),
        sequence: states.sequence.clone(),
        classes: cfg.max_positions,
    };
    let (preds, data) = run(data, cfg, &mut rng)?;
    let (mut hit, mut near) = (0, 0);
    for &(p, r) in &preds {
        hit += usize::from(p == data.y[r]);
        near += usize::from(p.abs_diff(data.y[r]) <= 3);
    }
    Ok(ProbeReport {
        rows: vec![ProbeRow {
            task: ProbeTask::Absolute,
            layer: states.layer,
            bucket: None,
            accuracy: percent(hit, preds.len()),
            relaxed_accuracy: percent(near, preds.len()),
        }],
    })
}

/// Pair datasets for the relative and order tasks: features `h_i − h_j`.
fn pair_dataset<R: Rng>(states: &States, k: usize, rng: &mut R) -> (Dataset, Vec<isize>) {
    let d = states.dim;
    let mut x = Vec::new();
    let mut dist = Vec::new();
    let mut sequence = Vec::new();
    for (q, &start) in states.starts().iter().enumerate() {
        let len = states.seq_len[start];
        for (i, j) in sample_pairs(len, k, rng) {
            let (hi, hj) = (states.row(start + i), states.row(start + j));
            x.extend(hi.iter().zip(hj).map(|(a, b)| a - b));
            dist.push(i as isize - j as isize);
            sequence.push(q);
        }
    }
    let data = Dataset {
        dim: d,
        x,
        y: Vec::new(),
        sequence,
        classes: 0,
    };
    debug_assert_eq!(data.x.len(), dist.len() * d);
    (data, dist)
}

fn bucketed(task: ProbeTask, layer: usize, k: usize, preds: &[(usize, usize)], data: &Dataset, dist: &[isize]) -> ProbeReport {
    let mut hit = vec![0usize; 2 * k];
    let mut cnt = vec![0usize; 2 * k];
    let (mut h_all, mut n_all) = (0, 0);
    for &(p, r) in preds {
        let b = relative_class(dist[r], k).expect("sampled distances are in range");
        cnt[b] += 1;
        n_all += 1;
        if p == data.y[r] {
            hit[b] += 1;
            h_all += 1;
        }
    }
    let mut rows = vec![ProbeRow {
        task,
        layer,
        bucket: None,
        accuracy: percent(h_all, n_all),
        relaxed_accuracy: None,
    }];
    rows.extend((0..2 * k).map(|b| ProbeRow {
        task,
        layer,
        bucket: Some(class_distance(b, k)),
        accuracy: percent(hit[b], cnt[b]),
        relaxed_accuracy: None,
    }));
    ProbeReport { rows }
}

/// Predicts the signed distance `i − j` from `h_i − h_j` (2K classes).
pub fn probe_relative(states: &States, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    cfg.validate()?;
    let k = cfg.max_distance;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut data, dist) = pair_dataset(states, k, &mut rng);
    data.y = dist.iter().map(|&d| relative_class(d, k)).collect::<Result<_>>()?;
    data.classes = 2 * k;
    let (preds, data) = run(data, cfg, &mut rng)?;
    Ok(bucketed(ProbeTask::Relative, states.layer, k, &preds, &data, &dist))
}

/// Predicts whether `i < j` from `h_i − h_j`.
pub fn probe_order(states: &States, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    cfg.validate()?;
    let k = cfg.max_distance;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut data, dist) = pair_dataset(states, k, &mut rng);
    data.y = dist.iter().map(|&d| usize::from(d < 0)).collect();
    data.classes = 2;
    let (preds, data) = run(data, cfg, &mut rng)?;
    Ok(bucketed(ProbeTask::Order, states.layer, k, &preds, &data, &dist))
}

pub fn probe(states: &States, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    match cfg.task {
        ProbeTask::Absolute => probe_absolute(states, cfg, seed),
        ProbeTask::Relative => probe_relative(states, cfg, seed),
        ProbeTask::Order => probe_order(states, cfg, seed),
    }
}
