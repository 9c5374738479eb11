//! Warmup schedule, Adam, token-budget batching and the training loop.

pub mod experiment;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{KvText, RunConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Checkpoint, Dropout, Seq2SeqModel};
use crate::params::ParamStore;
use crate::pipeline::TrainingInstance;

pub use experiment::{run_experiment, ExperimentConfig, ExperimentKind};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    pub lr_scale: f64,
    pub label_smoothing: f64,
    /// Token budget (source plus target) per micro-batch.
    pub max_tokens: usize,
    pub update_freq: usize,
    pub patience: usize,
    pub valid_every: usize,
    /// Probability that a micro-batch comes from the sentence pool; `None`
    /// uses the sentence pool's share of all tokens.
    pub mix_sent_ratio: Option<f64>,
    pub max_epochs: usize,
    /// Zero means no step limit.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_steps: 4000,
            lr_scale: 1.0,
            label_smoothing: 0.1,
            max_tokens: 4096,
            update_freq: 1,
            patience: 10,
            valid_every: 500,
            mix_sent_ratio: None,
            max_epochs: 100,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    const KEYS: [&'static str; 10] = [
        "warmup_steps",
        "lr_scale",
        "label_smoothing",
        "max_tokens",
        "update_freq",
        "patience",
        "valid_every",
        "mix_sent_ratio",
        "max_epochs",
        "max_steps",
    ];

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("warmup_steps", self.warmup_steps);
        kv.set("lr_scale", self.lr_scale);
        kv.set("label_smoothing", self.label_smoothing);
        kv.set("max_tokens", self.max_tokens);
        kv.set("update_freq", self.update_freq);
        kv.set("patience", self.patience);
        kv.set("valid_every", self.valid_every);
        match self.mix_sent_ratio {
            Some(r) => kv.set("mix_sent_ratio", r),
            None => kv.set("mix_sent_ratio", "auto"),
        }
        kv.set("max_epochs", self.max_epochs);
        kv.set("max_steps", self.max_steps);
        kv
    }

    pub fn from_kv(kv: &KvText) -> Result<Self> {
        kv.ensure_known("train", &Self::KEYS)?;
        let mut c = TrainConfig::default();
        kv.take("warmup_steps", &mut c.warmup_steps)?;
        kv.take("lr_scale", &mut c.lr_scale)?;
        kv.take("label_smoothing", &mut c.label_smoothing)?;
        kv.take("max_tokens", &mut c.max_tokens)?;
        kv.take("update_freq", &mut c.update_freq)?;
        kv.take("patience", &mut c.patience)?;
        kv.take("valid_every", &mut c.valid_every)?;
        kv.take("max_epochs", &mut c.max_epochs)?;
        kv.take("max_steps", &mut c.max_steps)?;
        c.mix_sent_ratio = match kv.get("mix_sent_ratio") {
            None | Some("auto") => None,
            Some(_) => Some(kv.require("mix_sent_ratio")?),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 {
            return Err(Error::Config("train.warmup_steps must be at least 1".into()));
        }
        if let Some(r) = self.mix_sent_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("train.mix_sent_ratio {r} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("train.label_smoothing must be in [0, 1)".into()));
        }
        if self.update_freq == 0 || self.valid_every == 0 || self.max_tokens == 0 {
            return Err(Error::Config("train.update_freq, valid_every and max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// `D^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr(step: usize, d_model: usize, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

/// Adam with β = (0.9, 0.98), ε = 1e-9.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub const BETA1: f32 = 0.9;
    pub const BETA2: f32 = 0.98;
    pub const EPS: f32 = 1e-9;

    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam { t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        let lr = lr as f32;
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = Self::BETA1 * m[k] + (1.0 - Self::BETA1) * g[k];
                v[k] = Self::BETA2 * v[k] + (1.0 - Self::BETA2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }

    fn save(&self, params: &ParamStore<f32>, ck: &mut Checkpoint) {
        for (i, (name, t)) in params.iter().enumerate() {
            ck.push_raw(format!("adam.m.{name}"), t.shape(), self.m[i].clone());
            ck.push_raw(format!("adam.v.{name}"), t.shape(), self.v[i].clone());
        }
    }

    fn load(params: &ParamStore<f32>, ck: &Checkpoint, t: usize) -> Result<Self> {
        let mut a = Adam::new(params);
        a.t = t;
        for (i, (name, _)) in params.iter().enumerate() {
            a.m[i] = ck.tensor::<f32>(&format!("adam.m.{name}"))?.into_data();
            a.v[i] = ck.tensor::<f32>(&format!("adam.v.{name}"))?.into_data();
        }
        Ok(a)
    }
}

/// Groups instances of similar length into batches under a token budget.
/// Lengths are jittered by up to ±10% before sorting so the grouping
/// varies between epochs; batch order is shuffled.
pub fn make_batches<R: Rng>(instances: &[TrainingInstance], max_tokens: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut keyed: Vec<(f64, usize)> = instances
        .iter()
        .enumerate()
        .map(|(i, x)| (x.tokens() as f64 * rng.random_range(0.9..1.1), i))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for (_, i) in keyed {
        let t = instances[i].tokens();
        if !cur.is_empty() && used + t > max_tokens {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += t;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    batches
}

#[derive(Clone, Debug)]
struct Pool {
    instances: Vec<TrainingInstance>,
    epoch: usize,
    cursor: usize,
    batches: Vec<Vec<usize>>,
}

impl Pool {
    fn new(instances: Vec<TrainingInstance>) -> Self {
        Pool {
            instances,
            epoch: 0,
            cursor: 0,
            batches: Vec::new(),
        }
    }

    fn tokens(&self) -> usize {
        self.instances.iter().map(TrainingInstance::tokens).sum()
    }

    fn epoch_batches(&mut self, seed: u64, id: u64, max_tokens: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba7c);
        rng.set_stream((id << 32) | self.epoch as u64);
        self.batches = make_batches(&self.instances, max_tokens, &mut rng);
    }

    fn next(&mut self, seed: u64, id: u64, max_tokens: usize) -> Vec<usize> {
        if self.batches.is_empty() {
            self.epoch_batches(seed, id, max_tokens);
        }
        if self.cursor == self.batches.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.epoch_batches(seed, id, max_tokens);
        }
        self.cursor += 1;
        self.batches[self.cursor - 1].clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,lr,train_loss,valid_loss\n");
    for r in rows {
        let v = r.valid_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.step, r.lr, r.train_loss, v);
    }
    s
}

/// Per-token negative log-likelihood (no smoothing) over a set of
/// instances, with dropout off.
pub fn evaluate_loss(model: &Seq2SeqModel<f32>, instances: &[TrainingInstance]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for inst in instances {
        let (_, loss) = model.forward_teacher_forced(&inst.src, &inst.tgt, 0.0, None)?;
        let n = inst.tgt.len() - 1;
        total += loss as f64 * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Empty("validation set"));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_valid: f64,
    pub last_valid: f64,
    pub stopped_early: bool,
}

/// Owns the model and every piece of state needed to continue training
/// bit-identically after a checkpoint round trip.
pub struct Trainer {
    run: RunConfig,
    model: Seq2SeqModel<f32>,
    adam: Adam,
    step: usize,
    pools: [Pool; 2],
    valid: Vec<TrainingInstance>,
    best_valid: Option<f64>,
    best_params: Option<ParamStore<f32>>,
    bad: usize,
    sampled: [usize; 2],
    metrics: Vec<MetricRow>,
}

impl Trainer {
    /// `train` is the main pool (its mode decides the run); `sent` is the
    /// optional sentence pool mixed in per micro-batch.
    pub fn new(
        run: RunConfig,
        train: Vec<TrainingInstance>,
        sent: Vec<TrainingInstance>,
        valid: Vec<TrainingInstance>,
    ) -> Result<Self> {
        run.train.validate()?;
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if valid.is_empty() {
            return Err(Error::Empty("validation set"));
        }
        for inst in train.iter().chain(&sent).chain(&valid) {
            if inst.tgt.len() < 2 {
                return Err(Error::Contract(format!("instance from {} has no target", inst.doc_id)));
            }
        }
        let model = Seq2SeqModel::new(run.model.clone(), run.seed)?;
        let adam = Adam::new(model.params());
        Ok(Trainer {
            run,
            model,
            adam,
            step: 0,
            pools: [Pool::new(train), Pool::new(sent)],
            valid,
            best_valid: None,
            best_params: None,
            bad: 0,
            sampled: [0, 0],
            metrics: Vec::new(),
        })
    }

    pub fn model(&self) -> &Seq2SeqModel<f32> {
        &self.model
    }

    pub fn into_model(self) -> Seq2SeqModel<f32> {
        self.model
    }

    /// Best-validation parameters if any validation has run, else current.
    pub fn best_model(&self) -> Result<Seq2SeqModel<f32>> {
        match &self.best_params {
            Some(p) => Seq2SeqModel::from_params(self.run.model.clone(), p.clone()),
            None => Ok(self.model.clone()),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    /// Micro-batches drawn from the main and sentence pools so far.
    pub fn sampled(&self) -> [usize; 2] {
        self.sampled
    }

    pub fn config(&self) -> &RunConfig {
        &self.run
    }

    pub fn mix_ratio(&self) -> f64 {
        if self.pools[1].instances.is_empty() {
            return 0.0;
        }
        self.run.train.mix_sent_ratio.unwrap_or_else(|| {
            let s = self.pools[1].tokens() as f64;
            s / (s + self.pools[0].tokens() as f64)
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.run.train.lr_scale * lr(self.step.max(1), self.run.model.d_model, self.run.train.warmup_steps)
    }

    /// One optimizer update over `update_freq` micro-batches. Returns the
    /// token-weighted mean training loss.
    pub fn train_step(&mut self) -> Result<f64> {
        self.step += 1;
        let seed = self.run.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self.step as u64);
        let ratio = self.mix_ratio();
        let max_tokens = self.run.train.max_tokens;
        let mut picked: Vec<(usize, usize)> = Vec::new();
        for _ in 0..self.run.train.update_freq {
            let pool = usize::from(rng.random::<f64>() < ratio);
            self.sampled[pool] += 1;
            for i in self.pools[pool].next(seed, pool as u64, max_tokens) {
                picked.push((pool, i));
            }
        }
        let total: usize = picked.iter().map(|&(p, i)| self.pools[p].instances[i].tgt.len() - 1).sum();
        let mut grads: Vec<Vec<f32>> = self.model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let mut loss_sum = 0.0;
        let smoothing = self.run.train.label_smoothing;
        let p_drop = self.run.model.dropout;
        for &(p, i) in &picked {
            let inst = &self.pools[p].instances[i];
            let n = inst.tgt.len() - 1;
            let mut g = Graph::new();
            let b = self.model.params().bind(&mut g);
            let mut drop = Dropout::on(p_drop, ChaCha8Rng::from_rng(&mut rng));
            let out = self.model.forward_graph(&mut g, &b, &inst.src, &inst.tgt, smoothing, None, &mut drop)?;
            let loss = g.scalar(out.loss);
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    provenance: format!("{} sentences {:?}", inst.doc_id, inst.sentences),
                });
            }
            loss_sum += loss as f64 * n as f64;
            g.backward(out.loss)?;
            let w = n as f32 / total as f32;
            for (id, gr) in g.param_grads() {
                for (a, &x) in grads[id.index()].iter_mut().zip(gr) {
                    *a += w * x;
                }
            }
        }
        let lr = self.current_lr();
        self.adam.step(self.model.params_mut(), &grads, lr);
        Ok(loss_sum / total as f64)
    }

    pub fn validate(&self) -> Result<f64> {
        evaluate_loss(&self.model, &self.valid)
    }

    fn record_validation(&mut self, v: f64) {
        if self.best_valid.is_none_or(|b| v < b) {
            self.best_valid = Some(v);
            self.best_params = Some(self.model.params().clone());
            self.bad = 0;
        } else {
            self.bad += 1;
        }
    }

    fn done(&self) -> bool {
        let t = &self.run.train;
        (t.max_steps > 0 && self.step >= t.max_steps) || self.pools[0].epoch >= t.max_epochs
    }

    /// Trains until the step or epoch limit or until `patience`
    /// validations pass without improvement. With `out`, writes
    /// `metrics.csv`, `checkpoint_last.bin` and `checkpoint_best.bin`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainSummary> {
        let mut stopped_early = false;
        let mut last_valid = None;
        while !self.done() {
            let loss = self.train_step()?;
            let mut row = MetricRow {
                step: self.step,
                lr: self.current_lr(),
                train_loss: loss,
                valid_loss: None,
            };
            last_valid = None;
            if self.step.is_multiple_of(self.run.train.valid_every) {
                let v = self.validate()?;
                self.record_validation(v);
                row.valid_loss = Some(v);
                last_valid = Some(v);
                log::info!("step {} train {loss:.4} valid {v:.4}", self.step);
            }
            self.metrics.push(row);
            if self.bad >= self.run.train.patience.max(1) {
                stopped_early = true;
                break;
            }
        }
        let last_valid = match last_valid {
            Some(v) => v,
            None => {
                let v = self.validate()?;
                self.record_validation(v);
                if let Some(r) = self.metrics.last_mut() {
                    r.valid_loss = Some(v);
                }
                v
            }
        };
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display(), e))?;
            let p = dir.join("metrics.csv");
            std::fs::write(&p, metrics_csv(&self.metrics)).map_err(|e| Error::io(p.display(), e))?;
            self.checkpoint().write(&dir.join("checkpoint_last.bin"))?;
            let best = Checkpoint::from_model(&self.best_model()?, self.run.to_kv());
            best.write(&dir.join("checkpoint_best.bin"))?;
        }
        Ok(TrainSummary {
            steps: self.step,
            best_valid: self.best_valid.unwrap_or(last_valid),
            last_valid,
            stopped_early,
        })
    }

    /// Full training state: run config, counters, parameters and Adam
    /// moments.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut h = self.run.to_kv();
        h.set("state.step", self.step);
        h.set("state.adam_t", self.adam.t);
        for (i, p) in self.pools.iter().enumerate() {
            h.set(format!("state.pool{i}.epoch"), p.epoch);
            h.set(format!("state.pool{i}.cursor"), p.cursor);
            h.set(format!("state.pool{i}.sampled"), self.sampled[i]);
        }
        if let Some(b) = self.best_valid {
            h.set("state.best_valid", b);
        }
        h.set("state.bad", self.bad);
        let mut ck = Checkpoint::from_model(&self.model, h);
        self.adam.save(self.model.params(), &mut ck);
        ck
    }

    /// Continues from [`Trainer::checkpoint`] output with the same data.
    pub fn resume(
        ck: &Checkpoint,
        train: Vec<TrainingInstance>,
        sent: Vec<TrainingInstance>,
        valid: Vec<TrainingInstance>,
    ) -> Result<Self> {
        let run = RunConfig::from_kv(&ck.header.without("state"))?;
        let mut t = Trainer::new(run, train, sent, valid)?;
        let state = ck.header.section("state");
        t.model = ck.to_model()?;
        t.step = state.require("step")?;
        t.adam = Adam::load(t.model.params(), ck, state.require("adam_t")?)?;
        for i in 0..2 {
            // batches for the stored epoch are regenerated on first use
            t.pools[i].epoch = state.require(&format!("pool{i}.epoch"))?;
            t.pools[i].cursor = state.require(&format!("pool{i}.cursor"))?;
            t.sampled[i] = state.require(&format!("pool{i}.sampled"))?;
        }
        t.best_valid = match state.get("best_valid") {
            Some(_) => Some(state.require("best_valid")?),
            None => None,
        };
        t.bad = state.require("bad")?;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_crossover_and_paper_value() {
        let at = lr(4000, 512, 4000);
        assert!((at - 512f64.powf(-0.5) * 4000f64.powf(-0.5)).abs() < 1e-15);
        assert!((at - 6.988e-4).abs() < 1e-6);
        let mut prev = 0.0;
        for s in 1..=4000 {
            let v = lr(s, 512, 4000);
            assert!(v > prev);
            prev = v;
        }
        assert!(lr(4001, 512, 4000) < at);
    }

    #[test]
    fn config_round_trip() {
        let c = TrainConfig {
            mix_sent_ratio: Some(0.25),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert_eq!(TrainConfig::from_kv(&TrainConfig::default().to_kv()).unwrap(), TrainConfig::default());
        let mut kv = c.to_kv();
        kv.set("mix_sent_ratio", 1.5);
        assert!(TrainConfig::from_kv(&kv).is_err());
        kv.set("mix_sent_ratio", 0.5);
        kv.set("warmup_steps", 0);
        assert!(TrainConfig::from_kv(&kv).is_err());
    }

    use crate::pipeline::Mode;

    fn inst(len: usize) -> TrainingInstance {
        TrainingInstance {
            mode: Mode::Sent,
            src: vec![2; len],
            tgt: vec![2; len],
            doc_id: String::new(),
            sentences: 0..1,
        }
    }

    #[test]
    fn batches_cover_everything_once_under_budget() {
        let xs: Vec<_> = (1..40).map(inst).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = make_batches(&xs, 100, &mut rng);
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..39).collect::<Vec<_>>());
        for batch in &b {
            let used: usize = batch.iter().map(|&i| xs[i].tokens()).sum();
            assert!(used <= 100 || batch.len() == 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", crate::tensor::Tensor::from_fn(&[3], |i| i as f32));
        let before = store.clone();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[vec![0.0; 3]], 0.1);
        assert_eq!(store.get(store.ids().next().unwrap()).data(), before.get(before.ids().next().unwrap()).data());
        adam.step(&mut store, &[vec![1.0, 0.0, 0.0]], 0.1);
        assert_ne!(store.get(store.ids().next().unwrap()).data()[0], 0.0);
    }
}
