//! Encoder-decoder transformer with configurable position-aware attention.

pub mod beam;
pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttendInputs, AttentionFlags, AttentionParams, Mask};
use crate::config::KvText;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{self, Bound, ParamId, ParamStore};
use crate::positional::{RelativeTable, SinusoidalTable};
use crate::tensor::{Real, Tensor};

pub use beam::{beam_search, greedy_decode, BeamConfig, Hypothesis, StepScorer};
pub use checkpoint::Checkpoint;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub dropout: f64,
    /// Longest sequence on either side; also the relative table's reach.
    pub max_len: usize,
    pub vocab_size: usize,
    pub flags: AttentionFlags,
    pub share_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 64,
            ffn_dim: 256,
            n_heads: 4,
            dropout: 0.3,
            max_len: 512,
            vocab_size: 0,
            flags: AttentionFlags::full(),
            share_embeddings: true,
        }
    }
}

impl ModelConfig {
    const KEYS: [&'static str; 10] = [
        "n_enc_layers",
        "n_dec_layers",
        "d_model",
        "ffn_dim",
        "n_heads",
        "dropout",
        "max_len",
        "vocab_size",
        "flags",
        "share_embeddings",
    ];

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config("d_model must be even".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.max_len == 0 || self.n_enc_layers == 0 || self.n_dec_layers == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layer counts, ffn_dim and max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("n_enc_layers", self.n_enc_layers);
        kv.set("n_dec_layers", self.n_dec_layers);
        kv.set("d_model", self.d_model);
        kv.set("ffn_dim", self.ffn_dim);
        kv.set("n_heads", self.n_heads);
        kv.set("dropout", self.dropout);
        kv.set("max_len", self.max_len);
        kv.set("vocab_size", self.vocab_size);
        kv.set("flags", self.flags);
        kv.set("share_embeddings", self.share_embeddings);
        kv
    }

    pub fn from_kv(kv: &KvText) -> Result<Self> {
        kv.ensure_known("model", &Self::KEYS)?;
        let mut c = ModelConfig::default();
        kv.take("n_enc_layers", &mut c.n_enc_layers)?;
        kv.take("n_dec_layers", &mut c.n_dec_layers)?;
        kv.take("d_model", &mut c.d_model)?;
        kv.take("ffn_dim", &mut c.ffn_dim)?;
        kv.take("n_heads", &mut c.n_heads)?;
        kv.take("dropout", &mut c.dropout)?;
        kv.take("max_len", &mut c.max_len)?;
        kv.take("vocab_size", &mut c.vocab_size)?;
        kv.take("flags", &mut c.flags)?;
        kv.take("share_embeddings", &mut c.share_embeddings)?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    self_attn: AttentionParams,
    ln1: Norm,
    ffn: FeedForward,
    ln2: Norm,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    self_attn: AttentionParams,
    ln1: Norm,
    cross: AttentionParams,
    ln2: Norm,
    ffn: FeedForward,
    ln3: Norm,
}

/// Dropout policy for one forward pass. Without an RNG dropout is off.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn on(p: f64, rng: ChaCha8Rng) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    fn apply<T: Real>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self.rng.as_mut() {
            Some(rng) if self.p > 0.0 => g.dropout(x, self.p, rng),
            _ => x,
        }
    }
}

/// Output of a teacher-forced pass.
pub struct TeacherForced {
    pub logits: Var,
    pub loss: Var,
}

/// Shared-vocabulary sequence-to-sequence transformer with post-norm
/// residual blocks.
#[derive(Clone, Debug)]
pub struct Seq2SeqModel<T: Real> {
    cfg: ModelConfig,
    params: ParamStore<T>,
    sinusoid: SinusoidalTable<T>,
    rel: Option<RelativeTable>,
    embed: ParamId,
    out_proj: Option<ParamId>,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
}

struct Builder<'s, T: Real> {
    store: &'s mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{name}.gain"), Tensor::from_fn(&[d], |_| T::one())),
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, f: usize) -> FeedForward {
        FeedForward {
            w1: self.store.add(format!("{name}.w1"), params::xavier(&mut self.rng, d, f)),
            b1: self.store.add(format!("{name}.b1"), Tensor::zeros(&[f])),
            w2: self.store.add(format!("{name}.w2"), params::xavier(&mut self.rng, f, d)),
            b2: self.store.add(format!("{name}.b2"), Tensor::zeros(&[d])),
        }
    }
}

fn find<T: Real>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .find(name)
        .ok_or_else(|| Error::format("parameter set", format!("missing {name}")))
}

impl<T: Real> Seq2SeqModel<T> {
    /// Freshly initialized model; all randomness comes from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (d, f, h) = (cfg.d_model, cfg.ffn_dim, cfg.n_heads);
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let embed = b
            .store
            .add("embed", params::normal(&mut b.rng, &[cfg.vocab_size, d], (d as f64).powf(-0.5)));
        let out_proj = (!cfg.share_embeddings).then(|| {
            b.store
                .add("out_proj", params::normal(&mut b.rng, &[cfg.vocab_size, d], (d as f64).powf(-0.5)))
        });
        let rel = cfg
            .flags
            .rel_self
            .then(|| RelativeTable::new(b.store, &mut b.rng, cfg.max_len, cfg.head_dim()));
        let mut enc = Vec::new();
        for l in 0..cfg.n_enc_layers {
            let p = format!("enc.{l}");
            let self_attn = AttentionParams::new(b.store, &mut b.rng, &format!("{p}.self"), d, h)?;
            let ln1 = b.norm(&format!("{p}.ln1"), d);
            let ffn = b.ffn(&format!("{p}.ffn"), d, f);
            let ln2 = b.norm(&format!("{p}.ln2"), d);
            enc.push(EncoderLayer {
                self_attn,
                ln1,
                ffn,
                ln2,
            });
        }
        let mut dec = Vec::new();
        for l in 0..cfg.n_dec_layers {
            let p = format!("dec.{l}");
            let self_attn = AttentionParams::new(b.store, &mut b.rng, &format!("{p}.self"), d, h)?;
            let ln1 = b.norm(&format!("{p}.ln1"), d);
            let cross = AttentionParams::new(b.store, &mut b.rng, &format!("{p}.cross"), d, h)?;
            let ln2 = b.norm(&format!("{p}.ln2"), d);
            let ffn = b.ffn(&format!("{p}.ffn"), d, f);
            let ln3 = b.norm(&format!("{p}.ln3"), d);
            dec.push(DecoderLayer {
                self_attn,
                ln1,
                cross,
                ln2,
                ffn,
                ln3,
            });
        }
        Ok(Seq2SeqModel {
            sinusoid: SinusoidalTable::new(cfg.max_len, d)?,
            cfg,
            params: store,
            rel,
            embed,
            out_proj,
            enc,
            dec,
        })
    }

    /// Rebuilds a model around an existing parameter set, locating every
    /// tensor by name and checking shapes against `cfg`.
    pub fn from_params(cfg: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let fresh = Seq2SeqModel::<T>::new(cfg.clone(), 0)?;
        if fresh.params.len() != store.len() {
            return Err(Error::format(
                "parameter set",
                format!("expected {} tensors, found {}", fresh.params.len(), store.len()),
            ));
        }
        for (name, t) in fresh.params.iter() {
            let id = find(&store, name)?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::format(
                    "parameter set",
                    format!("{name}: expected shape {:?}, found {:?}", t.shape(), store.get(id).shape()),
                ));
            }
        }
        let norm = |p: &str| -> Result<Norm> {
            Ok(Norm {
                gain: find(&store, &format!("{p}.gain"))?,
                bias: find(&store, &format!("{p}.bias"))?,
            })
        };
        let ffn = |p: &str| -> Result<FeedForward> {
            Ok(FeedForward {
                w1: find(&store, &format!("{p}.w1"))?,
                b1: find(&store, &format!("{p}.b1"))?,
                w2: find(&store, &format!("{p}.w2"))?,
                b2: find(&store, &format!("{p}.b2"))?,
            })
        };
        let h = cfg.n_heads;
        let enc = (0..cfg.n_enc_layers)
            .map(|l| {
                let p = format!("enc.{l}");
                Ok(EncoderLayer {
                    self_attn: AttentionParams::find(&store, &format!("{p}.self"), h)?,
                    ln1: norm(&format!("{p}.ln1"))?,
                    ffn: ffn(&format!("{p}.ffn"))?,
                    ln2: norm(&format!("{p}.ln2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dec = (0..cfg.n_dec_layers)
            .map(|l| {
                let p = format!("dec.{l}");
                Ok(DecoderLayer {
                    self_attn: AttentionParams::find(&store, &format!("{p}.self"), h)?,
                    ln1: norm(&format!("{p}.ln1"))?,
                    cross: AttentionParams::find(&store, &format!("{p}.cross"), h)?,
                    ln2: norm(&format!("{p}.ln2"))?,
                    ffn: ffn(&format!("{p}.ffn"))?,
                    ln3: norm(&format!("{p}.ln3"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rel = match cfg.flags.rel_self {
            true => Some(RelativeTable::from_param(&store, find(&store, "rel")?)?),
            false => None,
        };
        Ok(Seq2SeqModel {
            sinusoid: SinusoidalTable::new(cfg.max_len, cfg.d_model)?,
            embed: find(&store, "embed")?,
            out_proj: if cfg.share_embeddings {
                None
            } else {
                Some(find(&store, "out_proj")?)
            },
            cfg,
            params: store,
            rel,
            enc,
            dec,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn relative_table(&self) -> Option<&RelativeTable> {
        self.rel.as_ref()
    }

    pub fn sinusoid(&self) -> &SinusoidalTable<T> {
        &self.sinusoid
    }

    pub fn embedding_param(&self) -> ParamId {
        self.embed
    }

    /// Same weights in another precision.
    pub fn cast<U: Real>(&self) -> Result<Seq2SeqModel<U>> {
        Seq2SeqModel::from_params(self.cfg.clone(), self.params.cast())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > self.cfg.max_len {
            return Err(Error::Length {
                len: n,
                max: self.cfg.max_len,
            });
        }
        if n == 0 {
            return Err(Error::Contract("empty token sequence".into()));
        }
        Ok(())
    }

    /// `E[tok]·√D + PE[offset..]`.
    fn embed<'a>(&'a self, g: &mut Graph<'a, T>, b: &Bound, tokens: &[usize], offset: usize) -> Result<Var> {
        let e = g.embedding(b[self.embed], tokens)?;
        let e = g.scale(e, T::lit(self.cfg.d_model as f64).sqrt());
        let pe = self.sinusoid.constant(g, offset, tokens.len())?;
        g.add(e, pe)
    }

    fn norm(g: &mut Graph<'_, T>, b: &Bound, n: Norm, x: Var) -> Result<Var> {
        g.layer_norm(x, b[n.gain], b[n.bias], LN_EPS)
    }

    fn feed_forward(g: &mut Graph<'_, T>, b: &Bound, f: FeedForward, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = g.matmul(x, b[f.w1])?;
        let h = g.add_row(h, b[f.b1])?;
        let h = g.relu(h);
        let h = drop.apply(g, h);
        let o = g.matmul(h, b[f.w2])?;
        g.add_row(o, b[f.b2])
    }

    fn rel_arg<'r>(&'r self, b: &Bound) -> Option<(&'r RelativeTable, Var)> {
        self.rel.as_ref().map(|r| (r, b[r.param()]))
    }

    /// Encoder pass on the graph. Returns the embedded input (layer 0,
    /// before dropout) followed by every layer's output.
    pub fn encode_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        b: &Bound,
        src: &[usize],
        drop: &mut Dropout,
    ) -> Result<Vec<Var>> {
        self.check_len(src.len())?;
        let n = src.len();
        let layer0 = self.embed(g, b, src, 0)?;
        let pos = self.sinusoid.constant(g, 0, n)?;
        let mut states = vec![layer0];
        let mut h = drop.apply(g, layer0);
        for layer in &self.enc {
            let p = self.cfg.flags.pos_self_src.then_some(pos);
            let inputs = AttendInputs {
                h_q: h,
                h_kv: h,
                pos_q: p,
                pos_kv: p,
                rel: self.rel_arg(b),
            };
            let a = crate::attention::attend(g, b, &layer.self_attn, inputs, &Mask::none())?;
            let a = drop.apply(g, a);
            let x = g.add(h, a)?;
            let x = Self::norm(g, b, layer.ln1, x)?;
            let f = Self::feed_forward(g, b, layer.ffn, x, drop)?;
            let f = drop.apply(g, f);
            let y = g.add(x, f)?;
            h = Self::norm(g, b, layer.ln2, y)?;
            states.push(h);
        }
        Ok(states)
    }

    fn decode_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        b: &Bound,
        enc_out: Var,
        tgt_in: &[usize],
        drop: &mut Dropout,
    ) -> Result<Var> {
        self.check_len(tgt_in.len())?;
        let t = tgt_in.len();
        let s = g.shape(enc_out)[0];
        let emb = self.embed(g, b, tgt_in, 0)?;
        let pos_t = self.sinusoid.constant(g, 0, t)?;
        let pos_s = self.sinusoid.constant(g, 0, s)?;
        let flags = self.cfg.flags;
        let mut h = drop.apply(g, emb);
        for layer in &self.dec {
            let p = flags.pos_self_tgt.then_some(pos_t);
            let inputs = AttendInputs {
                h_q: h,
                h_kv: h,
                pos_q: p,
                pos_kv: p,
                rel: self.rel_arg(b),
            };
            let a = crate::attention::attend(g, b, &layer.self_attn, inputs, &Mask::causal())?;
            let a = drop.apply(g, a);
            let x = g.add(h, a)?;
            let x = Self::norm(g, b, layer.ln1, x)?;
            let inputs = AttendInputs {
                h_q: x,
                h_kv: enc_out,
                pos_q: flags.pos_cross.then_some(pos_t),
                pos_kv: flags.pos_cross.then_some(pos_s),
                rel: None,
            };
            let c = crate::attention::attend(g, b, &layer.cross, inputs, &Mask::none())?;
            let c = drop.apply(g, c);
            let y = g.add(x, c)?;
            let y = Self::norm(g, b, layer.ln2, y)?;
            let f = Self::feed_forward(g, b, layer.ffn, y, drop)?;
            let f = drop.apply(g, f);
            let z = g.add(y, f)?;
            h = Self::norm(g, b, layer.ln3, z)?;
        }
        let proj = self.out_proj.unwrap_or(self.embed);
        g.matmul_t(h, b[proj], false, true)
    }

    /// Teacher-forced pass over a full target `<sos> … <eos>`: the decoder
    /// reads `tgt[..n-1]` and is scored on `tgt[1..]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_graph<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        b: &Bound,
        src: &[usize],
        tgt: &[usize],
        smoothing: f64,
        pad: Option<usize>,
        drop: &mut Dropout,
    ) -> Result<TeacherForced> {
        if tgt.len() < 2 {
            return Err(Error::Contract(
                "target needs at least a start token and one token to predict".into(),
            ));
        }
        let enc = self.encode_graph(g, b, src, drop)?;
        let top = *enc.last().expect("at least one layer");
        let logits = self.decode_graph(g, b, top, &tgt[..tgt.len() - 1], drop)?;
        let loss = g.label_smoothed_nll(logits, &tgt[1..], smoothing, pad)?;
        Ok(TeacherForced { logits, loss })
    }

    /// Per-layer encoder states for probing; dropout is off.
    pub fn encode(&self, src: &[usize]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let states = self.encode_graph(&mut g, &b, src, &mut Dropout::off())?;
        Ok(states.into_iter().map(|v| g.tensor(v)).collect())
    }

    /// Teacher-forced logits `[T × V]` and loss without recording gradients
    /// into the model.
    pub fn forward_teacher_forced(&self, src: &[usize], tgt: &[usize], smoothing: f64, pad: Option<usize>) -> Result<(Tensor<T>, T)> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let out = self.forward_graph(&mut g, &b, src, tgt, smoothing, pad, &mut Dropout::off())?;
        Ok((g.tensor(out.logits), g.scalar(out.loss)))
    }

    // ---- incremental decoding ----

    /// Runs the encoder and precomputes every layer's cross-attention keys
    /// and values.
    pub fn start_decoding(&self, src: &[usize]) -> Result<DecoderCache<T>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let states = self.encode_graph(&mut g, &b, src, &mut Dropout::off())?;
        let enc_out = *states.last().expect("at least one layer");
        let s = src.len();
        let pos_s = self.sinusoid.constant(&mut g, 0, s)?;
        let mut layers = Vec::with_capacity(self.dec.len());
        for layer in &self.dec {
            let k_in = if self.cfg.flags.pos_cross {
                g.add(enc_out, pos_s)?
            } else {
                enc_out
            };
            let k = layer.cross.keys(&mut g, &b, k_in)?;
            let v = layer.cross.values(&mut g, &b, enc_out)?;
            layers.push(LayerCache {
                self_k: Vec::new(),
                self_v: Vec::new(),
                cross_k: g.value(k).to_vec(),
                cross_v: g.value(v).to_vec(),
            });
        }
        Ok(DecoderCache {
            src_len: s,
            steps: 0,
            layers,
        })
    }

    /// Feeds `token` at the next target position and returns log-probabilities
    /// for the following token. Keys cached for earlier steps keep the
    /// absolute positions they were computed at.
    pub fn decode_step(&self, cache: &mut DecoderCache<T>, token: usize) -> Result<Vec<T>> {
        let t = cache.steps;
        if t >= self.cfg.max_len {
            return Err(Error::Length {
                len: t + 1,
                max: self.cfg.max_len,
            });
        }
        let d = self.cfg.d_model;
        let flags = self.cfg.flags;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let mut h = self.embed(&mut g, &b, &[token], t)?;
        let pos_t = self.sinusoid.constant(&mut g, t, 1)?;
        for (layer, lc) in self.dec.iter().zip(cache.layers.iter_mut()) {
            let qk_in = if flags.pos_self_tgt { g.add(h, pos_t)? } else { h };
            let q = layer.self_attn.queries(&mut g, &b, qk_in)?;
            let k_new = layer.self_attn.keys(&mut g, &b, qk_in)?;
            let v_new = layer.self_attn.values(&mut g, &b, h)?;
            lc.self_k.extend_from_slice(g.value(k_new));
            lc.self_v.extend_from_slice(g.value(v_new));
            let k_all = g.constant(&[t + 1, d], lc.self_k.clone());
            let v_all = g.constant(&[t + 1, d], lc.self_v.clone());
            let a = layer
                .self_attn
                .combine(&mut g, &b, q, k_all, v_all, self.rel_arg(&b), &Mask::none(), t)?;
            let x = g.add(h, a)?;
            let x = Self::norm(&mut g, &b, layer.ln1, x)?;
            let q_in = if flags.pos_cross { g.add(x, pos_t)? } else { x };
            let q = layer.cross.queries(&mut g, &b, q_in)?;
            let k = g.constant(&[cache.src_len, d], lc.cross_k.clone());
            let v = g.constant(&[cache.src_len, d], lc.cross_v.clone());
            let c = layer.cross.combine(&mut g, &b, q, k, v, None, &Mask::none(), t)?;
            let y = g.add(x, c)?;
            let y = Self::norm(&mut g, &b, layer.ln2, y)?;
            let f = Self::feed_forward(&mut g, &b, layer.ffn, y, &mut Dropout::off())?;
            let z = g.add(y, f)?;
            h = Self::norm(&mut g, &b, layer.ln3, z)?;
        }
        let proj = self.out_proj.unwrap_or(self.embed);
        let logits = g.matmul_t(h, b[proj], false, true)?;
        cache.steps += 1;
        Ok(log_softmax(g.value(logits)))
    }
}

fn log_softmax<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    x.iter().map(|&v| v - lse).collect()
}

#[derive(Clone, Debug)]
struct LayerCache<T> {
    self_k: Vec<T>,
    self_v: Vec<T>,
    cross_k: Vec<T>,
    cross_v: Vec<T>,
}

/// Per-hypothesis decoder state for incremental generation.
#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    src_len: usize,
    steps: usize,
    layers: Vec<LayerCache<T>>,
}

impl<T> DecoderCache<T> {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }
}
