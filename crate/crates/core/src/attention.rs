//! Multi-head attention with optional absolute-position-aware query/key
//! inputs and relative-position logits.
//!
//! All variants share one computation:
//!
//! ```text
//! Q = (H_q [+ P_q]) W_Q     K = (H_kv [+ P_kv]) W_K     V = H_kv W_V
//! out = concat_h softmax((Q_h K_hᵀ [+ Q_h Rᵀ]) / √d_head) V_h · W_O
//! ```
//!
//! Position embeddings only touch queries and keys; values and the residual
//! stream never see them.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{self, Bound, ParamId, ParamStore};
use crate::positional::{self, RelativeTable};
use crate::tensor::Real;

/// Independent toggles for each position-aware component. All on is the
/// full position-aware model; all off is the vanilla transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttentionFlags {
    pub pos_self_src: bool,
    pub pos_self_tgt: bool,
    pub pos_cross: bool,
    pub rel_self: bool,
}

impl AttentionFlags {
    pub const NAMES: [&'static str; 4] = ["pos_self_src", "pos_self_tgt", "pos_cross", "rel_self"];

    pub fn full() -> Self {
        AttentionFlags {
            pos_self_src: true,
            pos_self_tgt: true,
            pos_cross: true,
            rel_self: true,
        }
    }

    pub fn vanilla() -> Self {
        AttentionFlags {
            pos_self_src: false,
            pos_self_tgt: false,
            pos_cross: false,
            rel_self: false,
        }
    }

    fn slots(&self) -> [bool; 4] {
        [self.pos_self_src, self.pos_self_tgt, self.pos_cross, self.rel_self]
    }
}

impl Default for AttentionFlags {
    fn default() -> Self {
        Self::full()
    }
}

/// Comma-separated list of enabled flags; `none` when all are off.
impl fmt::Display for AttentionFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = Self::NAMES
            .iter()
            .zip(self.slots())
            .filter_map(|(n, on)| on.then_some(*n))
            .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join(","))
        }
    }
}

impl FromStr for AttentionFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut flags = AttentionFlags::vanilla();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            match name {
                "pos_self_src" => flags.pos_self_src = true,
                "pos_self_tgt" => flags.pos_self_tgt = true,
                "pos_cross" => flags.pos_cross = true,
                "rel_self" => flags.rel_self = true,
                "none" | "vanilla" => {}
                "all" | "full" => flags = AttentionFlags::full(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown attention flag `{other}` (expected one of {})",
                        Self::NAMES.join(", ")
                    )))
                }
            }
        }
        Ok(flags)
    }
}

/// Which key positions each query may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    None,
    Causal,
    Padding,
    CausalPadding,
}

/// Attention mask for one sequence. Keys at or beyond `valid_keys` are
/// padding; under a causal mask a query at absolute position `p` sees keys
/// `0..=p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mask {
    pub kind: MaskKind,
    pub valid_keys: usize,
}

impl Mask {
    pub fn none() -> Self {
        Mask {
            kind: MaskKind::None,
            valid_keys: usize::MAX,
        }
    }

    pub fn causal() -> Self {
        Mask {
            kind: MaskKind::Causal,
            valid_keys: usize::MAX,
        }
    }

    pub fn padding(valid_keys: usize) -> Self {
        Mask {
            kind: MaskKind::Padding,
            valid_keys,
        }
    }

    pub fn causal_padding(valid_keys: usize) -> Self {
        Mask {
            kind: MaskKind::CausalPadding,
            valid_keys,
        }
    }

    fn is_causal(&self) -> bool {
        matches!(self.kind, MaskKind::Causal | MaskKind::CausalPadding)
    }

    fn is_padded(&self) -> bool {
        matches!(self.kind, MaskKind::Padding | MaskKind::CausalPadding)
    }

    /// Row-major `[n_queries × n_keys]` flags, `true` where masked.
    pub fn build(&self, n_queries: usize, n_keys: usize, q_offset: usize) -> Result<Option<Arc<Vec<bool>>>> {
        if self.kind == MaskKind::None {
            return Ok(None);
        }
        if self.is_padded() && self.valid_keys > n_keys {
            return Err(Error::shape(
                "attention mask",
                &[self.valid_keys],
                &[n_queries, n_keys],
            ));
        }
        let mut m = vec![false; n_queries * n_keys];
        for a in 0..n_queries {
            for j in 0..n_keys {
                m[a * n_keys + j] = (self.is_causal() && j > a + q_offset)
                    || (self.is_padded() && j >= self.valid_keys);
            }
        }
        Ok(Some(Arc::new(m)))
    }
}

/// Projection weights of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub n_heads: usize,
    pub d_model: usize,
}

impl AttentionParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "model dimension {d_model} is not divisible by {n_heads} heads"
            )));
        }
        let mut w = |name: &str| store.add(format!("{prefix}.{name}"), params::xavier(rng, d_model, d_model));
        Ok(AttentionParams {
            w_q: w("w_q"),
            w_k: w("w_k"),
            w_v: w("w_v"),
            w_o: w("w_o"),
            n_heads,
            d_model,
        })
    }

    /// Looks up `{prefix}.w_q` etc. in an existing store.
    pub fn find<T: Real>(store: &ParamStore<T>, prefix: &str, n_heads: usize) -> Result<Self> {
        let get = |name: &str| {
            store
                .find(&format!("{prefix}.{name}"))
                .ok_or_else(|| Error::format("parameter set", format!("missing {prefix}.{name}")))
        };
        let w_q = get("w_q")?;
        let d_model = store.get(w_q).shape()[0];
        Ok(AttentionParams {
            w_q,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            w_o: get("w_o")?,
            n_heads,
            d_model,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn check_input<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Result<usize> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.d_model {
            return Err(Error::shape("attention input", s, &[self.d_model]));
        }
        Ok(s[0])
    }

    /// `x·W_Q`
    pub fn queries<T: Real>(&self, g: &mut Graph<'_, T>, b: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        g.matmul(x, b[self.w_q])
    }

    pub fn keys<T: Real>(&self, g: &mut Graph<'_, T>, b: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        g.matmul(x, b[self.w_k])
    }

    pub fn values<T: Real>(&self, g: &mut Graph<'_, T>, b: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        g.matmul(x, b[self.w_v])
    }

    /// Scaled dot-product attention over already-projected `[I × D]` queries,
    /// keys and values, followed by the output projection. The queries sit
    /// at absolute positions `q_offset..`, the keys at `0..`.
    #[allow(clippy::too_many_arguments)]
    pub fn combine<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        b: &Bound,
        q: Var,
        k: Var,
        v: Var,
        rel: Option<(&RelativeTable, Var)>,
        mask: &Mask,
        q_offset: usize,
    ) -> Result<Var> {
        let weights = self.weights(g, q, k, rel, mask, q_offset)?;
        let vh = g.split_heads(v, self.n_heads)?;
        let ctx = g.matmul(weights, vh)?;
        let merged = g.merge_heads(ctx)?;
        g.matmul(merged, b[self.w_o])
    }

    /// Per-head attention distribution `[heads × I_q × I_k]`.
    pub fn weights<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        q: Var,
        k: Var,
        rel: Option<(&RelativeTable, Var)>,
        mask: &Mask,
        q_offset: usize,
    ) -> Result<Var> {
        let nq = g.shape(q)[0];
        let nk = g.shape(k)[0];
        let qh = g.split_heads(q, self.n_heads)?;
        let kh = g.split_heads(k, self.n_heads)?;
        let mut logits = g.matmul_t(qh, kh, false, true)?;
        if let Some((table, var)) = rel {
            if table.head_dim() != self.head_dim() {
                return Err(Error::shape(
                    "relative table",
                    &[table.head_dim()],
                    &[self.head_dim()],
                ));
            }
            let s_rel = positional::relative_logits(g, qh, var, table, q_offset, nk)?;
            logits = g.add(logits, s_rel)?;
        }
        let scaled = g.scale(logits, T::one() / T::lit(self.head_dim() as f64).sqrt());
        match mask.build(nq, nk, q_offset)? {
            Some(m) => g.masked_softmax(scaled, &m),
            None => g.softmax(scaled, 2),
        }
    }
}

/// Inputs to one attention call. `pos_q`/`pos_kv` are added to the query
/// and key inputs only.
#[derive(Clone, Copy, Debug)]
pub struct AttendInputs<'r> {
    pub h_q: Var,
    pub h_kv: Var,
    pub pos_q: Option<Var>,
    pub pos_kv: Option<Var>,
    pub rel: Option<(&'r RelativeTable, Var)>,
}

fn with_position<T: Real>(g: &mut Graph<'_, T>, h: Var, p: Option<Var>) -> Result<Var> {
    let Some(p) = p else { return Ok(h) };
    let n = g.shape(h)[0];
    let (pn, pd) = {
        let s = g.shape(p);
        (s[0], s.get(1).copied().unwrap_or(0))
    };
    if pd != g.shape(h)[1] {
        return Err(Error::shape("position embeddings", g.shape(p), g.shape(h)));
    }
    if pn < n {
        return Err(Error::Length { len: n, max: pn });
    }
    let p = g.slice_rows(p, 0, n)?;
    g.add(h, p)
}

/// General entry point behind the named variants below.
pub fn attend<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    params: &AttentionParams,
    inputs: AttendInputs<'_>,
    mask: &Mask,
) -> Result<Var> {
    let q_in = with_position(g, inputs.h_q, inputs.pos_q)?;
    let k_in = if inputs.h_q == inputs.h_kv && inputs.pos_q == inputs.pos_kv {
        q_in
    } else {
        with_position(g, inputs.h_kv, inputs.pos_kv)?
    };
    let q = params.queries(g, b, q_in)?;
    let k = params.keys(g, b, k_in)?;
    let v = params.values(g, b, inputs.h_kv)?;
    params.combine(g, b, q, k, v, inputs.rel, mask, 0)
}

/// `Softmax((H_q W_Q)(H_kv W_K)ᵀ/√d) H_kv W_V`, self-attention when
/// `h_q == h_kv`.
pub fn attend_vanilla<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    params: &AttentionParams,
    h_q: Var,
    h_kv: Var,
    mask: &Mask,
) -> Result<Var> {
    let inputs = AttendInputs {
        h_q,
        h_kv,
        pos_q: None,
        pos_kv: None,
        rel: None,
    };
    attend(g, b, params, inputs, mask)
}

/// Self-attention with queries and keys computed from `H + P`.
pub fn attend_pos_self<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    params: &AttentionParams,
    h: Var,
    p: Var,
    mask: &Mask,
) -> Result<Var> {
    let inputs = AttendInputs {
        h_q: h,
        h_kv: h,
        pos_q: Some(p),
        pos_kv: Some(p),
        rel: None,
    };
    attend(g, b, params, inputs, mask)
}

/// Cross-attention with queries from `H_t + P_t` and keys from `H_s + P_s`.
#[allow(clippy::too_many_arguments)]
pub fn attend_pos_cross<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    params: &AttentionParams,
    h_t: Var,
    h_s: Var,
    p_t: Var,
    p_s: Var,
    mask: &Mask,
) -> Result<Var> {
    let inputs = AttendInputs {
        h_q: h_t,
        h_kv: h_s,
        pos_q: Some(p_t),
        pos_kv: Some(p_s),
        rel: None,
    };
    attend(g, b, params, inputs, mask)
}

/// Self-attention with relative-position logits added before scaling.
pub fn attend_rel_self<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    params: &AttentionParams,
    h: Var,
    rel: (&RelativeTable, Var),
    mask: &Mask,
) -> Result<Var> {
    let inputs = AttendInputs {
        h_q: h,
        h_kv: h,
        pos_q: None,
        pos_kv: None,
        rel: Some(rel),
    };
    attend(g, b, params, inputs, mask)
}

/// Position-aware self-attention plus relative logits computed from the
/// position-aware queries.
pub fn attend_pos_rel_self<T: Real>(
    g: &mut Graph<'_, T>,
    b: &Bound,
    params: &AttentionParams,
    h: Var,
    p: Var,
    rel: (&RelativeTable, Var),
    mask: &Mask,
) -> Result<Var> {
    let inputs = AttendInputs {
        h_q: h,
        h_kv: h,
        pos_q: Some(p),
        pos_kv: Some(p),
        rel: Some(rel),
    };
    attend(g, b, params, inputs, mask)
}
