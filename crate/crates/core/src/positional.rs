//! Absolute sinusoidal position embeddings and the learned relative-position
//! table.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{self, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Fixed sinusoid table, `table[p, 2i] = sin(p / 10000^(2i/dim))` and
/// `table[p, 2i+1] = cos(p / 10000^(2i/dim))`. Positions start at 0.
#[derive(Clone, Debug)]
pub struct SinusoidalTable<T> {
    max_len: usize,
    dim: usize,
    table: Tensor<T>,
}

impl<T: Real> SinusoidalTable<T> {
    pub fn new(max_len: usize, dim: usize) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "sinusoidal embedding dimension must be even and positive, got {dim}"
            )));
        }
        if max_len == 0 {
            return Err(Error::Config("sinusoidal table needs max_len >= 1".into()));
        }
        let table = Tensor::from_fn(&[max_len, dim], |idx| {
            let (p, c) = (idx / dim, idx % dim);
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
            T::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() })
        });
        Ok(SinusoidalTable { max_len, dim, table })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }

    pub fn row(&self, p: usize) -> &[T] {
        self.table.row(p)
    }

    /// Rows `start..start + n`, flattened.
    pub fn rows(&self, start: usize, n: usize) -> Result<&[T]> {
        if start + n > self.max_len {
            return Err(Error::Length {
                len: start + n,
                max: self.max_len,
            });
        }
        Ok(&self.table.data()[start * self.dim..(start + n) * self.dim])
    }

    /// Constant `[n × dim]` graph node holding positions `start..start + n`.
    pub fn constant<'a>(&'a self, g: &mut Graph<'a, T>, start: usize, n: usize) -> Result<Var> {
        let rows = self.rows(start, n)?;
        Ok(g.constant_ref(&[n, self.dim], rows))
    }
}

/// Learned embeddings for signed distances `−max_len..=max_len`; row `r`
/// holds distance `r − max_len`. The distance range is not clipped.
#[derive(Clone, Copy, Debug)]
pub struct RelativeTable {
    max_len: usize,
    head_dim: usize,
    param: ParamId,
}

impl RelativeTable {
    /// Registers a `(2·max_len + 1) × head_dim` table drawn from
    /// `N(0, head_dim^-1/2)`.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        max_len: usize,
        head_dim: usize,
    ) -> Self {
        let init = params::normal(rng, &[2 * max_len + 1, head_dim], (head_dim as f64).powf(-0.5));
        let param = store.add("rel", init);
        RelativeTable {
            max_len,
            head_dim,
            param,
        }
    }

    /// Wraps an existing parameter.
    pub fn from_param<T: Real>(store: &ParamStore<T>, param: ParamId) -> Result<Self> {
        let shape = store.get(param).shape();
        if shape.len() != 2 || shape[0].is_multiple_of(2) {
            return Err(Error::format(
                "relative table",
                format!("expected [(2L+1) x d], got {shape:?}"),
            ));
        }
        Ok(RelativeTable {
            max_len: (shape[0] - 1) / 2,
            head_dim: shape[1],
            param,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn param(&self) -> ParamId {
        self.param
    }

    pub fn num_params(&self) -> usize {
        (2 * self.max_len + 1) * self.head_dim
    }

    /// Table row index for a signed distance `i − j`.
    pub fn row_index(&self, distance: isize) -> Option<usize> {
        let r = distance + self.max_len as isize;
        (0..=2 * self.max_len as isize).contains(&r).then_some(r as usize)
    }
}

/// `S_rel[h, i, j] = q[h, i, :] · R[(i + q_offset) − j + max_len, :]` for
/// `n_keys` keys at absolute positions `0..n_keys`.
pub fn relative_logits<T: Real>(
    g: &mut Graph<'_, T>,
    q_heads: Var,
    table: Var,
    rel: &RelativeTable,
    q_offset: usize,
    n_keys: usize,
) -> Result<Var> {
    let nq = g.shape(q_heads).get(1).copied().unwrap_or(0);
    let longest = n_keys.max(q_offset + nq);
    if longest > rel.max_len {
        return Err(Error::Length {
            len: longest,
            max: rel.max_len,
        });
    }
    g.relative_logits(q_heads, table, q_offset, n_keys)
}
