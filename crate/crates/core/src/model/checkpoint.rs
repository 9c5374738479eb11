//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "PATTN1" | header_len | header (key=value UTF-8) | n_records
//! then per record: name_len | name | ndim | dims… | f32 data…
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::KvText;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

use super::{ModelConfig, Seq2SeqModel};

pub const MAGIC: &[u8; 6] = b"PATTN1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: KvText,
    pub records: Vec<Record>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("checkpoint", format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::format("checkpoint", format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn utf8(&mut self, n: usize) -> Result<&'b str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::format("checkpoint", e.to_string()))
    }
}

impl Checkpoint {
    pub fn new(header: KvText) -> Self {
        Checkpoint {
            header,
            records: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.records.push(Record {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            data: tensor.data().iter().map(|v| v.as_f64() as f32).collect(),
        });
    }

    pub fn push_raw(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.records.push(Record {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self
            .get(name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing record {name}")))?;
        Tensor::new(&r.shape, r.data.iter().map(|&v| T::lit(v as f64)).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        let header = self.header.render();
        put_u32(&mut out, header.len())?;
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, self.records.len())?;
        for r in &self.records {
            if r.shape.iter().product::<usize>() != r.data.len() {
                return Err(Error::format("checkpoint", format!("record {} has inconsistent shape", r.name)));
            }
            put_u32(&mut out, r.name.len())?;
            out.extend_from_slice(r.name.as_bytes());
            put_u32(&mut out, r.shape.len())?;
            for &d in &r.shape {
                put_u32(&mut out, d)?;
            }
            out.reserve(r.data.len() * 4);
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(MAGIC.len())? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic, not a PATTN1 file"));
        }
        let hlen = c.u32()?;
        let header = KvText::parse(c.utf8(hlen)?)?;
        let n = c.u32()?;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let nl = c.u32()?;
            let name = c.utf8(nl)?.to_string();
            let nd = c.u32()?;
            let shape = (0..nd).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format("checkpoint", format!("record {name} is too large")))?;
            let bytes = c.take(count.saturating_mul(4))?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            records.push(Record { name, shape, data });
        }
        if c.pos != buf.len() {
            return Err(Error::format("checkpoint", format!("{} trailing bytes", buf.len() - c.pos)));
        }
        Ok(Checkpoint { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display(), e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path.display(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path.display(), e))?;
        Self::from_bytes(&buf)
    }

    /// Header gets the model config under `model.`; every parameter becomes
    /// a record in store order.
    pub fn from_model<T: Real>(model: &Seq2SeqModel<T>, mut header: KvText) -> Self {
        header.merge(&model.config().to_kv().prefixed("model"));
        let mut ck = Checkpoint::new(header);
        for (name, t) in model.params().iter() {
            ck.push(name, t);
        }
        ck
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_kv(&self.header.section("model"))
    }

    /// Rebuilds the model from the `model.` header and the records that
    /// name its parameters; other records (optimizer state) are ignored.
    pub fn to_model<T: Real>(&self) -> Result<Seq2SeqModel<T>> {
        let cfg = self.model_config()?;
        let template = Seq2SeqModel::<T>::new(cfg.clone(), 0)?;
        let mut store = ParamStore::new();
        for (name, _) in template.params().iter() {
            store.add(name, self.tensor(name)?);
        }
        Seq2SeqModel::from_params(cfg, store)
    }
}
