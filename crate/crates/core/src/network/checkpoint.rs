//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PLNTCKPT"
//! version  u32
//! dtype    str      "f32" | "f64"
//! rng      u64      generator state
//! step     u64      optimizer steps taken
//! meta     u32 count, then (str key, str value) pairs
//! tensors  u32 count, then (str name, u32 ndim, u64 dims…, raw data)
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8. Tensor data is `numel`
//! scalars of the file's dtype.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::layers::LayerSpec;
use crate::network::SequentialModel;
use crate::optim::{OptimState, Optimizer, Slot};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PLNTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub rng_state: u64,
    pub step: u64,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

#[derive(Serialize, Deserialize)]
struct Architecture {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
}

pub(crate) fn bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub(crate) fn unbits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| CheckpointError::Malformed(format!("bad float bits `{s}`")).into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                needed: n,
                offset: self.at,
                len: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("non-UTF-8 string".into()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(rng_state: u64, step: u64) -> Self {
        Self {
            rng_state,
            step,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, T::NAME);
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Element type recorded in a checkpoint, without decoding the rest.
    pub fn precision_of(bytes: &[u8]) -> Result<String> {
        let mut r = Reader { bytes, at: 0 };
        Self::header(&mut r)
    }

    fn header(r: &mut Reader) -> Result<String> {
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            }
            .into());
        }
        Ok(r.str()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let dtype = Self::header(&mut r)?;
        if dtype != T::NAME {
            return Err(CheckpointError::Precision {
                found: dtype,
                expected: T::NAME.into(),
            }
            .into());
        }
        let rng_state = r.u64()?;
        let step = r.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            meta.insert(k, v);
        }
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape
                    .push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Malformed("extent overflow".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(T::BYTES).map(|b| (n, b)))
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor `{name}` size overflows")))?;
            let raw = r.take(numel.1)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.at != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.at)).into());
        }
        Ok(Self {
            rng_state,
            step,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.into()).into())
    }

    /// Tensor `name`, which must have the given shape.
    pub fn tensor_shaped(&self, name: &str, expected: &[usize]) -> Result<&Tensor<T>> {
        let t = self.tensor(name)?;
        if t.shape() != expected {
            return Err(CheckpointError::Shape {
                name: name.into(),
                found: t.shape().to_vec(),
                expected: expected.to_vec(),
            }
            .into());
        }
        Ok(t)
    }

    pub fn put(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CheckpointError::Missing(format!("meta `{key}`")).into())
    }

    pub fn meta_parse<V: FromStr>(&self, key: &str) -> Result<V> {
        let s = self.meta_str(key)?;
        s.parse()
            .map_err(|_| CheckpointError::Malformed(format!("meta `{key}` = `{s}`")).into())
    }

    /// Records the architecture and every parameter as `param/layer{i}.{name}`.
    pub fn put_model(&mut self, model: &SequentialModel<T>) -> Result<()> {
        let arch = Architecture {
            input_shape: model.input_shape().to_vec(),
            layers: model.specs(),
        };
        let text = toml::to_string(&arch).map_err(|e| Error::Config(format!("cannot encode architecture: {e}")))?;
        self.meta.insert("architecture".into(), text);
        for (name, p) in model.named_params() {
            self.put(format!("param/{name}"), p.value.clone());
        }
        Ok(())
    }

    /// Copies parameters into an existing model; the first tensor that is
    /// missing or mis-shaped is reported by name.
    pub fn load_model_params(&self, model: &mut SequentialModel<T>) -> Result<()> {
        let mut values = Vec::new();
        for (name, p) in model.named_params() {
            values.push(self.tensor_shaped(&format!("param/{name}"), p.value.shape())?.clone());
        }
        model.set_param_values(&values)
    }

    /// Rebuilds the model recorded by [`Self::put_model`].
    pub fn model(&self) -> Result<SequentialModel<T>> {
        let arch: Architecture = toml::from_str(self.meta_str("architecture")?)
            .map_err(|e| CheckpointError::Malformed(format!("architecture: {e}")))?;
        let mut m = SequentialModel::from_specs(&arch.layers, &arch.input_shape)?;
        self.load_model_params(&mut m)?;
        Ok(m)
    }

    pub fn put_optimizer(&mut self, opt: &Optimizer<T>) {
        let st = opt.state();
        self.meta.insert("optim.kind".into(), opt.kind().to_string());
        self.meta.insert("optim.step".into(), st.step.to_string());
        self.meta.insert("optim.lr".into(), bits(opt.learning_rate()));
        self.meta.insert("optim.slots".into(), st.slots.len().to_string());
        for (i, s) in st.slots.iter().enumerate() {
            self.put(format!("optim/{i}/first"), s.first.clone());
            if let Some(v) = &s.second {
                self.put(format!("optim/{i}/second"), v.clone());
            }
        }
    }

    pub fn load_optimizer(&self, opt: &mut Optimizer<T>) -> Result<()> {
        let kind: String = self.meta_parse("optim.kind")?;
        if kind != opt.kind().as_str() {
            return Err(CheckpointError::Malformed(format!(
                "checkpoint optimizer is {kind}, trainer uses {}",
                opt.kind()
            ))
            .into());
        }
        let n: usize = self.meta_parse("optim.slots")?;
        let mut slots = Vec::with_capacity(n);
        for i in 0..n {
            let first = self.tensor(&format!("optim/{i}/first"))?.clone();
            let second = self.tensor(&format!("optim/{i}/second")).ok().cloned();
            slots.push(Slot { first, second });
        }
        opt.set_state(OptimState {
            slots,
            step: self.meta_parse("optim.step")?,
        });
        opt.set_learning_rate(unbits(self.meta_str("optim.lr")?)?)
    }
}
