//! Named parameter storage, freezing, initialization and the binary
//! checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//! `b"PDPS"`, version `u32`, count `u32`, then per parameter in sorted path
//! order: path length `u32`, UTF-8 path, rank `u32`, `rank` dims as `u32`, and
//! the `f64` payload.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDPS";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameter gradients keyed by dotted path.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// All learnable tensors of a model, keyed by dotted path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    frozen: BTreeSet<String>,
}

fn prefix_matches(prefix: &str, path: &str) -> bool {
    path == prefix
        || (path.starts_with(prefix)
            && (prefix.ends_with('.') || path.as_bytes().get(prefix.len()) == Some(&b'.')))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::Validation(format!("parameter '{path}' registered twice")));
        }
        self.params.insert(path, t);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.params.get_mut(path)
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor> {
        self.get(path)
            .ok_or_else(|| Error::Lookup(format!("parameter '{path}' not in store")))
    }

    /// Overwrites the values of an existing parameter, keeping its shape.
    pub fn set_values(&mut self, path: &str, values: &[f64]) -> Result<()> {
        let t = self
            .params
            .get_mut(path)
            .ok_or_else(|| Error::Lookup(format!("parameter '{path}' not in store")))?;
        if t.len() != values.len() {
            return Err(Error::Dimension(format!(
                "parameter '{path}' has {} values, got {}",
                t.len(),
                values.len()
            )));
        }
        t.values_mut().copy_from_slice(values);
        Ok(())
    }

    /// Sorted iteration over `(path, tensor)`.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Freezes every parameter whose path equals `prefix` or continues it at a
    /// dot boundary (`"det"` freezes `"det.x"` but not `"detail"`).
    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.frozen.insert(prefix.into());
    }

    pub fn set_frozen<I, S>(&mut self, prefixes: I)
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.frozen = prefixes.into_iter().map(Into::into).collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn frozen_prefixes(&self) -> impl Iterator<Item = &String> {
        self.frozen.iter()
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.frozen.iter().any(|p| prefix_matches(p, path))
    }

    /// Sorted paths of trainable parameters.
    pub fn trainable_paths(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|p| !self.is_frozen(p))
            .cloned()
            .collect()
    }

    /// Copies every parameter under `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (path, t) in other.iter().filter(|(p, _)| prefix_matches(prefix, p)) {
            let dst = self
                .params
                .get_mut(path)
                .ok_or_else(|| Error::Lookup(format!("parameter '{path}' not in store")))?;
            if dst.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "parameter '{path}' shape {:?} differs from {:?}",
                    dst.shape(),
                    t.shape()
                )));
            }
            dst.values_mut().copy_from_slice(t.values());
        }
        Ok(())
    }

    /// Little-endian bytes of every parameter under `prefix`, in path order.
    pub fn prefix_bytes(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for (path, t) in self.params.iter().filter(|(p, _)| prefix_matches(prefix, p)) {
            out.extend_from_slice(path.as_bytes());
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    // ---- initialization -------------------------------------------------

    /// Registers a `[fan_in, fan_out]` weight with Xavier-uniform init and a
    /// zero bias under `"{path}.w"` / `"{path}.b"`.
    pub fn init_linear(&mut self, path: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.init_uniform(&format!("{path}.w"), &[fan_in, fan_out], bound, rng)?;
        self.insert(format!("{path}.b"), Tensor::zeros(&[fan_out]))
    }

    /// Linear layer with He-uniform init, for layers followed by GELU.
    pub fn init_linear_he(&mut self, path: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let bound = (6.0 / fan_in as f64).sqrt();
        self.init_uniform(&format!("{path}.w"), &[fan_in, fan_out], bound, rng)?;
        self.insert(format!("{path}.b"), Tensor::zeros(&[fan_out]))
    }

    pub fn init_uniform(&mut self, path: &str, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let n: usize = shape.iter().product();
        let vals = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(path, Tensor::new(shape.to_vec(), vals)?)
    }

    /// Gaussian via Box-Muller, `std` standard deviation.
    pub fn init_normal(&mut self, path: &str, shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let n: usize = shape.iter().product();
        let vals = (0..n).map(|_| std * standard_normal(rng)).collect();
        self.insert(path, Tensor::new(shape.to_vec(), vals)?)
    }

    pub fn init_layer_norm(&mut self, path: &str, width: usize) -> Result<()> {
        self.insert(format!("{path}.gamma"), Tensor::full(&[width], 1.0))?;
        self.insert(format!("{path}.beta"), Tensor::zeros(&[width]))
    }

    // ---- serialization --------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (path, t) in &self.params {
            out.extend_from_slice(&(path.len() as u32).to_le_bytes());
            out.extend_from_slice(path.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = bytes;
        let bad = |msg: &str| Error::format(origin, msg.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic, not a parameter checkpoint"));
        }
        let version = read_u32(&mut r).ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let count = read_u32(&mut r).ok_or_else(|| bad("truncated header"))?;
        let mut store = ParamStore::new();
        for i in 0..count {
            let trunc = || bad(&format!("truncated record {i}"));
            let plen = read_u32(&mut r).ok_or_else(trunc)? as usize;
            if r.len() < plen {
                return Err(trunc());
            }
            let path = std::str::from_utf8(&r[..plen])
                .map_err(|_| bad(&format!("record {i} path is not UTF-8")))?
                .to_string();
            r = &r[plen..];
            let rank = read_u32(&mut r).ok_or_else(trunc)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r).ok_or_else(trunc)? as usize);
            }
            let n: usize = shape.iter().product();
            if r.len() < n * 8 {
                return Err(trunc());
            }
            let vals = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[n * 8..];
            let t = Tensor::new(shape, vals).map_err(|e| bad(&format!("record '{path}': {e}")))?;
            store
                .insert(path, t)
                .map_err(|e| bad(&e.to_string()))?;
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after last record"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn read_u32(r: &mut &[u8]) -> Option<u32> {
    if r.len() < 4 {
        return None;
    }
    let v = u32::from_le_bytes(r[..4].try_into().ok()?);
    *r = &r[4..];
    Some(v)
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
