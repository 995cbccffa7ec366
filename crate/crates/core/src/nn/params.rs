//! Named parameter store, gradients, initialization and the weights file.
//!
//! Weights file layout (little-endian):
//!
//! ```text
//! "GUIW" | version: u32 = 1 | count: u32
//! count x { name_len: u16 | name: utf-8 | rank: u8 | extents: u32[rank] | payload: f32[] }
//! ```
//!
//! Adam moments are stored as `__m.<name>` and `__v.<name>`, the step
//! counter as the one-element tensor `__t`.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::rng::SplitMix64;
use crate::tensor::{check_shape, NnError, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"GUIW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("corrupt weights: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    /// LSTM bias packed `[i, f, g, o]`: zeros except the forget block at 1.
    LstmBias { hidden: usize },
}

impl Init {
    pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), init }
    }
}

/// Parameters plus Adam state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams<F = f32> {
    pub tensors: BTreeMap<String, Tensor<F>>,
    pub m: BTreeMap<String, Tensor<F>>,
    pub v: BTreeMap<String, Tensor<F>>,
    pub t: u64,
}

/// Gradients keyed like [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grads<F = f32> {
    pub tensors: BTreeMap<String, Tensor<F>>,
}

/// Draws every parameter in spec order from one SplitMix64 stream.
pub fn init_params<F: Scalar>(specs: &[ParamSpec], seed: u64) -> ModelParams<F> {
    let mut rng = SplitMix64::new(seed);
    let mut params = ModelParams::default();
    for spec in specs {
        let mut t = Tensor::zeros(&spec.shape);
        match spec.init {
            Init::Glorot { fan_in, fan_out } => {
                let a = Init::glorot_bound(fan_in, fan_out);
                for x in t.data_mut() {
                    *x = F::of(a * (2.0 * rng.next_f64() - 1.0));
                }
            }
            Init::Zeros => {}
            Init::LstmBias { hidden } => {
                t.data_mut()[hidden..2 * hidden].iter_mut().for_each(|x| *x = F::one());
            }
        }
        params.insert(&spec.name, t);
    }
    params
}

impl<F: Scalar> ModelParams<F> {
    pub fn insert(&mut self, name: &str, t: Tensor<F>) {
        self.m.insert(name.to_string(), Tensor::zeros(t.shape()));
        self.v.insert(name.to_string(), Tensor::zeros(t.shape()));
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>, NnError> {
        self.tensors.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>, NnError> {
        self.tensors.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads<F> {
        Grads {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let conv = |map: &BTreeMap<String, Tensor<F>>| map.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        ModelParams { tensors: conv(&self.tensors), m: conv(&self.m), v: conv(&self.v), t: self.t }
    }

    /// Checks that every spec'd parameter exists with the right shape.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<(), NnError> {
        for spec in specs {
            check_shape("params", &spec.shape, self.get(&spec.name)?.shape())?;
        }
        Ok(())
    }
}

impl<F: Scalar> Grads<F> {
    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("no gradient slot for `{name}`"))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.get(name)
    }

    /// `self += other`, visiting names in sorted order.
    pub fn accumulate(&mut self, other: &Grads<F>) -> Result<(), NnError> {
        for (name, g) in &other.tensors {
            match self.tensors.get_mut(name) {
                Some(t) => t.add_assign(g)?,
                None => {
                    self.tensors.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: F) {
        self.tensors.values_mut().for_each(|t| t.scale(factor));
    }

    /// Euclidean norm over all entries, summed in `f64` in name order.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| {
                let x = x.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(F::of(max_norm / norm));
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl ModelParams<f32> {
    /// Serializes parameters, then first moments, then second moments (each
    /// in name order), then `__t`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = self.tensors.len() + self.m.len() + self.v.len() + 1;
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_tensor(&mut out, name, t.shape(), t.data());
        }
        for (name, t) in &self.m {
            put_tensor(&mut out, &format!("__m.{name}"), t.shape(), t.data());
        }
        for (name, t) in &self.v {
            put_tensor(&mut out, &format!("__v.{name}"), t.shape(), t.data());
        }
        put_tensor(&mut out, "__t", &[1], &[self.t as f32]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(WeightsError::Corrupt("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(WeightsError::Corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut params = ModelParams::default();
        let mut t = None;
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| WeightsError::Corrupt("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| WeightsError::Corrupt("tensor too large".into()))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let tensor = Tensor::from_vec(&shape, data).expect("payload sized from shape");
            if name == "__t" {
                t = Some(tensor.data().first().copied().unwrap_or(0.0) as u64);
            } else if let Some(base) = name.strip_prefix("__m.") {
                params.m.insert(base.to_string(), tensor);
            } else if let Some(base) = name.strip_prefix("__v.") {
                params.v.insert(base.to_string(), tensor);
            } else {
                params.tensors.insert(name, tensor);
            }
        }
        if r.pos != bytes.len() {
            return Err(WeightsError::Corrupt("trailing bytes".into()));
        }
        params.t = t.unwrap_or(0);
        for (name, tensor) in &params.tensors {
            for moments in [&mut params.m, &mut params.v] {
                let slot = moments.entry(name.clone()).or_insert_with(|| Tensor::zeros(tensor.shape()));
                if slot.shape() != tensor.shape() {
                    return Err(WeightsError::Corrupt(format!("moment shape mismatch for `{name}`")));
                }
            }
        }
        if params.m.len() != params.tensors.len() || params.v.len() != params.tensors.len() {
            return Err(WeightsError::Corrupt("moments without a matching parameter".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightsError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeightsError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| WeightsError::Corrupt("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WeightsError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
