//! Named parameter tensors, the `VQHP` checkpoint format and the Adam
//! optimizer.
//!
//! Checkpoint layout (little-endian): magic `VQHP`, `u16` version, `u32`
//! layer count, then per layer `u16` name length, UTF-8 name, `u8` rank,
//! `rank × u32` dims and the `f32` data; a trailing CRC-32 covers everything
//! before it.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire::{Reader, Writer};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"VQHP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, slot)) => *slot = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::ModelMismatch(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameters whose name starts with `prefix`, prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Adds every parameter of `other` under `prefix`.
    pub fn merge(&mut self, prefix: &str, other: &ParamSet) {
        for (n, t) in &other.entries {
            self.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    pub fn round_to_f32(&mut self) {
        for (_, t) in &mut self.entries {
            t.round_to_f32();
        }
    }

    /// Registers every tensor as a tape leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self.entries.iter().map(|(n, t)| (n.clone(), tape.leaf(t.clone()))).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u32(self.entries.len() as u32);
        for (name, t) in &self.entries {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u8(t.shape().len() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                w.f32(v as f32);
            }
        }
        let crc = crc32fast::hash(w.as_slice());
        w.u32(crc);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedData {
                offset: 0,
                needed: 4,
                available: bytes.len(),
            });
        }
        let mut r = Reader::new(bytes);
        let magic = r.array4()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let body_end = bytes.len().checked_sub(4).ok_or(Error::TruncatedData {
            offset: bytes.len(),
            needed: 4,
            available: 0,
        })?;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let count = r.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::CorruptStream("parameter name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f32().map(|v| v as f64)).collect::<Result<Vec<_>>>()?;
            set.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if r.position() != body_end {
            return Err(Error::CorruptStream("trailing bytes in checkpoint".into()));
        }
        Ok(set)
    }
}

/// Tape handles for a [`ParamSet`], in the same order.
pub struct ParamVars {
    vars: Vec<(String, Var)>,
}

impl ParamVars {
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter {name} not on tape"))
    }

    /// Gradients aligned with the parameter set (zeros where unreached).
    pub fn grads(&self, g: &Gradients, params: &ParamSet) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(params.iter())
            .map(|((_, v), (_, t))| g.get_or_zeros(*v, t))
            .collect()
    }
}

/// He-style initialization for a `[Co, Ci, k, k]` conv plus zero bias.
pub fn init_conv(params: &mut ParamSet, name: &str, co: usize, ci: usize, k: usize, rng: &mut impl Rng) {
    let std = (2.0 / (ci * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let w = (0..co * ci * k * k).map(|_| normal.sample(rng)).collect();
    params.insert(format!("{name}.w"), Tensor::from_vec(&[co, ci, k, k], w).unwrap());
    params.insert(format!("{name}.b"), Tensor::zeros(&[co]));
}

pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    groups: Vec<(String, f64)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            groups: Vec::new(),
        }
    }

    /// Scales the learning rate of parameters whose name contains `pattern`.
    pub fn with_group(mut self, pattern: &str, factor: f64) -> Self {
        self.groups.push((pattern.to_string(), factor));
        self
    }

    fn lr_for(&self, name: &str) -> f64 {
        self.groups
            .iter()
            .filter(|(p, _)| name.contains(p.as_str()))
            .fold(self.lr, |lr, (_, f)| lr * f)
    }

    /// Applies one update. Parameters named in `frozen` are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], frozen: &dyn Fn(&str) -> bool) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (name, t)) in params.entries.iter_mut().enumerate() {
            if frozen(name) {
                continue;
            }
            let lr = self.lr_for(name);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, g), m), v) in t
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}
