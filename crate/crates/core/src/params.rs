//! Named trainable parameters, Adam, and the binary checkpoint format.
//!
//! Checkpoint layout:
//!
//! ```text
//! [u64 LE: header length H][H bytes: UTF-8 JSON header ending in '\n'][f32 LE payload]
//! ```
//!
//! The header maps each tensor name to its shape and byte offset into the
//! payload; tensors are written in header (name) order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    m: Tensor,
    v: Tensor,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Self {
            value,
            grad: None,
            m,
            v,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, Param::new(value));
        Ok(())
    }

    /// Glorot-uniform `din×dout` weight and zero bias under `{prefix}.w` / `{prefix}.b`.
    pub fn add_linear<R: Rng + ?Sized>(&mut self, prefix: &str, din: usize, dout: usize, rng: &mut R) -> Result<()> {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        self.insert(format!("{prefix}.w"), uniform(&[din, dout], bound, rng))?;
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[dout]))
    }

    pub fn add_layer_norm(&mut self, prefix: &str, width: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::filled(&[width], 1.0))?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Records every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), tape.param(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant (no gradients tracked).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|(k, p)| (k.clone(), tape.constant(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Adds the tape's leaf gradients into each parameter's gradient slot.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound<'_>) {
        for (name, param) in &mut self.entries {
            let Some(&var) = bound.vars.get(name) else { continue };
            let g = tape.grad(var);
            match &mut param.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// One Adam update with bias correction; gradients are cleared afterwards.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if let Some((name, _)) = self.entries.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::State(format!("parameter {name} has no gradient")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for p in self.entries.values_mut() {
            let g = p.grad.take().expect("checked above");
            let (m, v, w) = (p.m.data_mut(), p.v.data_mut(), p.value.data_mut());
            for i in 0..g.len() {
                let gi = g.data()[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// Rounds every value to `f32` precision, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for p in self.entries.values_mut() {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Value-only copy with fresh optimizer state.
    pub fn snapshot(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param::new(p.value.clone())))
                .collect(),
            step: 0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = BTreeMap::new();
        let mut offset = 0usize;
        let mut payload = Vec::with_capacity(self.scalar_count() * 4);
        for (name, p) in &self.entries {
            header.insert(
                name.clone(),
                HeaderEntry {
                    shape: p.value.shape().to_vec(),
                    offset,
                },
            );
            for v in p.value.data() {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            offset += p.value.len() * 4;
        }
        let mut json = serde_json::to_string(&header).map_err(|e| Error::State(e.to_string()))?;
        json.push('\n');
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let write = |f: &mut fs::File, bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(path, e));
        write(&mut file, &(json.len() as u64).to_le_bytes())?;
        write(&mut file, json.as_bytes())?;
        write(&mut file, &payload)
    }

    /// Replaces values from a checkpoint. Every parameter must be present with
    /// a matching shape; extra tensors in the file are rejected too.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let tensors = read_checkpoint(path)?;
        for name in tensors.keys() {
            if !self.entries.contains_key(name) {
                return Err(Error::Load(format!("unexpected tensor {name} in checkpoint")));
            }
        }
        for (name, p) in &mut self.entries {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Load(format!("tensor {name} missing from checkpoint")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Load(format!(
                    "tensor {name} has shape {:?} in checkpoint, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    offset: usize,
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Load(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    if body.last() != Some(&b'\n') {
        return Err(bad("header not newline-terminated"));
    }
    let header: BTreeMap<String, HeaderEntry> =
        serde_json::from_slice(body).map_err(|e| bad(&format!("bad header json: {e}")))?;
    let payload = &bytes[8 + hlen..];
    let mut out = BTreeMap::new();
    for (name, entry) in header {
        let n: usize = entry.shape.iter().product();
        let raw = payload
            .get(entry.offset..entry.offset + 4 * n)
            .ok_or_else(|| bad(&format!("payload for {name} out of range")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.insert(name, Tensor::new(entry.shape, data)?);
    }
    Ok(out)
}

/// Parameters bound onto one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter {name} not bound")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn linear(&self, prefix: &str) -> Result<Linear<'t>> {
        Ok(Linear {
            w: self.get(&format!("{prefix}.w"))?,
            b: self.get(&format!("{prefix}.b"))?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

/// Affine layer `x·W + b` over the last dimension.
#[derive(Clone, Copy, Debug)]
pub struct Linear<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> Linear<'t> {
    pub fn forward(&self, x: Var<'t>, act: Activation) -> Result<Var<'t>> {
        let y = x.matmul(self.w)?.add_row(self.b)?;
        Ok(match act {
            Activation::Relu => y.relu(),
            Activation::Gelu => y.gelu(),
            Activation::Identity => y,
        })
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform shape")
}
