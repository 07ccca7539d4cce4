//! Minimal dense numeric substrate: parameter tensors, a reverse-mode tape,
//! masked softmax, sinusoidal positional encodings, Adam, and a
//! finite-difference gradient checker.

mod tape;

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tape::{NodeId, Tape};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("all entries masked")]
    AllMasked,
    #[error("positional encoding dimension {0} must be even")]
    OddDimension(usize),
    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,
    #[error("non-finite gradient in tensor {0:?}; update rejected")]
    NonFiniteGrad(String),
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
}

/// A named, flat-stored tensor with a gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of parameter tensors. Tensor order is the registration
/// order, which keeps checkpoints and updates deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor initialised uniformly in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`
    /// where `fan_in` is the trailing dimension.
    pub fn add(&mut self, name: &str, shape: &[usize], rng: &mut ChaCha12Rng) -> ParamId {
        let len: usize = shape.iter().product();
        let fan_in = *shape.last().expect("shape must be nonempty") as f64;
        let bound = 1.0 / fan_in.sqrt();
        let values = (0..len)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.push(name, shape, values)
    }

    /// Registers a zero-initialised tensor.
    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let len: usize = shape.iter().product();
        self.push(name, shape, vec![0.0; len])
    }

    fn push(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> ParamId {
        assert!(
            self.id(name).is_none(),
            "duplicate tensor name {name:?}"
        );
        let grad = vec![0.0; values.len()];
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
            grad,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn tensor(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Serializable view: tensor name -> (shape, flat values).
    pub fn to_doc(&self) -> BTreeMap<String, TensorDoc> {
        self.tensors
            .iter()
            .map(|t| {
                (
                    t.name.clone(),
                    TensorDoc {
                        shape: t.shape.clone(),
                        values: t.values.clone(),
                    },
                )
            })
            .collect()
    }

    /// Loads values into already-registered tensors by name.
    pub fn load_doc(&mut self, doc: &BTreeMap<String, TensorDoc>) -> Result<(), NnError> {
        for t in &mut self.tensors {
            let entry = doc
                .get(&t.name)
                .ok_or_else(|| NnError::UnknownTensor(t.name.clone()))?;
            if entry.shape != t.shape {
                return Err(NnError::ShapeMismatch(format!(
                    "tensor {}: stored shape {:?} vs expected {:?}",
                    t.name, entry.shape, t.shape
                )));
            }
            t.values.clone_from(&entry.values);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDoc {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Shared softmax kernel: masked entries get probability exactly 0; unmasked
/// logits are max-shifted before exponentiation.
pub(crate) fn softmax_kernel(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, NnError> {
    if logits.len() != mask.len() {
        return Err(NnError::ShapeMismatch(format!(
            "softmax: logits length {} vs mask length {}",
            logits.len(),
            mask.len()
        )));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NnError::AllMasked);
    }
    let mut out = vec![0.0; logits.len()];
    let mut z = 0.0;
    for (i, (&v, &m)) in logits.iter().zip(mask).enumerate() {
        if m {
            let e = (v - max).exp();
            out[i] = e;
            z += e;
        }
    }
    for o in &mut out {
        *o /= z;
    }
    Ok(out)
}

/// Masked softmax over a plain logits slice. Masked entries get probability
/// exactly 0; the rest are positive and sum to 1.
pub fn softmax_normalize(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, NnError> {
    softmax_kernel(logits, mask)
}

/// Sinusoidal positional encoding: entry `2i` is `sin(t / 10000^(2i/dim))`,
/// entry `2i+1` the matching cosine.
pub fn positional_encoding(t: usize, dim: usize) -> Result<Vec<f64>, NnError> {
    if dim % 2 != 0 {
        return Err(NnError::OddDimension(dim));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let rate = 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = t as f64 / rate;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    Ok(out)
}

/// Adam optimizer with bias correction over one [`ParamSet`].
///
/// `step` consumes and zeroes the accumulated gradients. A non-finite
/// gradient anywhere rejects the whole update before touching any tensor.
/// An optional global-norm clip keeps policy-gradient spikes from blowing
/// up saturated softmax heads.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_clip(lr: f64, clip_norm: f64) -> Self {
        Self {
            clip_norm: Some(clip_norm),
            ..Self::new(lr)
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), NnError> {
        for t in params.iter() {
            if t.grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGrad(t.name.clone()));
            }
        }
        if let Some(limit) = self.clip_norm {
            let norm: f64 = params
                .iter()
                .map(|t| t.grad.iter().map(|g| g * g).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > limit {
                let scale = limit / norm;
                for t in &mut params.tensors {
                    t.grad.iter_mut().for_each(|g| *g *= scale);
                }
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = params.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (ti, t) in params.tensors.iter_mut().enumerate() {
            for k in 0..t.values.len() {
                let g = t.grad[k];
                let m = &mut self.m[ti][k];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.v[ti][k];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                t.values[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            lr: self.lr,
            clip_norm: self.clip_norm,
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn restore(state: &AdamState) -> Self {
        Self {
            lr: state.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: state.clip_norm,
            step: state.step,
            m: state.m.clone(),
            v: state.v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Compares tape gradients of a scalar function against central finite
/// differences. Returns the max over all parameter entries of
/// `|g_tape - g_fd| / max(1, |g_fd|)`.
///
/// `f` must rebuild the same forward computation on every call (fixed inputs,
/// fixed sampled outcomes) and return the scalar loss node.
pub fn grad_check<F>(params: &mut ParamSet, perturbation: f64, mut f: F) -> Result<f64, NnError>
where
    F: FnMut(&ParamSet, &mut Tape) -> Result<NodeId, NnError>,
{
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = f(params, &mut tape)?;
    tape.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|t| t.grad.clone()).collect();
    params.zero_grads();

    let mut eval = |params: &ParamSet| -> Result<f64, NnError> {
        let mut tape = Tape::new();
        let loss = f(params, &mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut max_rel: f64 = 0.0;
    for ti in 0..params.len() {
        for k in 0..params.tensor(ParamId(ti)).len() {
            let orig = params.tensor(ParamId(ti)).values[k];
            params.tensor_mut(ParamId(ti)).values[k] = orig + perturbation;
            let plus = eval(params)?;
            params.tensor_mut(ParamId(ti)).values[k] = orig - perturbation;
            let minus = eval(params)?;
            params.tensor_mut(ParamId(ti)).values[k] = orig;
            let fd = (plus - minus) / (2.0 * perturbation);
            let rel = (analytic[ti][k] - fd).abs() / fd.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Convenience: a fresh deterministic generator.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
