//! Parameter containers, initialization, the Adam optimizer, freezing and the
//! binary blob format used by checkpoints.

use mogan_autograd::gradcheck::{check_gradients, GradCheckReport};
use mogan_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Anything that owns trainable tensors, visited in a fixed order.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    fn parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t.clone()));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.numel());
        n
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        self.iter().for_each(|m| m.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

impl<M: Module> Module for Option<M> {
    fn visit(&self, f: &mut dyn FnMut(&Tensor)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

/// Marks every parameter as trainable.
pub fn make_trainable(m: &mut dyn Module) {
    m.visit_mut(&mut |t| *t = t.detach_param());
}

/// Rounds every parameter to `f32` and turns it into a constant, so frozen
/// networks record no graph and survive a float32 checkpoint bit-exactly.
pub fn freeze(m: &mut dyn Module) {
    m.visit_mut(&mut |t| *t = quantize(t));
}

pub fn quantize(t: &Tensor) -> Tensor {
    Tensor::new(t.data().iter().map(|&v| v as f32 as f64).collect(), t.shape())
}

/// SHA-256 of the module's blob encoding.
pub fn digest(m: &dyn Module) -> String {
    hex::encode(Sha256::digest(encode_tensors(&m.parameters())))
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Replaces the module's parameters with decoded values, checking shapes.
pub fn load_into(m: &mut dyn Module, values: Vec<(Vec<usize>, Vec<f64>)>) -> Result<()> {
    let expected = m.parameters().len();
    if values.len() != expected {
        return Err(Error::Checkpoint(format!("expected {expected} tensors, blob holds {}", values.len())));
    }
    let mut it = values.into_iter();
    let mut err = None;
    m.visit_mut(&mut |t| {
        let (shape, data) = it.next().expect("length checked");
        if shape != t.shape() {
            err.get_or_insert(Error::ShapeMismatch { expected: t.shape().to_vec(), actual: shape });
            return;
        }
        *t = Tensor::new(data, &shape);
    });
    err.map_or(Ok(()), Err)
}

/// Per tensor: rank as `u32`, each dim as `u32`, then `f32` values, all
/// little-endian.
pub fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
    let mut pos = 0;
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let chunk = bytes
            .get(*pos..*pos + 4)
            .ok_or_else(|| Error::Checkpoint(format!("truncated blob at byte {pos}")))?;
        *pos += 4;
        Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
    };
    let mut out = Vec::new();
    while pos < bytes.len() {
        let rank = read_u32(&mut pos)? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u32(&mut pos).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| read_u32(&mut pos).map(|b| f32::from_bits(b) as f64))
            .collect::<Result<Vec<_>>>()?;
        out.push((shape, data));
    }
    Ok(out)
}

/// Central-difference check of every parameter gradient of `loss(module)`.
pub fn check_module_gradients<M: Module + Clone>(module: &M, loss: impl Fn(&M) -> Tensor) -> GradCheckReport {
    let params = module.parameters();
    let inputs: Vec<Vec<f64>> = params.iter().map(|p| p.to_vec()).collect();
    let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
    check_gradients(&inputs, &shape_refs, |ts| {
        let mut m = module.clone();
        let mut i = 0;
        m.visit_mut(&mut |t| {
            *t = ts[i].clone();
            i += 1;
        });
        loss(&m)
    })
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(mean, std).expect("valid normal");
        Tensor::param((0..n).map(|_| dist.sample(&mut self.rng)).collect(), shape)
    }

    pub fn conv_weight(&mut self, c_out: usize, c_in: usize, k: usize) -> Tensor {
        self.normal(&[c_out, c_in, k, k], 0.0, 0.02)
    }

    pub fn norm_gamma(&mut self, c: usize) -> Tensor {
        self.normal(&[c], 1.0, 0.02)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        Tensor::param(vec![0.0; shape.iter().product()], shape)
    }

    pub fn constant(&self, shape: &[usize], v: f64) -> Tensor {
        Tensor::param(vec![v; shape.iter().product()], shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; `grads` follows the module's visiting order.
    pub fn step(&mut self, module: &mut dyn Module, grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut i = 0;
        module.visit_mut(&mut |p| {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i].data());
            let mut data = p.to_vec();
            for j in 0..data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                data[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            }
            *p = Tensor::param(data, p.shape());
            i += 1;
        });
        assert_eq!(i, grads.len(), "gradient count does not match parameters");
    }
}
