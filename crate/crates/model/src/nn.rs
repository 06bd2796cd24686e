//! Minimal transformer building blocks on candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Initial values
//! are drawn from a ChaCha stream on the host, so a seed fully determines a
//! freshly built model regardless of device or backend.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`.
    Uniform { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(ModelError::Config(format!("parameter '{name}' declared twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::Normal { std } => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian f32 values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in flat_f32(var.as_tensor())? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrites a parameter in place; shapes must match.
    pub fn assign(&self, name: &str, values: &[f32], shape: &[usize]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unexpected tensor '{name}'")))?;
        if var.dims() != shape {
            return Err(ModelError::Checkpoint(format!(
                "tensor '{name}' has shape {shape:?}, model expects {:?}",
                var.dims()
            )));
        }
        let t = Tensor::from_slice(values, shape, &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }
}

pub fn flat_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

pub fn flat_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Host values to a tensor of the given dtype.
pub fn host(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Forward-pass context: dropout is active only when an rng is present.
pub struct Ctx {
    pub dropout: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { dropout: 0.0, rng: None }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            dropout,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return Ok(x.clone());
        };
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Ok(x.mul(&host(mask, x.dims(), x.dtype())?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::with_init(ps, name, fan_in, fan_out, Init::Uniform { fan_in })
    }

    pub fn with_init(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: ps.tensor(&format!("{name}.weight"), &[fan_out, fan_in], init)?,
            bias: ps.tensor(&format!("{name}.bias"), &[fan_out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let (&fan_in, lead) = dims.split_last().ok_or_else(|| ModelError::shape("rank ≥ 1", "scalar"))?;
        let rows: usize = lead.iter().product();
        let y = x
            .reshape((rows, fan_in))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out = lead.to_vec();
        out.push(self.weight.dim(0)?);
        Ok(y.reshape(out)?)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Normalizes over the last dimension without affine parameters.
pub fn normalize_last(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&var.affine(1.0, LN_EPS)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.tensor(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: ps.tensor(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(normalize_last(x)?.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Multi-head attention with an optional key mask.
///
/// Masked keys get zero weight and the remaining weights are renormalized;
/// when every key of a row is masked the attention output is exactly zero.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(ModelError::Config(format!("hidden {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(ps, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `query: [B, Lq, D]`, `memory: [B, Lk, D]`, `key_mask: [B, Lk]` with 1 = attend.
    pub fn forward(&self, query: &Tensor, memory: &Tensor, key_mask: Option<&Tensor>, ctx: &mut Ctx) -> Result<Tensor> {
        let (b, lq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(memory)?)?;
        let v = self.split(&self.v.forward(memory)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = q.matmul(&k.t()?.contiguous()?)?.affine(scale, 0.0)?;
        let weights = match key_mask {
            None => {
                let max = scores.max_keepdim(D::Minus1)?.detach();
                let e = scores.broadcast_sub(&max)?.exp()?;
                e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?
            }
            Some(mask) => {
                let lk = mask.dim(1)?;
                let m = mask.reshape((b, 1, 1, lk))?;
                // push masked scores far down before taking the row max
                let shifted = scores.broadcast_add(&m.affine(1e9, -1e9)?)?;
                let max = shifted.max_keepdim(D::Minus1)?.detach();
                let e = shifted.broadcast_sub(&max)?.exp()?.broadcast_mul(&m)?;
                e.broadcast_div(&e.sum_keepdim(D::Minus1)?.affine(1.0, 1e-30)?)?
            }
        };
        let weights = ctx.dropout(&weights)?;
        let out = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, d))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(ps, &format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let h = ctx.dropout(&self.up.forward(x)?.gelu()?)?;
        self.down.forward(&h)
    }
}

/// Pre-norm encoder layer used by the VAE.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, ff: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(ps, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, ff)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let a = self.attn.forward(&h, &h, None, ctx)?;
        let x = (x + ctx.dropout(&a)?)?;
        let f = self.ff.forward(&self.ln2.forward(&x)?, ctx)?;
        Ok((&x + ctx.dropout(&f)?)?)
    }
}

/// Adaptive layer norm: `norm(x)·(1 + scale(c)) + shift(c)`.
#[derive(Debug, Clone)]
pub struct AdaLn {
    modulation: Linear,
}

impl AdaLn {
    pub fn new(ps: &mut ParamStore, name: &str, cond_dim: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            modulation: Linear::with_init(ps, name, cond_dim, 2 * dim, Init::Normal { std: 0.02 })?,
        })
    }

    /// `x: [B, L, D]`, `cond: [B, C]`.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let d = x.dim(2)?;
        let m = self.modulation.forward(cond)?.unsqueeze(1)?;
        let scale = m.narrow(2, 0, d)?;
        let shift = m.narrow(2, d, d)?;
        Ok(normalize_last(x)?.broadcast_mul(&scale.affine(1.0, 1.0)?)?.broadcast_add(&shift)?)
    }
}

/// Transformer-style sinusoidal embedding of a scalar position.
pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let build = |seed| {
            let mut ps = ParamStore::new(DType::F32, seed);
            Linear::new(&mut ps, "l", 4, 3).unwrap();
            ps.checksum().unwrap()
        };
        assert_eq!(build(1), build(1));
        assert_ne!(build(1), build(2));
    }

    #[test]
    fn fully_masked_memory_gives_zero() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let attn = Attention::new(&mut ps, "a", 8, 2).unwrap();
        let q = host((0..16).map(|v| v as f64 * 0.1).collect(), &[1, 2, 8], DType::F64).unwrap();
        let m = host((0..24).map(|v| (v as f64).sin()).collect(), &[1, 3, 8], DType::F64).unwrap();
        let mask = host(vec![0.0; 3], &[1, 3], DType::F64).unwrap();
        let out = attn.forward(&q, &m, Some(&mask), &mut Ctx::eval()).unwrap();
        // only the output bias survives, and it is initialized to zero
        assert!(flat_f64(&out).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn masked_keys_do_not_matter() {
        let mut ps = ParamStore::new(DType::F64, 0);
        let attn = Attention::new(&mut ps, "a", 8, 2).unwrap();
        let q = host((0..16).map(|v| v as f64 * 0.1).collect(), &[1, 2, 8], DType::F64).unwrap();
        let m3 = host((0..24).map(|v| (v as f64).sin()).collect(), &[1, 3, 8], DType::F64).unwrap();
        let m2 = m3.narrow(1, 0, 2).unwrap();
        let full = attn
            .forward(&q, &m3, Some(&host(vec![1.0, 1.0, 0.0], &[1, 3], DType::F64).unwrap()), &mut Ctx::eval())
            .unwrap();
        let short = attn.forward(&q, &m2, None, &mut Ctx::eval()).unwrap();
        let (a, b) = (flat_f64(&full).unwrap(), flat_f64(&short).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn sinusoid_shape() {
        let e = sinusoidal(0.0, 6);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }
}
