//! Named parameter storage and the primitive layers the denoiser is built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::im2col::{Geometry, Im2Col};
use crate::error::{Error, Result};

/// Ordered map of named trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), dtype }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy: the returned store owns fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self { vars, dtype: self.dtype })
    }

    /// Flattened values of parameter `name` as `f64`.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let v = self.get(name).ok_or_else(|| Error::InvalidConfig(format!("no parameter {name}")))?;
        Ok(v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    /// Overwrites parameter `name` with `values` (same element count).
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let v = self.get(name).ok_or_else(|| Error::InvalidConfig(format!("no parameter {name}")))?;
        let t = Tensor::from_slice(values, v.shape(), &Device::Cpu)?.to_dtype(self.dtype)?;
        v.set(&t)?;
        Ok(())
    }

    /// Adds `scale * N(0, 1)` noise to every parameter, in name order.
    pub fn jitter(&self, rng: &mut ChaCha8Rng, scale: f64) -> Result<()> {
        for name in self.vars.keys() {
            let mut vals = self.values(name)?;
            for v in vals.iter_mut() {
                *v += scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *rng);
            }
            self.set_values(name, &vals)?;
        }
        Ok(())
    }

    /// True when every parameter value is finite.
    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let vals: Vec<f64> = v.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            if vals.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with standard deviation `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
}

/// Creates parameters on first request (drawing from `rng`) or fetches them
/// from an existing store. In strict mode missing parameters are an error.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn creating(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng: Some(rng), prefix: String::new() }
    }

    pub fn strict(store: &'a mut ParamStore) -> Self {
        Self { store, rng: None, prefix: String::new() }
    }

    pub fn pp(&mut self, name: impl AsRef<str>) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder { store: self.store, rng: self.rng.as_deref_mut(), prefix }
    }

    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.store.get(&self.full_name(name)).is_some()
    }

    pub fn is_strict(&self) -> bool {
        self.rng.is_none()
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        if let Some(v) = self.store.get(&full) {
            if v.dims() != shape {
                return Err(Error::ShapeMismatch(format!("parameter {full}: stored {:?}, expected {shape:?}", v.dims())));
            }
            return Ok(v.as_tensor().clone());
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("parameter {full} missing from checkpoint")))?;
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn { fan_in, gain } => {
                let dist = Normal::new(0.0, gain / (fan_in.max(1) as f64).sqrt()).unwrap();
                (0..n).map(|_| dist.sample(&mut *rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.insert(full, var);
        Ok(out)
    }
}

/// Logistic sigmoid through `tanh`, which is stable for large `|x|`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Softmax over the last axis; the max shift is treated as a constant.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `(in, out)`
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut Builder, input: usize, output: usize, zero: bool) -> Result<Self> {
        let init = if zero { Init::Zeros } else { Init::FanIn { fan_in: input, gain: 1.0 } };
        Ok(Self { weight: b.param("weight", &[input, output], init)?, bias: b.param("bias", &[output], Init::Zeros)? })
    }

    /// `x`: `(B, in)` -> `(B, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        b: &mut Builder,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        zero: bool,
    ) -> Result<Self> {
        let init = if zero { Init::Zeros } else { Init::FanIn { fan_in: input * kernel * kernel, gain: 1.0 } };
        Ok(Self {
            weight: b.param("weight", &[output, input, kernel, kernel], init)?,
            bias: b.param("bias", &[output], Init::Zeros)?,
            stride,
            padding: kernel / 2,
        })
    }

    /// Convolution as a single matmul over extracted patches.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (out, cin, k, _) = self.weight.dims4()?;
        if c != cin {
            return Err(Error::ShapeMismatch(format!("conv expects {cin} input channels, got {c}")));
        }
        let g = Geometry { batch: b, channels: c, height: h, width: w, kernel: k, stride: self.stride, padding: self.padding };
        let (ho, wo) = g.out_size();
        let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
        let wb = Tensor::cat(&[&self.weight.reshape((out, c * k * k))?, &self.bias.reshape((out, 1))?], 1)?;
        Ok(wb.matmul(&cols)?.reshape((out, b, ho, wo))?.transpose(0, 1)?)
    }}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[channels], Init::Ones)?,
            beta: b.param("beta", &[channels], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&var.affine(1.0, 1e-5)?.sqrt()?)?.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Sinusoidal embedding of integer timesteps: `(B, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            v.push((t as f64 * freq).sin());
        }
        for k in 0..half {
            let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            v.push((t as f64 * freq).cos());
        }
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}
