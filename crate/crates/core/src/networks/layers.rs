//! Minimal differentiable layers over candle tensors.
//!
//! Parameters live in a [`ParamStore`] and are initialised from a seeded
//! ChaCha stream so that two bundles built with the same seed are bitwise
//! identical.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable parameters keyed by dotted path.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    /// Number of trainable scalars whose path starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrite every parameter and buffer from `tensors`, which must hold
    /// exactly the same keys and shapes.
    pub fn load_from(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if tensors.len() != expected {
            return Err(Error::Validation(format!(
                "weight archive holds {} tensors, model expects {expected}",
                tensors.len()
            )));
        }
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Validation(format!("weight archive lacks `{name}`")))?;
            if t.shape() != var.shape() {
                return Err(Error::Validation(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            // Copy: a tensor sharing the variable's own storage cannot be set.
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?.copy()?)?;
        }
        Ok(())
    }

    /// Every parameter and buffer by name, for serialisation.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }
}

pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize], buffer: bool) -> Result<Tensor> {
        let path = self.path(name);
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        let map = if buffer {
            &mut self.store.buffers
        } else {
            &mut self.store.params
        };
        if map.insert(path.clone(), var).is_some() {
            return Err(Error::Config(format!("duplicate parameter `{path}`")));
        }
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| self.store.rng.random_range(-bound..bound))
            .collect();
        self.insert(name, values, shape, false)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape, false)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, vec![value; n], shape, true)
    }

    /// Look up the `Var` behind a buffer created in this scope.
    fn buffer_var(&self, name: &str) -> Var {
        self.store.buffers[&self.path(name)].clone()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: scope.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: scope.uniform("bias", &[out_dim], bound)?,
        })
    }

    /// Applies to the last axis of a rank-2 or rank-3 input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            3 => {
                let (b, n, c) = x.dims3()?;
                x.reshape((b * n, c))?.matmul(&w)?.reshape((b, n, ()))?
            }
            r => return Err(Error::Contract(format!("linear layer got rank-{r} input"))),
        };
        Ok(y.broadcast_add(&self.bias)?)
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
        scope: &mut Scope<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: scope.uniform("weight", &[out_ch, in_ch, kernel, kernel], bound)?,
            bias: scope.uniform("bias", &[out_ch], bound)?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

const NORM_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(scope: &mut Scope<'_>, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            gamma: scope.constant("weight", &[channels], 1.0)?,
            beta: scope.constant("bias", &[channels], 0.0)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Batch normalisation over the leading axis of an `(N, C)` input.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
}

impl BatchNorm1d {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        let gamma = scope.constant("weight", &[channels], 1.0)?;
        let beta = scope.constant("bias", &[channels], 0.0)?;
        scope.buffer("running_mean", &[channels], 0.0)?;
        scope.buffer("running_var", &[channels], 1.0)?;
        Ok(Self {
            gamma,
            beta,
            running_mean: scope.buffer_var("running_mean"),
            running_var: scope.buffer_var("running_var"),
            momentum: 0.1,
        })
    }

    /// Replace the running estimates with statistics of `x` (unbiased
    /// variance).
    pub fn set_statistics(&self, x: &Tensor) -> Result<()> {
        let n = x.dim(0)?;
        if n < 2 {
            return Err(Error::Contract(format!("need at least 2 rows for batch statistics, got {n}")));
        }
        let mean = x.mean_keepdim(0)?;
        let var = (x.broadcast_sub(&mean)?.sqr()?.sum_keepdim(0)? / (n - 1) as f64)?;
        self.running_mean.set(&mean.detach().squeeze(0)?)?;
        self.running_var.set(&var.detach().squeeze(0)?)?;
        Ok(())
    }

    /// In training mode normalises with batch statistics and updates the
    /// running estimates; otherwise uses the running estimates.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (mean, var) = if train {
            let n = x.dim(0)?;
            let mean = x.mean_keepdim(0)?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().squeeze(0)? * m)?)?;
            self.running_mean.set(&new_mean)?;
            if n > 1 {
                let unbiased = (var.detach().squeeze(0)? * (n as f64 / (n - 1) as f64))?;
                let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_var.set(&new_var)?;
            }
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().unsqueeze(0)?,
                self.running_var.as_tensor().unsqueeze(0)?,
            )
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Single-head self-attention over spatial positions, with a residual path.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    norm: GroupNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    proj: Linear,
}

impl AttentionBlock {
    pub fn new(scope: &mut Scope<'_>, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut scope.pp("norm"), groups, channels)?,
            query: Linear::new(&mut scope.pp("query"), channels, channels)?,
            key: Linear::new(&mut scope.pp("key"), channels, channels)?,
            value: Linear::new(&mut scope.pp("value"), channels, channels)?,
            proj: Linear::new(&mut scope.pp("proj"), channels, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self
            .norm
            .forward(x)?
            .reshape((b, c, h * w))?
            .transpose(1, 2)?
            .contiguous()?;
        let q = self.query.forward(&tokens)?;
        let k = self.key.forward(&tokens)?;
        let v = self.value.forward(&tokens)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (c as f64).sqrt())?;
        let attended = softmax_last(&scores)?.matmul(&v)?;
        let out = self
            .proj
            .forward(&attended)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `log(1 + exp(x))`, evaluated without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Inverted-dropout mask: zeros with probability `p`, otherwise `1/(1-p)`.
pub fn dropout_mask<R: Rng>(rng: &mut R, shape: (usize, usize), p: f64, like: &Tensor) -> Result<Tensor> {
    let keep = 1.0 / (1.0 - p);
    let values: Vec<f64> = (0..shape.0 * shape.1)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Ok(Tensor::from_vec(values, shape, like.device())?.to_dtype(like.dtype())?)
}
