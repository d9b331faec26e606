//! Parameter storage with seeded initialization and the handful of layers the
//! model needs. Every random draw goes through a caller-supplied ChaCha stream so
//! that a seed fully determines initialization and dropout masks.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    /// Normal with zero mean.
    Normal(f64),
}

impl Init {
    /// Fan-in scaled uniform, `U(-1/√fan_in, 1/√fan_in)`.
    pub fn fan_in_uniform(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }

    fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::Const(v) => vec![v; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect(),
        }
    }
}

/// Whether a stored tensor is optimized or is a running statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

/// Named parameters of one model, iterated in name order.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { params: BTreeMap::new(), dtype, device }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> ParamBuilder<'a> {
        ParamBuilder { store: self, rng, prefix: String::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter().filter(|(_, p)| p.kind != ParamKind::Buffer)
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.trainable()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.var.elem_count())
            .sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.count("")
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(n, p)| (n.clone(), p.var.as_tensor().clone())).collect()
    }

    /// Overwrites stored values from `values`. Names under `prefix` must all be
    /// present in `values` with matching shapes; extra entries are ignored.
    pub fn load(&self, values: &BTreeMap<String, Tensor>, prefix: &str) -> Result<usize> {
        let mut loaded = 0;
        for (name, p) in self.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let v = values
                .get(name)
                .ok_or_else(|| Error::shape(format!("missing tensor {name:?}")))?;
            if v.dims() != p.var.dims() {
                return Err(Error::shape(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    v.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&v.to_dtype(self.dtype)?.to_device(&self.device)?)?;
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Scoped creator of parameters; names are joined with `.`.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        if self.store.params.contains_key(&full) {
            return Err(Error::config(format!("duplicate parameter {full:?}")));
        }
        let n = shape.iter().product();
        let values = init.sample(n, self.rng);
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.params.insert(full, Param { var, kind });
        Ok(out)
    }
}

/// Forward-pass mode. Training mode carries the dropout rate and the stream its
/// masks are drawn from.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Inverted dropout; identity in eval mode or at rate 0.
pub fn dropout(x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
    match mode {
        Mode::Train { dropout, rng } if *dropout > 0.0 => {
            let keep = 1.0 - *dropout;
            let mask: Vec<f64> = (0..x.elem_count())
                .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
            Ok(x.mul(&mask)?)
        }
        _ => Ok(x.clone()),
    }
}

/// Affine layer `y = x Wᵀ + b` on `(B, in)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let init = Init::fan_in_uniform(in_dim);
        let weight = b.param("weight", &[out_dim, in_dim], init, ParamKind::Weight)?;
        let bias = b.param("bias", &[out_dim], init, ParamKind::Bias)?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Square-kernel 2-d convolution on NCHW inputs.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        weight_init: Init,
    ) -> Result<Self> {
        let weight = b.param("weight", &[out_ch, in_ch, kernel, kernel], weight_init, ParamKind::Weight)?;
        let bias = if bias {
            let init = Init::fan_in_uniform(in_ch * kernel * kernel);
            Some(b.param("bias", &[out_ch], init, ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> usize {
        in_ch * out_ch * kernel * kernel + if bias { out_ch } else { 0 }
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over the channel axis of NCHW inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut ParamBuilder<'_>, channels: usize) -> Result<Self> {
        let weight = b.param("weight", &[channels], Init::Const(1.0), ParamKind::Weight)?;
        let bias = b.param("bias", &[channels], Init::Const(0.0), ParamKind::Bias)?;
        let rm = b.param("running_mean", &[channels], Init::Const(0.0), ParamKind::Buffer)?;
        let rv = b.param("running_var", &[channels], Init::Const(1.0), ParamKind::Buffer)?;
        Ok(Self {
            weight,
            bias,
            running_mean: Var::from_tensor(&rm)?,
            running_var: Var::from_tensor(&rv)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward(&self, x: &Tensor, mode: &Mode<'_>) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = if mode.is_train() {
            // per-channel batch statistics over (N, H, W)
            let xt = x.transpose(0, 1)?.flatten_from(1)?;
            let n = xt.dim(1)?;
            let mean = xt.mean(D::Minus1)?;
            let centered = xt.broadcast_sub(&mean.unsqueeze(1)?)?;
            let var = centered.sqr()?.mean(D::Minus1)?;
            let unbiased = (var.detach() * (n as f64 / (n.max(2) - 1) as f64))?;
            let m = self.momentum;
            self.running_mean
                .set(&((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach() * m)?)?)?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            (mean, var)
        } else {
            (self.running_mean.as_tensor().detach(), self.running_var.as_tensor().detach())
        };
        let shape = (1, c, 1, 1);
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let scale = (inv_std * &self.weight)?;
        let shift = (&self.bias - mean.mul(&scale)?)?;
        Ok(x.broadcast_mul(&scale.reshape(shape)?)?.broadcast_add(&shift.reshape(shape)?)?)
    }
}
