//! Prediction heads over the fused feature vector: a four-layer regressor for the
//! scalar quality score and a three-layer classifier for the quality level.

use candle_core::{Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dropout, Linear, Mode, ParamBuilder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_width: usize,
    /// Hidden widths of the regression head (three layers).
    pub reg_widths: Vec<usize>,
    /// Hidden widths of the classification head (two layers).
    pub cls_widths: Vec<usize>,
    pub num_classes: usize,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reg_widths.len() != 3 {
            return Err(Error::config(format!(
                "regression head takes 3 hidden widths, got {:?}",
                self.reg_widths
            )));
        }
        if self.cls_widths.len() != 2 {
            return Err(Error::config(format!(
                "classification head takes 2 hidden widths, got {:?}",
                self.cls_widths
            )));
        }
        if self.input_width == 0 || self.reg_widths.iter().chain(&self.cls_widths).any(|&w| w == 0) {
            return Err(Error::config("head widths must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("need K >= 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }
}

/// Closed-form parameter count of an affine stack `input → hidden… → output`.
pub fn mlp_param_count(input: usize, hidden: &[usize], output: usize) -> usize {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims.windows(2).map(|w| Linear::param_count(w[0], w[1])).sum()
}

/// Affine layers with ReLU and dropout between them; the last layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder<'_>, input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut b.pp(format!("fc{}", i + 1)), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 2 || dims[1] != self.input_width() {
            return Err(Error::shape(format!(
                "head expects B×{} features, got {dims:?}",
                self.input_width()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = dropout(&h.relu()?, mode)?;
            }
        }
        Ok(h)
    }
}

/// Scalar score head; output `B×1`, unbounded.
#[derive(Debug, Clone)]
pub struct RegressionHead(Mlp);

impl RegressionHead {
    pub fn new(b: &mut ParamBuilder<'_>, input: usize, hidden: &[usize]) -> Result<Self> {
        Ok(Self(Mlp::new(b, input, hidden, 1)?))
    }

    pub fn regress(&self, features: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        self.0.forward(features, mode)
    }
}

/// Quality-level head; returns logits `o` and their softmax.
#[derive(Debug, Clone)]
pub struct ClassificationHead(Mlp);

impl ClassificationHead {
    pub fn new(b: &mut ParamBuilder<'_>, input: usize, hidden: &[usize], k: usize) -> Result<Self> {
        Ok(Self(Mlp::new(b, input, hidden, k)?))
    }

    pub fn classify_logits(&self, features: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        self.0.forward(features, mode)
    }

    pub fn classify(&self, features: &Tensor, mode: &mut Mode<'_>) -> Result<Tensor> {
        softmax_rows(&self.classify_logits(features, mode)?)
    }
}

/// Row softmax with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?;
    let e = logits.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Row log-softmax via log-sum-exp.
pub fn log_softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?;
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}
