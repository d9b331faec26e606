//! Convolutional backbones exposing their per-stage feature maps.
//!
//! Two kinds exist: a ResNet50-class network (bottleneck stages 3-4-6-3, tapped at
//! the end of each stage, parameter names follow the torchvision layout so converted
//! ImageNet weights load directly) and a tiny strided CNN used for tests.

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Init, Mode, ParamBuilder};

pub const RESNET50_STAGE_CHANNELS: [usize; 4] = [256, 512, 1024, 2048];
const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const RESNET50_WIDTHS: [usize; 4] = [64, 128, 256, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[serde(alias = "resnet50")]
    PretrainedResnet50Class,
    ToyCnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub stage_channels: Vec<usize>,
    /// Whether weights come from a pretrained file rather than random init.
    pub pretrained: bool,
}

impl BackboneSpec {
    pub fn resnet50(pretrained: bool) -> Self {
        Self {
            kind: BackboneKind::PretrainedResnet50Class,
            stage_channels: RESNET50_STAGE_CHANNELS.to_vec(),
            pretrained,
        }
    }

    pub fn toy(stage_channels: Vec<usize>) -> Self {
        Self { kind: BackboneKind::ToyCnn, stage_channels, pretrained: false }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() < 2 {
            return Err(Error::config(format!(
                "backbone needs at least 2 stages, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::config("backbone stage channels must be >= 1"));
        }
        match self.kind {
            BackboneKind::PretrainedResnet50Class if self.stage_channels != RESNET50_STAGE_CHANNELS => {
                Err(Error::config(format!(
                    "resnet50-class backbone has stage channels {RESNET50_STAGE_CHANNELS:?}, got {:?}",
                    self.stage_channels
                )))
            }
            BackboneKind::ToyCnn if self.pretrained => {
                Err(Error::config("toy_cnn backbone has no pretrained weights"))
            }
            _ => Ok(()),
        }
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        match self.kind {
            BackboneKind::ToyCnn => {
                let mut in_ch = 3;
                let mut total = 0;
                for &c in &self.stage_channels {
                    total += Conv2d::param_count(in_ch, c, 3, true);
                    in_ch = c;
                }
                total
            }
            BackboneKind::PretrainedResnet50Class => {
                let mut total = Conv2d::param_count(3, 64, 7, false) + BatchNorm2d::param_count(64);
                let mut in_ch = 64;
                for (&blocks, &width) in RESNET50_BLOCKS.iter().zip(&RESNET50_WIDTHS) {
                    let out = width * 4;
                    for i in 0..blocks {
                        total += Conv2d::param_count(in_ch, width, 1, false)
                            + Conv2d::param_count(width, width, 3, false)
                            + Conv2d::param_count(width, out, 1, false)
                            + 2 * BatchNorm2d::param_count(width)
                            + BatchNorm2d::param_count(out);
                        if i == 0 {
                            total += Conv2d::param_count(in_ch, out, 1, false) + BatchNorm2d::param_count(out);
                        }
                        in_ch = out;
                    }
                }
                total
            }
        }
    }
}

/// Backbone network; `stages` returns one feature map per stage, in order.
#[derive(Debug, Clone)]
pub enum Backbone {
    Toy(ToyCnn),
    Resnet(ResNet50),
}

impl Backbone {
    pub fn new(spec: &BackboneSpec, b: &mut ParamBuilder<'_>) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            BackboneKind::ToyCnn => Backbone::Toy(ToyCnn::new(b, &spec.stage_channels)?),
            BackboneKind::PretrainedResnet50Class => Backbone::Resnet(ResNet50::new(b)?),
        })
    }

    pub fn stages(&self, x: &Tensor, mode: &Mode<'_>) -> Result<Vec<Tensor>> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::shape(format!("backbone expects B×3×H×W input, got {dims:?}")));
        }
        match self {
            Backbone::Toy(t) => t.stages(x),
            Backbone::Resnet(r) => r.stages(x, mode),
        }
    }
}

/// Stacked 3×3 stride-2 convolutions with ReLU; each stage halves the resolution.
#[derive(Debug, Clone)]
pub struct ToyCnn {
    convs: Vec<Conv2d>,
}

impl ToyCnn {
    pub fn new(b: &mut ParamBuilder<'_>, channels: &[usize]) -> Result<Self> {
        let mut in_ch = 3;
        let mut convs = Vec::with_capacity(channels.len());
        for (i, &c) in channels.iter().enumerate() {
            let init = Init::Normal((2.0 / (in_ch * 9) as f64).sqrt());
            convs.push(Conv2d::new(&mut b.pp(format!("stage{}", i + 1)), in_ch, c, 3, 2, 1, true, init)?);
            in_ch = c;
        }
        Ok(Self { convs })
    }

    fn stages(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

fn kaiming(fan_in: usize) -> Init {
    Init::Normal((2.0 / fan_in as f64).sqrt())
}

impl Bottleneck {
    fn new(b: &mut ParamBuilder<'_>, in_ch: usize, width: usize, stride: usize) -> Result<Self> {
        let out = width * 4;
        let conv1 = Conv2d::new(&mut b.pp("conv1"), in_ch, width, 1, 1, 0, false, kaiming(in_ch))?;
        let bn1 = BatchNorm2d::new(&mut b.pp("bn1"), width)?;
        let conv2 = Conv2d::new(&mut b.pp("conv2"), width, width, 3, stride, 1, false, kaiming(width * 9))?;
        let bn2 = BatchNorm2d::new(&mut b.pp("bn2"), width)?;
        let conv3 = Conv2d::new(&mut b.pp("conv3"), width, out, 1, 1, 0, false, kaiming(width))?;
        let bn3 = BatchNorm2d::new(&mut b.pp("bn3"), out)?;
        let downsample = if stride != 1 || in_ch != out {
            let mut d = b.pp("downsample");
            let conv = Conv2d::new(&mut d.pp("0"), in_ch, out, 1, stride, 0, false, kaiming(in_ch))?;
            let bn = BatchNorm2d::new(&mut d.pp("1"), out)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self { conv1, bn1, conv2, bn2, conv3, bn3, downsample })
    }

    fn forward(&self, x: &Tensor, mode: &Mode<'_>) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?.relu()?;
        let h = self.bn3.forward(&self.conv3.forward(&h)?, mode)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    pub fn new(b: &mut ParamBuilder<'_>) -> Result<Self> {
        let conv1 = Conv2d::new(&mut b.pp("conv1"), 3, 64, 7, 2, 3, false, kaiming(3 * 49))?;
        let bn1 = BatchNorm2d::new(&mut b.pp("bn1"), 64)?;
        let mut in_ch = 64;
        let mut layers = Vec::new();
        for (i, (&blocks, &width)) in RESNET50_BLOCKS.iter().zip(&RESNET50_WIDTHS).enumerate() {
            let mut lb = b.pp(format!("layer{}", i + 1));
            let mut stage = Vec::with_capacity(blocks);
            for j in 0..blocks {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                stage.push(Bottleneck::new(&mut lb.pp(j.to_string()), in_ch, width, stride)?);
                in_ch = width * 4;
            }
            layers.push(stage);
        }
        Ok(Self { conv1, bn1, layers })
    }

    fn stages(&self, x: &Tensor, mode: &Mode<'_>) -> Result<Vec<Tensor>> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        // 3×3/2 max pool with padding 1; inputs are post-ReLU so zero padding is exact.
        let mut h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for stage in &self.layers {
            for block in stage {
                h = block.forward(&h, mode)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}
