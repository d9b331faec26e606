//! Multi-scale feature extraction: each backbone stage map is projected by a 1×1
//! convolution to a common width `p`, globally average pooled, and the per-stage
//! vectors are concatenated in stage order.

use candle_core::{Module, Tensor};

use crate::backbone::{Backbone, BackboneSpec};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, Mode, ParamBuilder};

/// Per-stage pooled vectors (each `B×p`) and their fusion (`B×n·p`).
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub per_stage: Vec<Tensor>,
    pub fused: Tensor,
}

impl MultiScaleFeatures {
    pub fn from_stages(per_stage: Vec<Tensor>) -> Result<Self> {
        let fused = fuse(&per_stage)?;
        Ok(Self { per_stage, fused })
    }

    pub fn width(&self) -> Result<usize> {
        Ok(self.fused.dim(1)?)
    }

    /// Block `j` (0-based) of the fused vector.
    pub fn block(&self, j: usize) -> Result<Tensor> {
        let stage = self
            .per_stage
            .get(j)
            .ok_or_else(|| Error::shape(format!("block {j} out of {} stages", self.per_stage.len())))?;
        let p = stage.dim(1)?;
        Ok(self.fused.narrow(1, j * p, p)?)
    }

    pub fn all_finite(&self) -> Result<bool> {
        let v = self.fused.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(v.iter().all(|x| x.is_finite()))
    }
}

/// 1×1 convolution `C → p` followed by the spatial mean; returns `B×p`.
pub fn project_and_pool(stage_map: &Tensor, projection: &Conv2d) -> Result<Tensor> {
    let dims = stage_map.dims();
    if dims.len() != 4 || dims[1] != projection.in_channels() {
        return Err(Error::shape(format!(
            "projection expects B×{}×S×S, got {dims:?}",
            projection.in_channels()
        )));
    }
    Ok(projection.forward(stage_map)?.mean((2, 3))?)
}

/// Concatenates `B×p` stage vectors into `B×(n·p)`, stage order preserved.
pub fn fuse(per_stage: &[Tensor]) -> Result<Tensor> {
    let first = per_stage.first().ok_or_else(|| Error::shape("fuse needs at least one stage"))?;
    let (b, p) = first.dims2()?;
    for (j, s) in per_stage.iter().enumerate() {
        let d = s.dims2()?;
        if d != (b, p) {
            return Err(Error::shape(format!("stage {j} is {d:?}, expected {:?}", (b, p))));
        }
    }
    Ok(Tensor::cat(per_stage, 1)?)
}

/// Backbone plus one projection per tapped stage.
#[derive(Debug, Clone)]
pub struct MsExtractor {
    pub backbone: Backbone,
    projections: Vec<Conv2d>,
}

impl MsExtractor {
    pub fn new(spec: &BackboneSpec, proj_width: usize, b: &mut ParamBuilder<'_>) -> Result<Self> {
        if proj_width == 0 {
            return Err(Error::config("projection width must be >= 1"));
        }
        let backbone = Backbone::new(spec, &mut b.pp("backbone"))?;
        let mut ms = b.pp("ms");
        let projections = spec
            .stage_channels
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                Conv2d::new(&mut ms.pp(format!("proj{}", j + 1)), c, proj_width, 1, 1, 0, true, Init::fan_in_uniform(c))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { backbone, projections })
    }

    pub fn param_count(spec: &BackboneSpec, proj_width: usize) -> usize {
        spec.param_count()
            + spec
                .stage_channels
                .iter()
                .map(|&c| Conv2d::param_count(c, proj_width, 1, true))
                .sum::<usize>()
    }

    pub fn forward(&self, images: &Tensor, mode: &Mode<'_>) -> Result<MultiScaleFeatures> {
        let maps = self.backbone.stages(images, mode)?;
        let per_stage = maps
            .iter()
            .zip(&self.projections)
            .map(|(m, proj)| project_and_pool(m, proj))
            .collect::<Result<Vec<_>>>()?;
        MultiScaleFeatures::from_stages(per_stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn conv(in_ch: usize, out_ch: usize) -> (ParamStore, Conv2d) {
        let mut s = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv2d::new(&mut s.builder(&mut rng).pp("p"), in_ch, out_ch, 1, 1, 0, true, Init::Const(0.0)).unwrap();
        (s, c)
    }

    #[test]
    fn identity_projection_of_constant_map() {
        let (s, c) = conv(4, 4);
        let mut vals = BTreeMap::new();
        vals.insert("p.weight".into(), Tensor::eye(4, DType::F64, &Device::Cpu).unwrap().reshape((4, 4, 1, 1)).unwrap());
        vals.insert("p.bias".into(), Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap());
        s.load(&vals, "").unwrap();
        let x = Tensor::full(0.75f64, (2, 4, 5, 5), &Device::Cpu).unwrap();
        let y = project_and_pool(&x, &c).unwrap();
        assert_eq!(y.dims(), &[2, 4]);
        assert!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn zero_projection_gives_zero() {
        let (s, c) = conv(3, 6);
        let mut vals = BTreeMap::new();
        vals.insert("p.weight".into(), Tensor::zeros((6, 3, 1, 1), DType::F64, &Device::Cpu).unwrap());
        vals.insert("p.bias".into(), Tensor::zeros(6, DType::F64, &Device::Cpu).unwrap());
        s.load(&vals, "").unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let y = project_and_pool(&x, &c).unwrap();
        assert!(y.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_spatial_size_pools_to_conv_output() {
        let (_s, c) = conv(3, 2);
        let x = Tensor::randn(0f64, 1.0, (2, 3, 1, 1), &Device::Cpu).unwrap();
        let pooled = project_and_pool(&x, &c).unwrap();
        let direct = c.forward(&x).unwrap().reshape((2, 2)).unwrap();
        assert_eq!(pooled.to_vec2::<f64>().unwrap(), direct.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn projection_rejects_wrong_channels() {
        let (_s, c) = conv(3, 2);
        let x = Tensor::zeros((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(project_and_pool(&x, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn fuse_width_and_blocks() {
        let dev = Device::Cpu;
        let stages: Vec<Tensor> = (0..4).map(|j| Tensor::full(j as f64, (2, 256), &dev).unwrap()).collect();
        let f = MultiScaleFeatures::from_stages(stages.clone()).unwrap();
        assert_eq!(f.width().unwrap(), 1024);
        for j in 0..4 {
            assert_eq!(f.block(j).unwrap().to_vec2::<f64>().unwrap(), stages[j].to_vec2::<f64>().unwrap());
        }
    }

    #[test]
    fn fuse_single_stage_is_identity_and_permutes_blocks() {
        let dev = Device::Cpu;
        let a = Tensor::new(&[[1.0f64, 2.0]], &dev).unwrap();
        let b = Tensor::new(&[[3.0f64, 4.0]], &dev).unwrap();
        assert_eq!(fuse(&[a.clone()]).unwrap().to_vec2::<f64>().unwrap(), a.to_vec2::<f64>().unwrap());
        assert_eq!(fuse(&[b.clone(), a.clone()]).unwrap().to_vec2::<f64>().unwrap(), vec![vec![3.0, 4.0, 1.0, 2.0]]);
    }

    #[test]
    fn fuse_rejects_width_mismatch() {
        let dev = Device::Cpu;
        let a = Tensor::zeros((2, 3), DType::F64, &dev).unwrap();
        let b = Tensor::zeros((2, 4), DType::F64, &dev).unwrap();
        assert!(matches!(fuse(&[a, b]), Err(Error::Shape(_))));
    }
}
