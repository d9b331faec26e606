#![allow(dead_code)]

use std::path::Path;

use pmt_iqa::backbone::BackboneSpec;
use pmt_iqa::binning::BinningConfig;
use pmt_iqa::dataset::{default_num_views, LoadedDataset, ResizePolicy, TestViews};
use pmt_iqa::model::{ModelConfig, Variant};
use pmt_iqa::synthetic::{make_synthetic, Distortion, SyntheticSpec};
use pmt_iqa::train::{Precision, TrainConfig, TrainSetup};

pub const TOY_CHANNELS: [usize; 4] = [8, 16, 32, 64];

/// Default training setup on the toy backbone.
pub fn toy_setup(dataset: &str, crop_size: u32, max_epochs: usize, seed: u64) -> TrainSetup {
    let mut train = TrainConfig::new(dataset);
    train.max_epochs = max_epochs;
    train.seed = seed;
    let binning = BinningConfig::default();
    let model = ModelConfig::new(BackboneSpec::toy(TOY_CHANNELS.to_vec()), binning.num_categories().unwrap());
    TrainSetup {
        train,
        model,
        binning,
        crop_size,
        num_views: default_num_views(dataset),
        allow_hflip: true,
        test_views: TestViews::MultiCrop,
        precision: Precision::F32,
        pretrained_weights: None,
    }
}

/// A small model for fast runs: narrow projections and heads.
pub fn tiny_setup(dataset: &str, crop_size: u32, max_epochs: usize, seed: u64, variant: Variant) -> TrainSetup {
    let mut s = toy_setup(dataset, crop_size, max_epochs, seed);
    s.model.backbone = BackboneSpec::toy(vec![4, 8]);
    s.model.proj_width = 8;
    s.model.reg_widths = vec![16, 8, 4];
    s.model.cls_widths = vec![16, 8];
    s.model.variant = variant;
    s.num_views = 1;
    s.train.batch_size = 4;
    s
}

pub fn synthetic(dir: &Path, n: usize, size: u32, distortion: Distortion, seed: u64, crop_size: u32) -> LoadedDataset {
    let spec = SyntheticSpec::new(n, size, distortion, seed);
    let (manifest, _) = make_synthetic(&spec, dir).expect("synthetic dataset");
    LoadedDataset::load(manifest, &ResizePolicy { crop_size, short_side: crop_size }).expect("load")
}
