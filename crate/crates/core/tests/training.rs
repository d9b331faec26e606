mod common;

use candle_core::{DType, Device, Tensor};
use pmt_iqa::checkpoint::Checkpoint;
use pmt_iqa::dataset::{images_to_tensor, Split};
use pmt_iqa::model::Variant;
use pmt_iqa::nn::{Mode, ParamKind};
use pmt_iqa::objective::WeightSchedule;
use pmt_iqa::synthetic::Distortion;
use pmt_iqa::train::{predict, train, TrainHooks};

fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::synthetic(&dir.path().join("d"), 8, 28, Distortion::GaussianBlur, 2, 24);
    let samples = ds.all_as(Split::Train);
    let setup = common::tiny_setup(ds.name(), 24, 2, 9, Variant::PmtFull);
    let out = train(&samples, &setup, TrainHooks::default()).unwrap();
    let path = dir.path().join("ck.safetensors");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.epoch, 2);
    assert_eq!(loaded.fingerprint, setup.fingerprint());
    assert_eq!(loaded.setup, setup);
    assert_eq!(loaded.schedule, out.checkpoint.schedule);
    assert_eq!(loaded.adam_step, out.checkpoint.adam_step);
    let model = loaded.to_model(&Device::Cpu).unwrap();
    let policy = setup.view_policy();
    let a: Vec<u64> = predict(&out.model, &samples, &policy).unwrap().iter().map(|x| x.to_bits()).collect();
    let b: Vec<u64> = predict(&model, &samples, &policy).unwrap().iter().map(|x| x.to_bits()).collect();
    assert_eq!(a, b);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.safetensors");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Checkpoint::load(&path).is_err());
    assert!(Checkpoint::load(&dir.path().join("missing.safetensors")).is_err());
}

fn regression_params_after(weight_decay: f64) -> (Vec<(String, ParamKind, Vec<f64>)>, Vec<Vec<f64>>, f64, usize) {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::synthetic(dir.path(), 8, 24, Distortion::GaussianNoise, 4, 24);
    let samples = ds.all_as(Split::Train);
    let mut setup = common::tiny_setup(ds.name(), 24, 3, 5, Variant::PmtFull);
    setup.train.schedule = Some(WeightSchedule::Fixed { lambda1: 0.0, lambda2: 1.0 });
    setup.train.weight_decay = weight_decay;
    let initial = setup.build_model(&Device::Cpu).unwrap();
    let before: Vec<_> = initial
        .store()
        .iter()
        .filter(|(n, _)| n.starts_with("reg."))
        .map(|(n, p)| (n.clone(), p.kind, values(p.var.as_tensor())))
        .collect();
    let out = train(&samples, &setup, TrainHooks::default()).unwrap();
    let after = before.iter().map(|(n, _, _)| values(out.model.store().get(n).unwrap().var.as_tensor())).collect();
    (before, after, setup.train.learning_rate, out.checkpoint.adam_step as usize)
}

#[test]
fn zero_regression_weight_leaves_regressor_to_weight_decay() {
    let (before, after, _, _) = regression_params_after(0.0);
    assert!(!before.is_empty());
    for ((name, _, b), a) in before.iter().zip(&after) {
        assert_eq!(b, a, "{name} moved without a regression gradient or decay");
    }

    let (before, after, lr, steps) = regression_params_after(1e-2);
    let mut shrunk = 0;
    for ((name, kind, b), a) in before.iter().zip(&after) {
        if *kind == ParamKind::Bias {
            assert_eq!(b, a, "bias {name} decayed");
            continue;
        }
        for (w0, w1) in b.iter().zip(a) {
            if w0.abs() > 10.0 * lr * steps as f64 {
                assert!(w1.abs() < w0.abs() && w0.signum() == w1.signum(), "{name}: {w0} -> {w1}");
                shrunk += 1;
            }
        }
    }
    assert!(shrunk > 0);
}

#[test]
fn batch_of_one_matches_batched_forward() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::synthetic(dir.path(), 4, 24, Distortion::JpegLike, 6, 24);
    let mut setup = common::toy_setup(ds.name(), 24, 1, 3);
    setup.precision = pmt_iqa::train::Precision::F64;
    let model = setup.build_model(&Device::Cpu).unwrap();
    let samples = ds.all_as(Split::Test);
    let images: Vec<_> = samples.iter().map(|s| s.image.as_ref()).collect();
    let batch = images_to_tensor(&images, DType::F64, &Device::Cpu).unwrap();
    let all = values(&model.forward(&batch, &mut Mode::Eval).unwrap().score);
    for (i, img) in images.iter().enumerate() {
        let one = images_to_tensor(&[img], DType::F64, &Device::Cpu).unwrap();
        let s = values(&model.forward(&one, &mut Mode::Eval).unwrap().score);
        assert!((s[0] - all[i]).abs() < 1e-10, "sample {i}: {} vs {}", s[0], all[i]);
    }
}

#[test]
fn invalid_setups_are_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::synthetic(dir.path(), 4, 24, Distortion::GaussianBlur, 1, 24);
    let samples = ds.all_as(Split::Train);
    let mut setup = common::tiny_setup(ds.name(), 24, 1, 0, Variant::PmtFull);
    setup.model.num_classes = 7;
    assert!(train(&samples, &setup, TrainHooks::default()).is_err());
    let mut setup = common::tiny_setup(ds.name(), 24, 1, 0, Variant::PmtFull);
    setup.train.batch_size = 0;
    assert!(train(&samples, &setup, TrainHooks::default()).is_err());
    assert!(train(&[], &common::tiny_setup(ds.name(), 24, 1, 0, Variant::PmtFull), TrainHooks::default()).is_err());
}
