use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pmt-iqa"));
    c.env_remove("DATASET_ROOT");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn synth(dir: &Path, name: &str, distortion: &str) -> PathBuf {
    let o = run(&["synth", "--n", "8", "--size", "32", "--distortion", distortion, "--name", name, "--out", name], dir);
    assert!(o.status.success(), "{}", text(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    dir.join(stdout.lines().last().unwrap().trim())
}

const TINY: &str = r#"
[dataset]
crop_size = 24
num_views = 1

[model]
backbone = "toy_cnn"
stage_channels = [4, 8]
p = 8
reg_widths = [16, 8, 4]
cls_widths = [16, 8]

[schedule]
T = 2

[train]
batch = 4
seed = 1
"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", "blur");
    let o = run(&["synth", "--n", "8", "--size", "32", "--distortion", "blur", "--name", "a", "--out", "b"], dir.path());
    assert!(o.status.success());
    let b = dir.path().join(String::from_utf8(o.stdout).unwrap().lines().last().unwrap().trim());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let first = |root: &Path| {
        let mut files: Vec<_> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
        files.sort();
        files
    };
    for (x, y) in first(dir.path().join("a").as_path()).iter().zip(first(dir.path().join("b").as_path()).iter()) {
        for e in std::fs::read_dir(x).unwrap() {
            let e = e.unwrap();
            assert_eq!(std::fs::read(e.path()).unwrap(), std::fs::read(y.join(e.file_name())).unwrap());
        }
    }
}

#[test]
fn synth_rejects_zero_images() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--n", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", "blur");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlr = -1.0\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--dataset", data.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("lr"), "{}", text(&o));

    std::fs::write(&cfg, "[train]\nlearning_speed = 3\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--dataset", data.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("learning_speed"), "{}", text(&o));
}

#[test]
fn train_records_overrides_in_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", "noise");
    let cfg = tiny_config(dir.path());
    let o = run(
        &["train", "-q", "--config", cfg.to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--set", "train.seed=7", "--out", "out", "--plots"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", text(&o));
    let log = std::fs::read_to_string(dir.path().join("out/train_log.csv")).unwrap();
    assert!(log.contains("# seed=7"), "{log}");
    assert!(log.contains("# override=train.seed=7"), "{log}");
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2);
    assert!(dir.path().join("out/checkpoint.safetensors").exists());
    assert!(dir.path().join("out/loss.svg").exists());

    let ck = dir.path().join("out/checkpoint.safetensors");
    let o = run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--out", "ev"], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    let report = dir.path().join("ev/report.json");
    let o = run(&["report", "--input", report.to_str().unwrap(), "--format", "csv"], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("variant,run,seed,srcc,plcc"));
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", "blur");
    let o = run(&["eval", "--checkpoint", "nope.safetensors", "--dataset", data.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn cross_refuses_the_same_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", "blur");
    let cfg = tiny_config(dir.path());
    let d = data.to_str().unwrap();
    let o = run(&["cross", "--config", cfg.to_str().unwrap(), "--train", d, "--test", d], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn unknown_device_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "d", "blur");
    let o = run(&["train", "--device", "cuda:0", "--dataset", data.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn report_ranks_a_results_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.csv");
    std::fs::write(&table, "method,dataset,srcc,plcc\nA,x,0.9,0.8\nB,x,0.8,0.9\nA,y,0.7,0.8\nB,y,0.6,0.75\n").unwrap();
    let o = run(&["report", "--ranks", table.to_str().unwrap(), "--format", "json"], dir.path());
    assert!(o.status.success(), "{}", text(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let a = v.as_array().unwrap().iter().find(|m| m["method"] == "A").unwrap();
    assert_eq!(a["avg_srcc_rank"], 1.0);
    assert_eq!(a["avg_plcc_rank"], 1.5);
}
