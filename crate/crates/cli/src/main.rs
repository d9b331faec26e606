use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pmt_iqa::checkpoint::Checkpoint;
use pmt_iqa::config::{ResolvedRun, RunConfig};
use pmt_iqa::dataset::{split_dataset, LoadedDataset, ResizePolicy, Split};
use pmt_iqa::metrics::{rank_methods, MethodResultTable};
use pmt_iqa::protocols::{self, EvalReport, ProtocolKind, RunResult};
use pmt_iqa::report;
use pmt_iqa::synthetic::{make_synthetic, SyntheticSpec};
use pmt_iqa::train::{evaluate, train, EpochRecord, TrainHooks, TrainingLog};
use pmt_iqa::{Error, Result};

#[derive(Parser)]
#[command(name = "pmt-iqa", version, about = "Train and evaluate blind image quality models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Compute device. Only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Also write SVG loss and correlation plots.
    #[arg(long)]
    plots: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on the training split and score the held-out split.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Manifest CSV, dataset directory, or name under $DATASET_ROOT.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Repeated split/train/test runs, or scoring of a saved checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Number of independent runs.
        #[arg(long)]
        runs: Option<usize>,
        /// Score this checkpoint on the whole dataset instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on one dataset and test on another.
    Cross {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Compare the four architecture variants at matched parameter counts.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Generate a synthetic distortion dataset.
    Synth {
        /// Number of images.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Side length of the square images.
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(8..))]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = DistortionArg::Blur)]
        distortion: DistortionArg,
        /// Severity levels including the pristine level.
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
        levels: u64,
        /// Dataset name (defaults to `synthetic_<distortion>`).
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
    },
    /// Render a saved report, plot a training log, or rank methods from a table.
    Report {
        /// EvalReport JSON.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Results table CSV with columns `method,dataset,srcc,plcc`.
        #[arg(long)]
        ranks: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Directory for SVG plots.
        #[arg(long)]
        plots: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DistortionArg {
    Blur,
    Noise,
    Jpeg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::InvalidConfig(_)
        | Error::MissingInput { .. }
        | Error::InvalidManifest { .. }
        | Error::InvalidCheckpoint { .. }
        | Error::InvalidImage { .. }
        | Error::DegenerateRange { .. }
        | Error::InsufficientData(_)
        | Error::OutOfRange(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// A path given on the command line: absolute if it exists relative to the working
/// directory, else left for resolution against `$DATASET_ROOT`.
fn cli_path(p: &Path) -> PathBuf {
    if p.exists() {
        std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
    } else {
        p.to_path_buf()
    }
}

fn load_config(run: &RunArgs, edit: impl FnOnce(&mut RunConfig)) -> Result<ResolvedRun> {
    if run.device != "cpu" {
        return Err(Error::InvalidConfig(format!("--device {}: only cpu is available", run.device)));
    }
    let (mut cfg, base) = match &run.config {
        Some(p) => (RunConfig::load(p, &run.overrides)?, p.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (RunConfig::parse("", &run.overrides)?, PathBuf::from(".")),
    };
    edit(&mut cfg);
    cfg.resolve(&base)
}

fn progress(quiet: bool) -> impl FnMut(&EpochRecord) {
    move |r: &EpochRecord| {
        if !quiet {
            let c = r.loss_c.map_or("-".to_string(), |c| format!("{c:.5}"));
            eprintln!(
                "epoch {:>4}  λ1={:.4} λ2={:.4}  L_r={:.5} L_c={c} L={:.5}",
                r.epoch, r.lambda1, r.lambda2, r.loss_r, r.loss_total
            );
        }
    }
}

fn write_report(report: &EvalReport, run: &RunArgs) -> Result<()> {
    std::fs::create_dir_all(&run.out)?;
    let json = run.out.join("report.json");
    report.save(&json)?;
    std::fs::write(run.out.join("report.csv"), report::render_csv(report)?)?;
    if run.plots {
        plot_curves(report, &run.out)?;
    }
    print!("{}", report::render_text(report));
    println!("report: {}", json.display());
    Ok(())
}

fn plot_curves(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for c in &report.curves {
        report::plot_losses(&c.log, &dir.join(format!("loss_seed{}.svg", c.seed)))?;
        if !c.log.eval.is_empty() {
            report::plot_correlations(&c.log, &dir.join(format!("corr_seed{}.svg", c.seed)))?;
        }
    }
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { run, dataset } => cmd_train(&run, dataset),
        Command::Eval { run, dataset, runs, checkpoint } => cmd_eval(&run, dataset, runs, checkpoint),
        Command::Cross { run, train, test, runs } => {
            let r = load_config(&run, |c| {
                if let Some(p) = &train {
                    c.dataset.manifest = cli_path(p);
                }
                if let Some(p) = &test {
                    c.dataset.test_manifest = Some(cli_path(p));
                }
                if let Some(n) = runs {
                    c.protocol.num_runs = Some(n);
                }
                if run.plots {
                    c.protocol.track_curves = Some(true);
                }
                c.protocol.kind = Some(ProtocolKind::CrossDatabase);
            })?;
            let test_manifest = r.test_manifest.clone().expect("resolve requires a test manifest");
            let train_ds = LoadedDataset::load(r.manifest.clone(), &r.resize)?;
            let test_ds = LoadedDataset::load(test_manifest, &r.resize)?;
            let report = protocols::run_cross(&train_ds, &test_ds, &r.setup, &r.options)?;
            write_report(&report, &run)
        }
        Command::Ablate { run, dataset, runs } => {
            let r = load_config(&run, |c| {
                if let Some(p) = &dataset {
                    c.dataset.manifest = cli_path(p);
                }
                if let Some(n) = runs {
                    c.protocol.num_runs = Some(n);
                }
                c.protocol.kind = Some(ProtocolKind::Ablation);
            })?;
            let ds = LoadedDataset::load(r.manifest.clone(), &r.resize)?;
            let report = protocols::run_ablation(&ds, &r.setup, &r.options)?;
            write_report(&report, &run)
        }
        Command::Synth { n, size, seed, distortion, levels, name, out } => {
            let kind = match distortion {
                DistortionArg::Blur => pmt_iqa::synthetic::Distortion::GaussianBlur,
                DistortionArg::Noise => pmt_iqa::synthetic::Distortion::GaussianNoise,
                DistortionArg::Jpeg => pmt_iqa::synthetic::Distortion::JpegLike,
            };
            let mut spec = SyntheticSpec::new(n as usize, size, kind, seed);
            spec.severity_levels = levels as usize;
            if let Some(name) = name {
                spec.name = name;
            }
            let (manifest, path) = make_synthetic(&spec, &out)?;
            println!("{} images of {:?} written", manifest.entries.len(), manifest.name);
            println!("{}", path.display());
            Ok(())
        }
        Command::Report { input, log, ranks, format, plots } => cmd_report(input, log, ranks, format, plots),
    }
}

fn log_header(r: &ResolvedRun, overrides: &[String]) -> Vec<(String, String)> {
    let s = &r.setup;
    let mut h: Vec<(String, String)> = vec![
        ("fingerprint".into(), s.fingerprint()),
        ("dataset".into(), r.manifest.name.clone()),
        ("variant".into(), s.model.variant.to_string()),
        ("seed".into(), s.train.seed.to_string()),
        ("learning_rate".into(), s.train.learning_rate.to_string()),
        ("batch_size".into(), s.train.batch_size.to_string()),
        ("max_epochs".into(), s.train.max_epochs.to_string()),
        ("xi".into(), s.train.xi.to_string()),
        ("weight_decay".into(), s.train.weight_decay.to_string()),
        ("dropout".into(), s.train.dropout_rate.to_string()),
        ("num_views".into(), s.num_views.to_string()),
        ("crop_size".into(), s.crop_size.to_string()),
    ];
    for o in overrides {
        h.push(("override".into(), o.clone()));
    }
    h
}

fn cmd_train(run: &RunArgs, dataset: Option<PathBuf>) -> Result<()> {
    let r = load_config(run, |c| {
        if let Some(p) = &dataset {
            c.dataset.manifest = cli_path(p);
        }
    })?;
    let ds = LoadedDataset::load(r.manifest.clone(), &r.resize)?;
    let (train_set, test_set) = split_dataset(&ds, r.options.train_fraction, r.setup.train.seed)?;
    let mut on_epoch = progress(run.quiet);
    let track = run.plots || r.options.track_curves;
    let hooks = TrainHooks { monitor: track.then_some(test_set.as_slice()), on_epoch: Some(&mut on_epoch) };
    let outcome = train(&train_set, &r.setup, hooks)?;

    std::fs::create_dir_all(&run.out)?;
    let ckpt_path = run.out.join("checkpoint.safetensors");
    outcome.checkpoint.save(&ckpt_path)?;
    if let Some((best, srcc)) = &outcome.best {
        best.save(&run.out.join("best.safetensors"))?;
        println!("best validation SRCC {srcc:.4} at epoch {}", best.epoch);
    }
    let log_path = run.out.join("train_log.csv");
    outcome.log.write_csv(&log_path, &log_header(&r, &run.overrides))?;
    if run.plots {
        report::plot_losses(&outcome.log, &run.out.join("loss.svg"))?;
        report::plot_correlations(&outcome.log, &run.out.join("correlation.svg"))?;
    }
    let c = evaluate(&outcome.model, &test_set, &r.setup.view_policy())?;
    println!("test SRCC {:.4}  PLCC {:.4}  ({} train / {} test images)", c.srcc, c.plcc, train_set.len(), test_set.len());
    println!("checkpoint: {}", ckpt_path.display());
    println!("log: {}", log_path.display());
    Ok(())
}

fn cmd_eval(run: &RunArgs, dataset: Option<PathBuf>, runs: Option<usize>, checkpoint: Option<PathBuf>) -> Result<()> {
    if let Some(path) = checkpoint {
        if run.device != "cpu" {
            return Err(Error::InvalidConfig(format!("--device {}: only cpu is available", run.device)));
        }
        let ckpt = Checkpoint::load(&path)?;
        let dataset = dataset.ok_or_else(|| Error::InvalidConfig("`--dataset` is required with --checkpoint".into()))?;
        let mut cfg = RunConfig::parse("", &[])?;
        cfg.dataset.manifest = cli_path(&dataset);
        cfg.dataset.crop_size = Some(ckpt.setup.crop_size);
        let resolved = cfg.resolve(Path::new("."))?;
        let resize = ResizePolicy { crop_size: ckpt.setup.crop_size, ..resolved.resize };
        let ds = LoadedDataset::load(resolved.manifest, &resize)?;
        let model = ckpt.to_model(&pmt_iqa::Device::Cpu)?;
        let c = evaluate(&model, &ds.all_as(Split::Test), &ckpt.setup.view_policy())?;
        let same = ckpt.setup.train.dataset == ds.name();
        let report = EvalReport {
            protocol: if same { ProtocolKind::WithinDataset } else { ProtocolKind::CrossDatabase },
            train_dataset: ckpt.setup.train.dataset.clone(),
            test_dataset: ds.name().to_string(),
            config_fingerprint: ckpt.fingerprint.clone(),
            runs: vec![RunResult { seed: ckpt.setup.train.seed, srcc: c.srcc, plcc: c.plcc }],
            median: Some(c),
            variants: None,
            params: Some(model.param_count()),
            reference: None,
            curves: Vec::new(),
        };
        return write_report(&report, run);
    }
    let r = load_config(run, |c| {
        if let Some(p) = &dataset {
            c.dataset.manifest = cli_path(p);
        }
        if let Some(n) = runs {
            c.protocol.num_runs = Some(n);
        }
        if run.plots {
            c.protocol.track_curves = Some(true);
        }
        c.protocol.kind = Some(ProtocolKind::WithinDataset);
    })?;
    let ds = LoadedDataset::load(r.manifest.clone(), &r.resize)?;
    let report = protocols::run_within(&ds, &r.setup, &r.options)?;
    write_report(&report, run)
}

fn cmd_report(input: Option<PathBuf>, log: Option<PathBuf>, ranks: Option<PathBuf>, format: Format, plots: Option<PathBuf>) -> Result<()> {
    if input.is_none() && log.is_none() && ranks.is_none() {
        return Err(Error::InvalidConfig("give at least one of --input, --log, --ranks".into()));
    }
    if let Some(p) = input {
        let rep = EvalReport::load(&p)?;
        match format {
            Format::Text => print!("{}", report::render_text(&rep)),
            Format::Csv => print!("{}", report::render_csv(&rep)?),
            Format::Json => println!("{}", serde_json::to_string_pretty(&rep)?),
        }
        if let Some(dir) = &plots {
            plot_curves(&rep, dir)?;
        }
    }
    if let Some(p) = log {
        let (_, rows) = TrainingLog::read_csv(&p)
            .map_err(|e| Error::MissingInput { path: p.clone(), reason: e.to_string() })?;
        let dir = plots.clone().unwrap_or_else(|| p.parent().map(Path::to_path_buf).unwrap_or_default());
        std::fs::create_dir_all(&dir)?;
        let out = dir.join("loss.svg");
        report::plot_losses(&TrainingLog { rows, eval: Vec::new() }, &out)?;
        println!("plot: {}", out.display());
    }
    if let Some(p) = ranks {
        let file = std::fs::File::open(&p).map_err(|e| Error::MissingInput { path: p.clone(), reason: e.to_string() })?;
        let table = MethodResultTable::from_csv_reader(file)?;
        let ranked = rank_methods(&table)?;
        match format {
            Format::Json => println!("{}", serde_json::to_string_pretty(&ranked)?),
            _ => print!("{}", report::render_ranks(&ranked, &table)),
        }
    }
    Ok(())
}
