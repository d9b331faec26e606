//! Rendering of evaluation reports and training curves.

use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{MethodRank, MethodResultTable};
use crate::protocols::{EvalReport, ProtocolKind};
use crate::train::TrainingLog;

pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let kind = match report.protocol {
        ProtocolKind::WithinDataset => "within-dataset",
        ProtocolKind::CrossDatabase => "cross-database",
        ProtocolKind::Ablation => "ablation",
    };
    let _ = writeln!(out, "protocol: {kind}");
    let _ = writeln!(out, "train: {}  test: {}", report.train_dataset, report.test_dataset);
    let _ = writeln!(out, "config: {}", report.config_fingerprint);
    if let Some(p) = report.params {
        let _ = writeln!(out, "trainable parameters: {p}");
    }
    match &report.variants {
        Some(vs) => {
            let _ = writeln!(out, "{:<12} {:>12} {:>8} {:>8}", "variant", "params", "SRCC", "PLCC");
            for v in vs {
                let _ = writeln!(out, "{:<12} {:>12} {:>8.4} {:>8.4}", v.variant.name(), v.params, v.median.srcc, v.median.plcc);
            }
        }
        None => {
            let _ = writeln!(out, "{:>6} {:>20} {:>8} {:>8}", "run", "seed", "SRCC", "PLCC");
            for (i, r) in report.runs.iter().enumerate() {
                let _ = writeln!(out, "{:>6} {:>20} {:>8.4} {:>8.4}", i, r.seed, r.srcc, r.plcc);
            }
            if let Some(m) = report.median {
                let _ = writeln!(out, "{:>6} {:>20} {:>8.4} {:>8.4}", "median", "", m.srcc, m.plcc);
            }
        }
    }
    if let Some(r) = report.reference {
        match r.plcc {
            Some(p) => {
                let _ = writeln!(out, "published: SRCC {:.3} PLCC {:.3}", r.srcc, p);
            }
            None => {
                let _ = writeln!(out, "published: SRCC {:.3}", r.srcc);
            }
        }
    }
    out
}

/// One CSV row per run (or per variant run for ablations).
pub fn render_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["variant", "run", "seed", "srcc", "plcc"])?;
    let rows: Vec<(String, &[crate::protocols::RunResult])> = match &report.variants {
        Some(vs) => vs.iter().map(|v| (v.variant.name().to_string(), v.runs.as_slice())).collect(),
        None => vec![(String::new(), report.runs.as_slice())],
    };
    for (name, runs) in rows {
        for (i, r) in runs.iter().enumerate() {
            w.write_record([name.clone(), i.to_string(), r.seed.to_string(), r.srcc.to_string(), r.plcc.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn render_ranks(ranks: &[MethodRank], table: &MethodResultTable) -> String {
    let datasets = table.datasets();
    let mut out = String::new();
    let _ = write!(out, "{:<14}", "method");
    for d in &datasets {
        let _ = write!(out, " {:>10}", format!("{d} S/P"));
    }
    let _ = writeln!(out, " {:>8} {:>8} {:>6} {:>6}", "avg S", "avg P", "#S", "#P");
    for r in ranks {
        let _ = write!(out, "{:<14}", r.method);
        for d in &datasets {
            let s = r.srcc_ranks.get(d).map_or("-".into(), |v| v.to_string());
            let p = r.plcc_ranks.get(d).map_or("-".into(), |v| v.to_string());
            let _ = write!(out, " {:>10}", format!("{s}/{p}"));
        }
        let _ = writeln!(out, " {:>8.2} {:>8.2} {:>6} {:>6}", r.avg_srcc_rank, r.avg_plcc_rank, r.overall_srcc, r.overall_plcc);
    }
    out
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Loss components against epoch.
pub fn plot_losses(log: &TrainingLog, path: &Path) -> Result<()> {
    if log.rows.is_empty() {
        return Err(Error::Empty("training log has no rows".into()));
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x0 = log.rows[0].epoch as f64;
    let x1 = log.rows.last().unwrap().epoch as f64 + 1.0;
    let ys = log.rows.iter().flat_map(|r| [Some(r.loss_r), r.loss_c, Some(r.loss_total)]).flatten();
    let (y0, y1) = bounds(ys);
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").y_desc("loss").draw().map_err(plot_err)?;
    let series: [(&str, RGBColor, Vec<(f64, f64)>); 3] = [
        ("L_r", BLUE, log.rows.iter().map(|r| (r.epoch as f64, r.loss_r)).collect()),
        ("L_c", RED, log.rows.iter().filter_map(|r| r.loss_c.map(|c| (r.epoch as f64, c))).collect()),
        ("total", BLACK, log.rows.iter().map(|r| (r.epoch as f64, r.loss_total)).collect()),
    ];
    for (name, color, pts) in series {
        if pts.is_empty() {
            continue;
        }
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Monitored SRCC and PLCC against epoch.
pub fn plot_correlations(log: &TrainingLog, path: &Path) -> Result<()> {
    if log.eval.is_empty() {
        return Err(Error::Empty("training log has no per-epoch evaluation".into()));
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x0 = log.eval[0].epoch as f64;
    let x1 = log.eval.last().unwrap().epoch as f64 + 1.0;
    let (y0, y1) = bounds(log.eval.iter().flat_map(|e| [e.srcc, e.plcc]));
    let mut chart = ChartBuilder::on(&root)
        .caption("test correlation", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0.max(-1.0)..y1.min(1.0))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(plot_err)?;
    for (name, color, pts) in [
        ("SRCC", BLUE, log.eval.iter().map(|e| (e.epoch as f64, e.srcc)).collect::<Vec<_>>()),
        ("PLCC", RED, log.eval.iter().map(|e| (e.epoch as f64, e.plcc)).collect()),
    ] {
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Correlation;
    use crate::protocols::RunResult;
    use crate::train::{EpochEval, EpochRecord};

    fn report() -> EvalReport {
        EvalReport {
            protocol: ProtocolKind::WithinDataset,
            train_dataset: "d".into(),
            test_dataset: "d".into(),
            config_fingerprint: "abc".into(),
            runs: vec![RunResult { seed: 1, srcc: 0.5, plcc: 0.6 }, RunResult { seed: 2, srcc: 0.7, plcc: 0.8 }],
            median: Some(Correlation { srcc: 0.5, plcc: 0.6 }),
            variants: None,
            params: Some(10),
            reference: None,
            curves: Vec::new(),
        }
    }

    #[test]
    fn csv_has_one_row_per_run() {
        let csv = render_csv(&report()).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().ends_with("0.7,0.8"));
    }

    #[test]
    fn text_lists_median() {
        assert!(render_text(&report()).contains("median"));
    }

    #[test]
    fn plots_write_svg() {
        let dir = tempfile::tempdir().unwrap();
        let log = TrainingLog {
            rows: (0..5)
                .map(|e| EpochRecord { epoch: e, lambda1: 0.1, lambda2: 0.9, loss_r: 1.0 / (e + 1) as f64, loss_c: Some(0.5), loss_total: 0.7 })
                .collect(),
            eval: (0..5).map(|e| EpochEval { epoch: e, srcc: 0.1 * e as f64, plcc: 0.12 * e as f64 }).collect(),
        };
        plot_losses(&log, &dir.path().join("l.svg")).unwrap();
        plot_correlations(&log, &dir.path().join("c.svg")).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("l.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(plot_correlations(&TrainingLog::default(), &dir.path().join("x.svg")).is_err());
    }
}
