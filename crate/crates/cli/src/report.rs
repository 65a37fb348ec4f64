//! SVG figures rendered from a result directory. Every plotted number is
//! read from an artifact file; nothing is recomputed here.

use std::path::{Path, PathBuf};

use cxr_core::ensemble::SizeStats;
use cxr_core::metrics::{MetricsReport, RocCurve};
use plotters::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{read_json, HistogramReport, SummaryRow, SweepCurve, RESOLVED_CONFIG_FILE};

const SIZE: (u32, u32) = (900, 650);

/// Figures written by [`render_report`], in rendering order.
#[derive(Debug, Default)]
pub struct ReportOutputs {
    pub figures: Vec<PathBuf>,
    /// Overlay images already produced by localization.
    pub overlays: Vec<PathBuf>,
}

struct RocInput {
    label: String,
    points: Vec<(f64, f64)>,
    auc: f64,
}

fn plot_err(path: &Path) -> impl Fn(String) -> CliError + '_ {
    move |message| CliError::Plot {
        path: path.to_path_buf(),
        message,
    }
}

macro_rules! p {
    ($path:expr, $e:expr) => {
        $e.map_err(|e| plot_err($path)(e.to_string()))?
    };
}

fn palette(i: usize) -> RGBColor {
    const COLORS: [RGBColor; 8] = [
        RGBColor(31, 119, 180),
        RGBColor(214, 39, 40),
        RGBColor(44, 160, 44),
        RGBColor(148, 103, 189),
        RGBColor(255, 127, 14),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
        RGBColor(23, 190, 207),
    ];
    COLORS[i % COLORS.len()]
}

fn find_files(dir: &Path, name: &str, out: &mut Vec<PathBuf>) {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return;
    };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            if p.file_name().is_some_and(|n| n != "cache" && n != "report") {
                find_files(&p, name, out);
            }
        } else if p.file_name().is_some_and(|n| n == name) {
            out.push(p);
        }
    }
}

fn seed_component(path: &Path) -> Option<u64> {
    path.components()
        .filter_map(|c| c.as_os_str().to_str()?.strip_prefix("seed")?.parse().ok())
        .next()
}

/// ROC files to overlay: per-model curves are limited to one seed.
fn roc_inputs(dir: &Path) -> CliResult<Vec<RocInput>> {
    let mut files = Vec::new();
    find_files(dir, "roc.csv", &mut files);
    let chosen_seed = ExperimentConfig::load(&dir.join(RESOLVED_CONFIG_FILE))
        .map(|c| c.ensemble.split_seed)
        .ok()
        .or_else(|| files.iter().filter_map(|f| seed_component(f.strip_prefix(dir).ok()?)).min());
    let files: Vec<PathBuf> = files
        .into_iter()
        .filter(|f| {
            let rel = f.strip_prefix(dir).unwrap_or(f);
            seed_component(rel).is_none_or(|s| Some(s) == chosen_seed)
        })
        .collect();
    let missing: Vec<PathBuf> = files
        .iter()
        .map(|f| f.with_file_name("metrics.json"))
        .filter(|m| !m.is_file())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingInputs(missing));
    }
    files
        .iter()
        .map(|f| {
            let stage = |e: cxr_core::Error| CliError::Stage { stage: "report", source: e };
            let points = RocCurve::read_csv(f).map_err(stage)?;
            let metrics: MetricsReport = read_json(&f.with_file_name("metrics.json")).map_err(stage)?;
            let rel = f.parent().and_then(|p| p.strip_prefix(dir).ok()).unwrap_or(Path::new("."));
            let label = rel.strip_prefix("models").unwrap_or(rel).display().to_string();
            Ok(RocInput {
                label,
                points: points.into_iter().map(|(_, fpr, tpr)| (fpr, tpr)).collect(),
                auc: metrics.auc,
            })
        })
        .collect()
}

fn render_roc(path: &Path, curves: &[RocInput]) -> CliResult<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    p!(path, root.fill(&WHITE));
    let mut chart = p!(
        path,
        ChartBuilder::on(&root)
            .caption("ROC", ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(45)
            .y_label_area_size(55)
            .build_cartesian_2d(0f64..1f64, 0f64..1f64)
    );
    p!(path, chart.configure_mesh().x_desc("False positive rate").y_desc("True positive rate").draw());
    p!(path, chart.draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], BLACK.mix(0.3))));
    for (i, c) in curves.iter().enumerate() {
        let color = palette(i);
        p!(path, chart.draw_series(LineSeries::new(c.points.iter().copied(), color.stroke_width(2))))
            .label(format!("{} (AUC {:.3})", c.label, c.auc))
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    p!(
        path,
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
    );
    p!(path, root.present());
    Ok(())
}

/// One box per subset size: whiskers at min/max, box at the quartiles.
fn render_boxplot(path: &Path, stats: &[SizeStats], metric: &str, pick: fn(&SizeStats) -> cxr_core::ensemble::Quartiles) -> CliResult<()> {
    let lo = stats.iter().map(|s| pick(s).min).fold(1.0, f64::min);
    let hi = stats.iter().map(|s| pick(s).max).fold(0.0, f64::max);
    let pad = ((hi - lo) * 0.1).max(0.01);
    let max_size = stats.iter().map(|s| s.size).max().unwrap_or(1) as f64;
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    p!(path, root.fill(&WHITE));
    let mut chart = p!(
        path,
        ChartBuilder::on(&root)
            .caption(format!("Ensemble {metric} by subset size"), ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(45)
            .y_label_area_size(55)
            .build_cartesian_2d(0.4f64..max_size + 0.6, (lo - pad).max(0.0)..(hi + pad).min(1.0))
    );
    p!(path, chart.configure_mesh().x_desc("Models in ensemble").y_desc(metric).x_labels(stats.len().min(24)).draw());
    let color = palette(0);
    for s in stats {
        let q = pick(s);
        let x = s.size as f64;
        let w = 0.3;
        p!(path, chart.draw_series([Rectangle::new([(x - w, q.q25), (x + w, q.q75)], color.mix(0.3).filled())]));
        p!(path, chart.draw_series([Rectangle::new([(x - w, q.q25), (x + w, q.q75)], color.stroke_width(1))]));
        for seg in [
            vec![(x - w, q.median), (x + w, q.median)],
            vec![(x, q.q75), (x, q.max)],
            vec![(x, q.q25), (x, q.min)],
            vec![(x - w / 2.0, q.max), (x + w / 2.0, q.max)],
            vec![(x - w / 2.0, q.min), (x + w / 2.0, q.min)],
        ] {
            p!(path, chart.draw_series([PathElement::new(seg, BLACK.stroke_width(1))]));
        }
    }
    p!(path, root.present());
    Ok(())
}

/// Mean accuracy per backbone/layer with ± sd error bars.
fn render_layer_bars(path: &Path, rows: &[SummaryRow]) -> CliResult<()> {
    let hi = rows.iter().map(|r| r.accuracy.mean + r.accuracy.sd).fold(0.0, f64::max).min(1.0);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    p!(path, root.fill(&WHITE));
    let labels: Vec<String> = rows.iter().map(|r| r.model.clone()).collect();
    let mut chart = p!(
        path,
        ChartBuilder::on(&root)
            .caption("Accuracy by backbone and layer", ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(60)
            .y_label_area_size(55)
            .build_cartesian_2d(-0.5f64..rows.len() as f64 - 0.5, 0f64..(hi + 0.05).min(1.0))
    );
    p!(
        path,
        chart
            .configure_mesh()
            .y_desc("Accuracy")
            .x_labels(rows.len())
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 {
                    labels.get(i as usize).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .draw()
    );
    for (i, r) in rows.iter().enumerate() {
        let x = i as f64;
        let (m, sd) = (r.accuracy.mean, r.accuracy.sd);
        p!(path, chart.draw_series([Rectangle::new([(x - 0.35, 0.0), (x + 0.35, m)], palette(i).mix(0.7).filled())]));
        for seg in [
            vec![(x, m - sd), (x, m + sd)],
            vec![(x - 0.1, m - sd), (x + 0.1, m - sd)],
            vec![(x - 0.1, m + sd), (x + 0.1, m + sd)],
        ] {
            p!(path, chart.draw_series([PathElement::new(seg, BLACK.stroke_width(1))]));
        }
    }
    p!(path, root.present());
    Ok(())
}

/// Accuracy against training-set size, one line per model, ± sd bars.
fn render_size_curves(path: &Path, curves: &[SweepCurve]) -> CliResult<()> {
    let max_n = curves.iter().flat_map(|c| c.points.iter().map(|p| p.n_train)).max().unwrap_or(1) as f64;
    let lo = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.accuracy.mean - p.accuracy.sd))
        .fold(1.0, f64::min);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    p!(path, root.fill(&WHITE));
    let mut chart = p!(
        path,
        ChartBuilder::on(&root)
            .caption("Accuracy by training size", ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(45)
            .y_label_area_size(55)
            .build_cartesian_2d(0f64..max_n * 1.05, (lo - 0.05).max(0.0)..1f64)
    );
    p!(path, chart.configure_mesh().x_desc("Training images per class").y_desc("Accuracy").draw());
    for (i, c) in curves.iter().enumerate() {
        let color = palette(i);
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.n_train as f64, p.accuracy.mean)).collect();
        p!(path, chart.draw_series(LineSeries::new(pts.clone(), color.stroke_width(2))))
            .label(c.model.clone())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        p!(path, chart.draw_series(pts.iter().map(|&(x, y)| Circle::new((x, y), 3, color.filled()))));
        for p in &c.points {
            let x = p.n_train as f64;
            let (m, sd) = (p.accuracy.mean, p.accuracy.sd);
            p!(path, chart.draw_series([PathElement::new([(x, m - sd), (x, m + sd)], color.stroke_width(1))]));
        }
    }
    p!(
        path,
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::LowerRight)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
    );
    p!(path, root.present());
    Ok(())
}

/// Average heat-map value histogram over the localized images.
fn render_histogram(path: &Path, report: &HistogramReport) -> CliResult<()> {
    let freqs = &report.average.frequencies;
    let bins = freqs.len().max(1) as f64;
    let hi = freqs.iter().copied().fold(0.0, f64::max);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    p!(path, root.fill(&WHITE));
    let mut chart = p!(
        path,
        ChartBuilder::on(&root)
            .caption(format!("Heat-map probabilities ({} images)", report.average.maps), ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(45)
            .y_label_area_size(55)
            .build_cartesian_2d(0f64..1f64, 0f64..(hi * 1.1).max(0.01))
    );
    p!(path, chart.configure_mesh().x_desc("Probability").y_desc("Frequency").draw());
    let color = palette(1);
    p!(
        path,
        chart.draw_series(freqs.iter().enumerate().map(|(i, &f)| {
            let x0 = i as f64 / bins;
            Rectangle::new([(x0, 0.0), (x0 + 1.0 / bins, f)], color.mix(0.6).filled())
        }))
    );
    p!(path, root.present());
    Ok(())
}

/// Renders every figure whose inputs exist under `dir` into `dir/report`.
/// Fails with the list of expected files when none exist.
pub fn render_report(dir: &Path) -> CliResult<ReportOutputs> {
    let out_dir = dir.join("report");
    let summary = dir.join("summary.json");
    let size_stats = dir.join("ensemble").join("size_stats.json");
    let sweep = dir.join("size_sweep.json");
    let histograms = dir.join("localization").join("histograms.json");
    let curves = roc_inputs(dir)?;

    if curves.is_empty() && ![&summary, &size_stats, &sweep, &histograms].iter().any(|p| p.is_file()) {
        return Err(CliError::MissingInputs(vec![
            dir.join("**").join("roc.csv"),
            summary,
            size_stats,
            sweep,
            histograms,
        ]));
    }
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Stage {
        stage: "report",
        source: cxr_core::Error::io(&out_dir, e),
    })?;
    let load = |e: cxr_core::Error| CliError::Stage { stage: "report", source: e };
    let mut outputs = ReportOutputs::default();

    if !curves.is_empty() {
        let path = out_dir.join("roc.svg");
        render_roc(&path, &curves)?;
        outputs.figures.push(path);
    }
    if size_stats.is_file() {
        let stats: Vec<SizeStats> = read_json(&size_stats).map_err(load)?;
        let path = out_dir.join("subset_sizes_accuracy.svg");
        render_boxplot(&path, &stats, "Accuracy", |s| s.accuracy)?;
        outputs.figures.push(path);
        let path = out_dir.join("subset_sizes_auc.svg");
        render_boxplot(&path, &stats, "AUC", |s| s.auc)?;
        outputs.figures.push(path);
    }
    if summary.is_file() {
        let rows: Vec<SummaryRow> = read_json(&summary).map_err(load)?;
        let path = out_dir.join("layers.svg");
        render_layer_bars(&path, &rows)?;
        outputs.figures.push(path);
    }
    if sweep.is_file() {
        let curves: Vec<SweepCurve> = read_json(&sweep).map_err(load)?;
        let path = out_dir.join("size_sweep.svg");
        render_size_curves(&path, &curves)?;
        outputs.figures.push(path);
    }
    if histograms.is_file() {
        let report: HistogramReport = read_json(&histograms).map_err(load)?;
        let path = out_dir.join("histograms.svg");
        render_histogram(&path, &report)?;
        outputs.figures.push(path);
        let mut overlays = Vec::new();
        if let Ok(entries) = std::fs::read_dir(dir.join("localization")) {
            overlays = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.to_string_lossy().ends_with("_overlay.png"))
                .collect();
            overlays.sort();
        }
        outputs.overlays = overlays;
    }
    Ok(outputs)
}
