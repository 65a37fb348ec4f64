use std::path::Path;
use std::process::{Command, Output};

use cxr_core::ensemble::{evaluate_all_subsets, save_size_stats, subset_size_stats, EnsemblePool, SubsetMode};
use cxr_core::heads::{write_probabilities, ProbabilityRecord};
use cxr_core::metrics::{evaluate, roc_auc};

fn cxrkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxrkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn records(model: &str, shift: f64) -> Vec<ProbabilityRecord> {
    (0..40)
        .map(|i| {
            let label = (i % 2) as u8;
            let noise = ((i * 37) % 17) as f64 / 17.0;
            ProbabilityRecord {
                image_id: format!("img{i:02}"),
                model_id: model.into(),
                p_abnormal: (0.3 * noise + shift * label as f64 + 0.2).min(1.0),
                true_label: label,
            }
        })
        .collect()
}

fn write_model(dir: &Path, model: &str, shift: f64) {
    let recs = records(model, shift);
    std::fs::create_dir_all(dir).unwrap();
    let (curve, _) = roc_auc(&recs).unwrap();
    curve.write_csv(&dir.join("roc.csv")).unwrap();
    evaluate(&recs, 0.5).unwrap().save(&dir.join("metrics.json")).unwrap();
}

#[test]
fn bad_dataset_root_reports_the_ingest_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("exp.toml");
    std::fs::write(
        &config,
        "output_dir = \"out\"\n[[datasets]]\nsource = \"indiana\"\nroot = \"does-not-exist\"\n",
    )
    .unwrap();
    let out = cxrkit(&["ingest", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("ingest"), "{}", stderr(&out));
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("exp.toml");
    std::fs::write(&config, "threshold = 1.5\n").unwrap();
    let out = cxrkit(&["train", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn report_without_inputs_lists_what_is_missing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cxrkit(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing inputs"), "{}", stderr(&out));
    assert!(stderr(&out).contains("summary.json"), "{}", stderr(&out));
}

#[test]
fn default_config_parses_back() {
    let out = cxrkit(&["default-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("default.toml");
    std::fs::write(&path, &text).unwrap();
    let parsed = cxr_cli::ExperimentConfig::load(&path).unwrap();
    assert_eq!(parsed.seeds.len(), 9);
    assert_eq!(parsed.backbones.len(), 3);
}

#[test]
fn evaluate_runs_on_a_standalone_predictions_file() {
    let tmp = tempfile::tempdir().unwrap();
    let pred = tmp.path().join("pred.csv");
    write_probabilities(&pred, &records("solo", 0.5)).unwrap();
    let out_dir = tmp.path().join("eval");
    let out = cxrkit(&["evaluate", pred.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["metrics.json", "roc.csv", "operating_points.json"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("solo\taccuracy"), "{stdout}");
}

#[test]
fn roc_figure_has_one_legend_entry_per_curve() {
    let tmp = tempfile::tempdir().unwrap();
    for (i, name) in ["a", "b", "c", "d"].iter().enumerate() {
        write_model(&tmp.path().join("models").join(name).join("seed0"), name, 0.1 * (i + 1) as f64);
    }
    // Other seeds stay out of the overlay.
    write_model(&tmp.path().join("models").join("a").join("seed1"), "a", 0.3);
    let out = cxrkit(&["report", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let svg = std::fs::read_to_string(tmp.path().join("report").join("roc.svg")).unwrap();
    assert_eq!(svg.matches("(AUC ").count(), 4);
}

#[test]
fn roc_without_metrics_is_a_missing_input() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("models").join("a").join("seed0");
    write_model(&dir, "a", 0.3);
    std::fs::remove_file(dir.join("metrics.json")).unwrap();
    let out = cxrkit(&["report", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("metrics.json"), "{}", stderr(&out));
}

#[test]
fn boxplot_draws_one_box_per_subset_size() {
    let tmp = tempfile::tempdir().unwrap();
    let members = ["m0", "m1", "m2", "m3"]
        .iter()
        .enumerate()
        .map(|(i, m)| (m.to_string(), records(m, 0.1 * (i + 1) as f64)))
        .collect();
    let pool = EnsemblePool::new(members).unwrap();
    let results = evaluate_all_subsets(&pool, 0.5, SubsetMode::Exhaustive).unwrap();
    let stats = subset_size_stats(&results).unwrap();
    std::fs::create_dir_all(tmp.path().join("ensemble")).unwrap();
    save_size_stats(&tmp.path().join("ensemble").join("size_stats.json"), &stats).unwrap();
    let out = cxrkit(&["report", tmp.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let svg = std::fs::read_to_string(tmp.path().join("report").join("subset_sizes_accuracy.svg")).unwrap();
    let boxes = svg.lines().filter(|l| l.contains("<rect") && l.contains("opacity=\"0.3\"")).count();
    assert_eq!(boxes, 4, "{svg}");
}
