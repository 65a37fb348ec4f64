//! Experiment stages. Every stage reads its inputs from, and writes its
//! artifacts under, the configured output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cxr_core::backbones::{load_backbone, Backbone, FeatureExtractor, FeatureSource, FeatureStore, FeatureVector};
use cxr_core::datasets::{load_manifest, make_balanced_split, make_size_sweep, DatasetManifest, SplitSpec};
use cxr_core::ensemble::{
    average_probabilities, for_each_subset, tune_threshold, EnsemblePool, SizeStatsAccumulator, SubsetCsv,
};
use cxr_core::heads::{
    fuse_features, read_probabilities, run_multi_seed, run_split, split_features, write_probabilities,
    ProbabilityRecord, SplitSizes, TrainedHead,
};
use cxr_core::localization::{
    average_histograms, binarize_lowest_fraction, heatmap_histogram, marked_centroid, occlusion_map, render_overlay,
    HeadScorer, Histogram, HistogramAverage, Scorer,
};
use cxr_core::metrics::{evaluate, operating_point, roc_auc, MeanSd, MetricsReport, OperatingPoint, OperatingTarget, RunSummary};
use cxr_core::raster::{Mask, Raster};
use cxr_core::rulebased::{
    compute_rule_features, save_rule_features, train_rule_classifier, AtlasPool, BlockMatching,
    DenseCorrespondence, Identity, RuleFeatures,
};
use cxr_core::backbones::ExternalScorer;
use cxr_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BackboneConfig, CorrespondenceKind, ExperimentConfig, Roi};
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
const INPUTS_FILE: &str = "inputs.json";

/// Sensitivity and specificity targets reported as operating points.
pub const OPERATING_TARGETS: [OperatingTarget; 4] = [
    OperatingTarget::Sensitivity(0.95),
    OperatingTarget::Sensitivity(0.98),
    OperatingTarget::Specificity(0.95),
    OperatingTarget::Specificity(0.98),
];

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// A configured experiment bound to its output directory.
pub struct Run {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Run {
    /// Creates the output directory and persists the resolved config.
    pub fn open(config: ExperimentConfig) -> CliResult<Self> {
        let config = config.resolved();
        let out = config.output_dir.clone();
        let setup = || -> Result<()> {
            config.validate()?;
            ensure_dir(&out)?;
            let path = out.join(RESOLVED_CONFIG_FILE);
            std::fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))
        };
        setup().map_err(CliError::stage("config"))?;
        Ok(Self { config, out })
    }

    fn manifest(&self) -> Result<DatasetManifest> {
        DatasetManifest::load(&self.out.join(MANIFEST_FILE))
    }

    fn split_path(&self, seed: u64) -> PathBuf {
        self.out.join("splits").join(format!("seed{seed}.json"))
    }

    fn sweep_split_path(&self, seed: u64, size: usize) -> PathBuf {
        self.out.join("splits").join("sweep").join(format!("seed{seed}_train{size}.json"))
    }

    fn store_path(&self, backbone: &BackboneConfig) -> PathBuf {
        match &backbone.features {
            Some(p) => p.clone(),
            None => {
                let spec = backbone.spec();
                self.out.join("features").join(format!("{}_{}.csv", spec.family, spec.tap_layer))
            }
        }
    }

    fn model_dir(&self, model_id: &str) -> PathBuf {
        self.out.join("models").join(model_id)
    }

    fn load_store(&self, backbone: &BackboneConfig) -> Result<FeatureStore> {
        let store = FeatureStore::load(&self.store_path(backbone))?;
        let spec = backbone.spec();
        if store.spec.key() != spec.key() {
            return Err(Error::validation(format!(
                "feature store {} holds `{}`, config expects `{}`",
                self.store_path(backbone).display(),
                store.spec.key(),
                spec.key()
            )));
        }
        Ok(store)
    }

    fn split_sizes(&self) -> SplitSizes {
        SplitSizes {
            n_train: self.config.split.n_train,
            n_test: self.config.split.n_test,
        }
    }

    fn ensemble_split(&self) -> Result<SplitSpec> {
        SplitSpec::load(&self.split_path(self.config.ensemble.split_seed))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetDigest {
    source: String,
    root: PathBuf,
    records: usize,
    sha256: String,
}

/// Loads every dataset, writes the merged manifest, the per-seed splits and
/// the size-sweep splits, and fingerprints the inputs.
pub fn ingest(run: &Run) -> CliResult<DatasetManifest> {
    let c = &run.config;
    let inner = || -> Result<DatasetManifest> {
        let mut manifests = Vec::new();
        let mut digests = Vec::new();
        for d in &c.datasets {
            let m = load_manifest(&d.root, d.source)?;
            log::info!("ingested {} records from {} ({})", m.len(), d.root.display(), d.source);
            digests.push(DatasetDigest {
                source: d.source.to_string(),
                root: d.root.clone(),
                records: m.len(),
                sha256: dataset_digest(&m)?,
            });
            manifests.push(m);
        }
        let manifest = DatasetManifest::merge(manifests)?;
        manifest.save(&run.out.join(MANIFEST_FILE))?;

        let mut inputs: BTreeMap<String, String> = BTreeMap::new();
        for d in &digests {
            inputs.insert(format!("dataset:{}:{}", d.source, d.root.display()), d.sha256.clone());
        }
        for b in &c.backbones {
            let key = b.spec().key();
            if let Some(f) = &b.features {
                inputs.insert(format!("features:{key}"), sha256_file(f)?);
            } else {
                let backbone = load_backbone(&b.spec(), &b.weights_source())?;
                inputs.insert(format!("weights:{key}"), backbone.checksum().to_string());
            }
        }
        write_json(&run.out.join(INPUTS_FILE), &inputs)?;

        let opts = c.split.options();
        for &seed in &c.seeds {
            make_balanced_split(&manifest, &c.abnormality, c.split.n_train, c.split.n_test, seed, opts)?
                .save(&ensure_file(run.split_path(seed))?)?;
        }
        if c.size_sweep.enabled {
            let sweep = make_size_sweep(&manifest, &c.abnormality, &c.size_sweep.sizes, c.split.n_test, &c.seeds, opts)?;
            for s in sweep {
                s.save(&ensure_file(run.sweep_split_path(s.seed, s.train_pos.len()))?)?;
            }
        }
        Ok(manifest)
    };
    inner().map_err(CliError::stage("ingest"))
}

fn ensure_file(path: PathBuf) -> Result<PathBuf> {
    ensure_parent(&path)?;
    Ok(path)
}

/// Digest over `(id, image bytes, mask bytes)` in id order.
fn dataset_digest(manifest: &DatasetManifest) -> Result<String> {
    let mut records: Vec<_> = manifest.records.iter().collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let lines = records
        .par_iter()
        .map(|r| {
            let mut line = format!("{}\t{}", r.id, sha256_file(&r.path)?);
            for m in [&r.masks.lung_left, &r.masks.lung_right, &r.masks.heart].into_iter().flatten() {
                line.push('\t');
                line.push_str(&sha256_file(m)?);
            }
            line.push('\n');
            Ok(line)
        })
        .collect::<Result<Vec<String>>>()?;
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Every image id referenced by a saved split.
fn split_ids(run: &Run) -> Result<BTreeSet<String>> {
    let mut paths: Vec<PathBuf> = run.config.seeds.iter().map(|&s| run.split_path(s)).collect();
    if run.config.size_sweep.enabled {
        for &seed in &run.config.seeds {
            for &size in &run.config.size_sweep.sizes {
                paths.push(run.sweep_split_path(seed, size));
            }
        }
    }
    let mut ids = BTreeSet::new();
    for p in paths {
        ids.extend(SplitSpec::load(&p)?.all_ids().map(str::to_string));
    }
    Ok(ids)
}

/// Runs each backbone over the split images and writes one feature store per
/// backbone. Backbones configured with a precomputed store are skipped.
pub fn extract(run: &Run) -> CliResult<()> {
    let inner = || -> Result<()> {
        let manifest = run.manifest()?;
        let ids = split_ids(run)?;
        let ids: Vec<&str> = ids.iter().map(String::as_str).collect();
        for b in &run.config.backbones {
            let spec = b.spec();
            if b.features.is_some() {
                let store = run.load_store(b)?;
                if let Some(id) = ids.iter().find(|id| store.get(id).is_none()) {
                    return Err(Error::validation(format!("feature store for `{}` lacks image `{id}`", spec.key())));
                }
                continue;
            }
            let backbone = load_backbone(&spec, &b.weights_source())?;
            let cache_dir = run.out.join("cache").join(format!("{}_{}", spec.family, spec.tap_layer));
            let extractor = FeatureExtractor::new(backbone.clone()).with_cache(&cache_dir)?;
            log::info!("extracting {} images with {}", ids.len(), spec.key());
            let vectors = extractor.features_for(&manifest, &ids)?;
            let path = run.store_path(b);
            ensure_parent(&path)?;
            FeatureStore::new(spec, backbone.checksum(), vectors)?.save(&path)?;
        }
        Ok(())
    };
    inner().map_err(CliError::stage("extract"))
}

fn save_model_outputs(dir: &Path, predictions: &[ProbabilityRecord], report: &MetricsReport) -> Result<()> {
    ensure_dir(dir)?;
    write_probabilities(&dir.join("predictions.csv"), predictions)?;
    write_json(&dir.join("metrics.json"), report)?;
    roc_auc(predictions)?.0.write_csv(&dir.join("roc.csv"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub runs: usize,
    pub accuracy: MeanSd,
    pub auc: MeanSd,
    pub sensitivity: MeanSd,
    pub specificity: MeanSd,
}

impl SummaryRow {
    fn new(model: String, s: &RunSummary) -> Self {
        Self {
            model,
            runs: s.runs,
            accuracy: s.accuracy,
            auc: s.auc,
            sensitivity: s.sensitivity,
            specificity: s.specificity,
        }
    }
}

/// Multi-seed training per backbone; per-seed artifacts plus a mean ± sd table.
pub fn train(run: &Run) -> CliResult<Vec<SummaryRow>> {
    let c = &run.config;
    let inner = || -> Result<Vec<SummaryRow>> {
        let manifest = run.manifest()?;
        let mut rows = Vec::new();
        for b in &c.backbones {
            let store = run.load_store(b)?;
            let key = store.spec.key();
            log::info!("training {} heads on {key}", c.seeds.len());
            let result = run_multi_seed(
                &manifest,
                &c.abnormality,
                &store,
                &c.head,
                &c.seeds,
                run.split_sizes(),
                c.split.options(),
            )?;
            for r in &result.runs {
                let report = if c.threshold == 0.5 {
                    r.report.clone()
                } else {
                    let mut rep = evaluate(&r.predictions, c.threshold)?;
                    rep.metadata = r.report.metadata.clone();
                    rep
                };
                let dir = run.model_dir(&r.head.model_id);
                save_model_outputs(&dir, &r.predictions, &report)?;
                r.head.save(&dir.join("head.json"))?;
            }
            let summary = if c.threshold == 0.5 {
                result.summary
            } else {
                let reports = result
                    .runs
                    .iter()
                    .map(|r| evaluate(&r.predictions, c.threshold))
                    .collect::<Result<Vec<_>>>()?;
                cxr_core::metrics::summarize_runs(&reports)?
            };
            write_json(&run.out.join("models").join(&key).join("summary.json"), &summary)?;
            rows.push(SummaryRow::new(key, &summary));
        }
        write_json(&run.out.join("summary.json"), &rows)?;
        let mut table = String::from("model\truns\taccuracy\tauc\tsensitivity\tspecificity\n");
        for r in &rows {
            table.push_str(&format!(
                "{}\t{}\t{}\t{:.4} ± {:.4}\t{}\t{}\n",
                r.model, r.runs, r.accuracy, r.auc.mean, r.auc.sd, r.sensitivity, r.specificity
            ));
        }
        let path = run.out.join("summary.tsv");
        std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
        Ok(rows)
    };
    inner().map_err(CliError::stage("train"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatingPointEntry {
    pub target: OperatingTarget,
    /// `None` when the target is unreachable on this curve.
    pub point: Option<OperatingPoint>,
}

pub fn operating_points(records: &[ProbabilityRecord]) -> Result<Vec<OperatingPointEntry>> {
    let (curve, _) = roc_auc(records)?;
    OPERATING_TARGETS
        .iter()
        .map(|&target| match operating_point(&curve, target) {
            Ok(p) => Ok(OperatingPointEntry { target, point: Some(p) }),
            Err(Error::Infeasible { .. }) => Ok(OperatingPointEntry { target, point: None }),
            Err(e) => Err(e),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolInfo {
    pub models: Vec<String>,
    pub images: usize,
    pub threshold: f64,
    pub subsets: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TunedThreshold {
    pub threshold: f64,
    pub accuracy: f64,
}

fn pool_model_ids(run: &Run) -> Vec<String> {
    let e = &run.config.ensemble;
    if e.models.is_empty() {
        run.config
            .backbones
            .iter()
            .map(|b| format!("{}/seed{}", b.spec().key(), e.split_seed))
            .collect()
    } else {
        e.models.clone()
    }
}

/// Pools the configured models, scores every subset and the full average,
/// and optionally tunes the decision threshold of the full ensemble.
pub fn ensemble(run: &Run) -> CliResult<MetricsReport> {
    let c = &run.config;
    let inner = || -> Result<MetricsReport> {
        let ids = pool_model_ids(run);
        let members = ids
            .iter()
            .map(|id| Ok((id.clone(), read_probabilities(&run.model_dir(id).join("predictions.csv"))?)))
            .collect::<Result<Vec<_>>>()?;
        let pool = EnsemblePool::new(members)?;
        let dir = run.out.join("ensemble");
        ensure_dir(&dir)?;

        let mut csv = SubsetCsv::create(&dir.join("subsets.csv"))?;
        let mut stats = SizeStatsAccumulator::default();
        let mut subsets = 0u64;
        for_each_subset(&pool, c.threshold, c.ensemble.mode(), |r| {
            subsets += 1;
            stats.add(&r);
            csv.write(&r)
        })?;
        csv.finish()?;
        write_json(&dir.join("size_stats.json"), &stats.finish()?)?;

        let all: Vec<&str> = pool.model_ids().iter().map(String::as_str).collect();
        let averaged = average_probabilities(&pool, &all)?;
        let report = evaluate(&averaged, c.threshold)?
            .with_meta("model_id", "ensemble")
            .with_meta("members", all.join("+"))
            .with_meta("abnormality", &c.abnormality)
            .with_meta("split_seed", c.ensemble.split_seed);
        save_model_outputs(&dir, &averaged, &report)?;
        write_json(&dir.join("operating_points.json"), &operating_points(&averaged)?)?;
        write_json(
            &dir.join("pool.json"),
            &PoolInfo {
                models: pool.model_ids().to_vec(),
                images: pool.image_ids().len(),
                threshold: c.threshold,
                subsets,
            },
        )?;
        if c.ensemble.tune_threshold {
            let (threshold, accuracy) = tune_threshold(&averaged)?;
            write_json(&dir.join("tuned.json"), &TunedThreshold { threshold, accuracy })?;
            let tuned = evaluate(&averaged, threshold)?
                .with_meta("model_id", "ensemble")
                .with_meta("threshold_source", "tuned");
            write_json(&dir.join("tuned").join("metrics.json"), &tuned)?;
        }
        Ok(report)
    };
    inner().map_err(CliError::stage("ensemble"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizedImage {
    pub image_id: String,
    pub baseline_p: f64,
    pub marked_cells: usize,
    pub centroid: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramReport {
    pub images: BTreeMap<String, Histogram>,
    pub average: HistogramAverage,
}

fn localization_scorer(run: &Run) -> Result<Box<dyn Scorer>> {
    let l = &run.config.localization;
    if let Some((program, args)) = l.scorer.split_first() {
        return Ok(Box::new(ExternalScorer::spawn(program, args)?));
    }
    let b = &run.config.backbones[0];
    if b.features.is_some() {
        return Err(Error::Config(format!(
            "backbone `{}` uses precomputed features; localization needs an external scorer command",
            b.spec().key()
        )));
    }
    let backbone: Arc<dyn Backbone> = load_backbone(&b.spec(), &b.weights_source())?;
    let model_id = format!("{}/seed{}", b.spec().key(), run.config.ensemble.split_seed);
    let head = TrainedHead::load(&run.model_dir(&model_id).join("head.json"))?;
    Ok(Box::new(HeadScorer::new(backbone, vec![head])?))
}

fn lung_roi(record: &cxr_core::datasets::ImageRecord, width: usize, height: usize) -> Result<Mask> {
    let (Some(l), Some(r)) = (&record.masks.lung_left, &record.masks.lung_right) else {
        return Err(Error::validation(format!("image `{}` has no lung masks for the ROI", record.id)));
    };
    Ok(Mask::load(l)?.union(&Mask::load(r)?).resized(width, height))
}

/// Occlusion maps, overlays and heat-map histograms for the selected images.
pub fn localize(run: &Run) -> CliResult<Vec<LocalizedImage>> {
    let l = &run.config.localization;
    let inner = || -> Result<Vec<LocalizedImage>> {
        let manifest = run.manifest()?;
        let ids: Vec<String> = if l.images.is_empty() {
            run.ensemble_split()?.test_pos.into_iter().take(l.max_images).collect()
        } else {
            l.images.clone()
        };
        let scorer = localization_scorer(run)?;
        let dir = run.out.join("localization");
        ensure_dir(&dir)?;
        let mut summary = Vec::new();
        let mut histograms = BTreeMap::new();
        for id in &ids {
            let record = manifest
                .get(id)
                .ok_or_else(|| Error::validation(format!("image `{id}` is not in the manifest")))?;
            let image = Raster::load(&record.path)?;
            let mut occ = l.occlusion();
            if l.roi == Roi::Lungs {
                occ.roi = Some(lung_roi(record, image.width(), image.height())?);
            }
            log::info!("localizing {id}");
            let map = occlusion_map(id, &image, scorer.as_ref(), &occ)?;
            map.save(&dir.join(format!("{id}.csv")))?;
            let mask = binarize_lowest_fraction(&map, l.keep_fraction)?;
            render_overlay(&image, &map, &mask, &dir.join(format!("{id}_overlay.png")))?;
            histograms.insert(id.clone(), heatmap_histogram(&map));
            summary.push(LocalizedImage {
                image_id: id.clone(),
                baseline_p: map.baseline_p,
                marked_cells: mask.count(),
                centroid: marked_centroid(&map, &mask),
            });
        }
        let average = average_histograms(&histograms.values().cloned().collect::<Vec<_>>())?;
        write_json(&dir.join("histograms.json"), &HistogramReport { images: histograms, average })?;
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    };
    inner().map_err(CliError::stage("localize"))
}

/// Atlas segmentation, CTR features and the SVM baseline on the ensemble
/// split, plus an optional head on fused backbone and rule features.
pub fn rulebased(run: &Run) -> CliResult<MetricsReport> {
    let c = &run.config;
    let inner = || -> Result<MetricsReport> {
        let manifest = run.manifest()?;
        let split = run.ensemble_split()?;
        let pool = AtlasPool::from_manifest(&manifest)?;
        let correspondence: Box<dyn DenseCorrespondence> = match c.rulebased.correspondence {
            CorrespondenceKind::BlockMatching => Box::new(BlockMatching::default()),
            CorrespondenceKind::Identity => Box::new(Identity),
        };
        let dir = run.out.join("rulebased");
        ensure_dir(&dir)?;
        let ids: Vec<&str> = split.all_ids().collect();
        log::info!("segmenting {} images against {} atlases", ids.len(), pool.len());
        let features: BTreeMap<String, RuleFeatures> = ids
            .par_iter()
            .map(|&id| {
                let record = manifest
                    .get(id)
                    .ok_or_else(|| Error::validation(format!("image `{id}` is not in the manifest")))?;
                let image = Raster::load(&record.path)?;
                let seg = pool.segment(id, &image, c.rulebased.atlas_count, correspondence.as_ref())?;
                seg.save(&dir.join("segmentations"))?;
                Ok((id.to_string(), compute_rule_features(&seg)?))
            })
            .collect::<Result<_>>()?;
        save_rule_features(&dir.join("features.json"), &features)?;

        let labelled = |it: &mut dyn Iterator<Item = (&str, u8)>| -> Vec<(String, RuleFeatures, u8)> {
            it.map(|(id, y)| (id.to_string(), features[id], y)).collect()
        };
        let train = labelled(&mut split.train());
        let test = labelled(&mut split.test());
        let clf = train_rule_classifier(
            &train.iter().map(|t| t.1).collect::<Vec<_>>(),
            &train.iter().map(|t| t.2).collect::<Vec<_>>(),
            c.rulebased.cost,
        )?;
        clf.save(&dir.join("classifier.json"))?;
        let predictions = clf.predict("rulebased", &test);
        let report = evaluate(&predictions, c.threshold)?
            .with_meta("model_id", "rulebased")
            .with_meta("abnormality", &c.abnormality)
            .with_meta("split_seed", split.seed)
            .with_meta("atlas_count", c.rulebased.atlas_count)
            .with_meta("cost", c.rulebased.cost);
        save_model_outputs(&dir, &predictions, &report)?;

        if c.rulebased.fuse {
            let b = &c.backbones[0];
            let store = run.load_store(b)?;
            let fuse = |v: Vec<FeatureVector>| -> Result<Vec<FeatureVector>> {
                v.iter().map(|f| fuse_features(f, &f.image_id, &features[&f.image_id])).collect()
            };
            let (tr, tr_y, te, te_y) = split_features(&store, &manifest, &split)?;
            let (tr, te) = (fuse(tr)?, fuse(te)?);
            let model_id = format!("{}+ctr/seed{}", store.spec.key(), split.seed);
            let fused = run_split(&tr, &tr_y, &te, &te_y, &split, &c.head.with_seed(split.seed), model_id)?;
            let fused_report = if c.threshold == 0.5 {
                fused.report.clone()
            } else {
                let mut rep = evaluate(&fused.predictions, c.threshold)?;
                rep.metadata = fused.report.metadata.clone();
                rep
            };
            let fdir = dir.join("fused");
            save_model_outputs(&fdir, &fused.predictions, &fused_report)?;
            fused.head.save(&fdir.join("head.json"))?;
        }
        Ok(report)
    };
    inner().map_err(CliError::stage("rulebased"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_train: usize,
    pub runs: usize,
    pub accuracy: MeanSd,
    pub auc: MeanSd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCurve {
    pub model: String,
    pub points: Vec<SweepPoint>,
}

/// Accuracy and AUC against training-set size, mean ± sd over seeds.
pub fn size_sweep(run: &Run) -> CliResult<Vec<SweepCurve>> {
    let c = &run.config;
    let inner = || -> Result<Vec<SweepCurve>> {
        let manifest = run.manifest()?;
        let mut splits = Vec::new();
        for &seed in &c.seeds {
            for &size in &c.size_sweep.sizes {
                splits.push(SplitSpec::load(&run.sweep_split_path(seed, size))?);
            }
        }
        let mut curves = Vec::new();
        for b in &c.backbones {
            let store = run.load_store(b)?;
            let key = store.spec.key();
            let reports = splits
                .par_iter()
                .map(|s| {
                    let (tr, tr_y, te, te_y) = split_features(&store, &manifest, s)?;
                    let id = format!("{key}/sweep/seed{}_train{}", s.seed, s.train_pos.len());
                    let r = run_split(&tr, &tr_y, &te, &te_y, s, &c.head.with_seed(s.seed), id)?;
                    Ok((s.train_pos.len(), evaluate(&r.predictions, c.threshold)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut by_size: BTreeMap<usize, Vec<&MetricsReport>> = BTreeMap::new();
            for (size, r) in &reports {
                by_size.entry(*size).or_default().push(r);
            }
            let points = by_size
                .into_iter()
                .map(|(n_train, rs)| {
                    Ok(SweepPoint {
                        n_train,
                        runs: rs.len(),
                        accuracy: MeanSd::of(&rs.iter().map(|r| r.accuracy).collect::<Vec<_>>())?,
                        auc: MeanSd::of(&rs.iter().map(|r| r.auc).collect::<Vec<_>>())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            curves.push(SweepCurve { model: key, points });
        }
        write_json(&run.out.join("size_sweep.json"), &curves)?;
        Ok(curves)
    };
    inner().map_err(CliError::stage("size_sweep"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    /// Relative path to SHA-256, excluding the feature cache.
    pub outputs: BTreeMap<String, String>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            if path != root.join("cache") {
                collect_files(root, &path, out)?;
            }
        } else if path != root.join(RUN_MANIFEST_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

pub fn write_run_manifest(run: &Run) -> CliResult<RunManifest> {
    let inner = || -> Result<RunManifest> {
        let inputs_path = run.out.join(INPUTS_FILE);
        let inputs = if inputs_path.is_file() { read_json(&inputs_path)? } else { BTreeMap::new() };
        let mut files = Vec::new();
        collect_files(&run.out, &run.out, &mut files)?;
        let outputs = files
            .par_iter()
            .map(|p| {
                let rel = p.strip_prefix(&run.out).expect("under the output dir");
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                Ok((key, sha256_file(p)?))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        let manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: hex::encode(Sha256::digest(run.config.to_toml()?.as_bytes())),
            inputs,
            outputs,
        };
        write_json(&run.out.join(RUN_MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    };
    inner().map_err(CliError::stage("manifest"))
}

/// Runs every enabled stage in order, then writes the run manifest.
pub fn run_all(run: &Run) -> CliResult<()> {
    ingest(run)?;
    extract(run)?;
    train(run)?;
    if run.config.size_sweep.enabled {
        size_sweep(run)?;
    }
    if run.config.ensemble.enabled {
        ensemble(run)?;
    }
    if run.config.rulebased.enabled {
        rulebased(run)?;
    }
    if run.config.localization.enabled {
        localize(run)?;
    }
    write_run_manifest(run)?;
    Ok(())
}

/// The tuberculosis experiment: the full pipeline with the ensemble
/// threshold tuned.
pub fn tb_config(mut config: ExperimentConfig) -> ExperimentConfig {
    config.abnormality = cxr_core::datasets::TUBERCULOSIS.to_string();
    config.ensemble.enabled = true;
    config.ensemble.tune_threshold = true;
    config
}

/// Metrics, ROC and operating points for a standalone predictions file, one
/// directory per model id when the file holds several models.
pub fn evaluate_predictions(predictions: &Path, out: &Path, threshold: f64) -> CliResult<BTreeMap<String, MetricsReport>> {
    let inner = || -> Result<BTreeMap<String, MetricsReport>> {
        let records = read_probabilities(predictions)?;
        let mut by_model: BTreeMap<String, Vec<ProbabilityRecord>> = BTreeMap::new();
        for r in records {
            by_model.entry(r.model_id.clone()).or_default().push(r);
        }
        if by_model.is_empty() {
            return Err(Error::validation(format!("{} holds no predictions", predictions.display())));
        }
        let single = by_model.len() == 1;
        let mut reports = BTreeMap::new();
        for (model, recs) in by_model {
            let dir = if single { out.to_path_buf() } else { out.join(&model) };
            let report = evaluate(&recs, threshold)?.with_meta("model_id", &model);
            save_model_outputs(&dir, &recs, &report)?;
            write_json(&dir.join("operating_points.json"), &operating_points(&recs)?)?;
            reports.insert(model, report);
        }
        Ok(reports)
    };
    inner().map_err(CliError::stage("evaluate"))
}
