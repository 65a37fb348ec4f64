//! Binary classifier heads trained on frozen features.
//!
//! A head is one affine layer producing two logits (index 1 = abnormal)
//! followed by softmax, trained with Adam on mean cross-entropy. Optional
//! dropout is applied to the input features during training only.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneSpec, FeatureSource, FeatureVector};
use crate::datasets::{make_balanced_split, DatasetManifest, SplitOptions, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, RunSummary};
use crate::rulebased::RuleFeatures;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Dropout rate used when the dropout variant is switched on without a rate.
pub const DEFAULT_DROPOUT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub learning_rate: f64,
    pub dropout_p: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            dropout_p: 0.0,
            epochs: 50,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::validation(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::validation("epochs and batch size must be positive"));
        }
        Ok(())
    }
}

/// One classifier prediction. `true_label` is 1 for abnormal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRecord {
    pub image_id: String,
    pub model_id: String,
    pub p_abnormal: f64,
    pub true_label: u8,
}

pub fn write_probabilities(path: &Path, records: &[ProbabilityRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_probabilities(path: &Path) -> Result<Vec<ProbabilityRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
    let records = r.deserialize().collect::<std::result::Result<Vec<ProbabilityRecord>, _>>()?;
    for rec in &records {
        if !(0.0..=1.0).contains(&rec.p_abnormal) || rec.true_label > 1 {
            return Err(Error::validation(format!(
                "{}: bad record for `{}`",
                path.display(),
                rec.image_id
            )));
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedHead {
    pub model_id: String,
    pub dim: usize,
    /// Row-major `2 x dim`; row 1 scores the abnormal class.
    pub weights: Vec<f64>,
    pub bias: [f64; 2],
    pub config: HeadConfig,
    pub backbone: Option<BackboneSpec>,
    /// `abnormality/seed` of the split the head was fit on.
    pub split: Option<String>,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

impl TrainedHead {
    /// A head with all parameters zero; predicts 0.5 everywhere.
    pub fn zeros(dim: usize) -> Self {
        Self {
            model_id: "zero".into(),
            dim,
            weights: vec![0.0; 2 * dim],
            bias: [0.0; 2],
            config: HeadConfig::default(),
            backbone: None,
            split: None,
            loss_history: Vec::new(),
        }
    }

    fn logits(&self, x: &[f32]) -> [f64; 2] {
        let mut z = self.bias;
        for (k, zk) in z.iter_mut().enumerate() {
            let row = &self.weights[k * self.dim..(k + 1) * self.dim];
            *zk += row.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>();
        }
        z
    }

    /// `[p_normal, p_abnormal]`.
    pub fn probabilities(&self, x: &[f32]) -> Result<[f64; 2]> {
        if x.len() != self.dim {
            return Err(Error::validation(format!(
                "feature dim {} does not match head dim {}",
                x.len(),
                self.dim
            )));
        }
        Ok(softmax2(self.logits(x)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        metrics::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let head: TrainedHead = serde_json::from_str(&text)?;
        if head.weights.len() != 2 * head.dim {
            return Err(Error::validation(format!("{}: weight shape mismatch", path.display())));
        }
        Ok(head)
    }
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e0 = (z[0] - m).exp();
    let e1 = (z[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// `-ln softmax(z)[label]`, computed stably.
fn cross_entropy(z: [f64; 2], label: u8) -> f64 {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    lse - z[label as usize]
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Fits a head. Deterministic for a fixed `config.seed`.
pub fn train_head(features: &[FeatureVector], labels: &[u8], config: &HeadConfig) -> Result<TrainedHead> {
    config.validate()?;
    if features.len() != labels.len() {
        return Err(Error::validation("features and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::validation("labels must be 0 or 1"));
    }
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::validation(format!(
            "training needs both classes; got {n_pos} positive of {}",
            labels.len()
        )));
    }
    let dim = features[0].dim();
    if let Some(f) = features.iter().find(|f| f.dim() != dim) {
        return Err(Error::validation(format!(
            "feature `{}` has dim {}, expected {dim}",
            f.image_id,
            f.dim()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_params = 2 * dim + 2;
    // params layout: weights (2 x dim) then the two biases
    let mut params: Vec<f64> = (0..2 * dim).map(|_| rng.random_range(-0.01..0.01)).collect();
    params.extend([0.0, 0.0]);
    let mut adam = Adam::new(n_params);
    let mut grads = vec![0.0; n_params];
    let mut order: Vec<usize> = (0..features.len()).collect();
    let keep = 1.0 - config.dropout_p;
    let mut dropped = vec![0f32; dim];
    let mut loss_history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            grads.fill(0.0);
            for &i in batch {
                let x = &features[i].values;
                let input: &[f32] = if config.dropout_p > 0.0 {
                    for (d, &v) in dropped.iter_mut().zip(x) {
                        *d = if rng.random::<f64>() < keep { (v as f64 / keep) as f32 } else { 0.0 };
                    }
                    &dropped
                } else {
                    x
                };
                let mut z = [params[2 * dim], params[2 * dim + 1]];
                for (k, zk) in z.iter_mut().enumerate() {
                    let row = &params[k * dim..(k + 1) * dim];
                    *zk += row.iter().zip(input).map(|(w, &v)| w * v as f64).sum::<f64>();
                }
                epoch_loss += cross_entropy(z, labels[i]);
                let p = softmax2(z);
                for k in 0..2 {
                    let dz = p[k] - if labels[i] as usize == k { 1.0 } else { 0.0 };
                    let g = &mut grads[k * dim..(k + 1) * dim];
                    for (gj, &v) in g.iter_mut().zip(input) {
                        *gj += dz * v as f64;
                    }
                    grads[2 * dim + k] += dz;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut params, &grads, config.learning_rate);
        }
        let mean_loss = epoch_loss / features.len() as f64;
        if !mean_loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical {
                epoch,
                message: format!("training loss became {mean_loss}"),
            });
        }
        loss_history.push(mean_loss);
    }

    let bias = [params[2 * dim], params[2 * dim + 1]];
    params.truncate(2 * dim);
    Ok(TrainedHead {
        model_id: format!("head/seed{}", config.seed),
        dim,
        weights: params,
        bias,
        config: config.clone(),
        backbone: Some(features[0].backbone.clone()),
        split: None,
        loss_history,
    })
}

/// Mean cross-entropy of a head on a labelled set, without dropout.
pub fn loss(head: &TrainedHead, features: &[FeatureVector], labels: &[u8]) -> Result<f64> {
    let mut total = 0.0;
    for (f, &l) in features.iter().zip(labels) {
        if f.dim() != head.dim {
            return Err(Error::validation("feature dim does not match head"));
        }
        total += cross_entropy(head.logits(&f.values), l);
    }
    Ok(total / features.len().max(1) as f64)
}

pub fn predict_proba(head: &TrainedHead, features: &[FeatureVector], labels: &[u8]) -> Result<Vec<ProbabilityRecord>> {
    if features.len() != labels.len() {
        return Err(Error::validation("features and labels differ in length"));
    }
    features
        .iter()
        .zip(labels)
        .map(|(f, &label)| {
            let p = head.probabilities(&f.values)?;
            Ok(ProbabilityRecord {
                image_id: f.image_id.clone(),
                model_id: head.model_id.clone(),
                p_abnormal: p[1],
                true_label: label,
            })
        })
        .collect()
}

/// Appends `(ctr_1d, ctr_2d, ctar)` to a backbone vector of the same image.
pub fn fuse_features(dcn: &FeatureVector, rule_image_id: &str, rule: &RuleFeatures) -> Result<FeatureVector> {
    if dcn.image_id != rule_image_id {
        return Err(Error::validation(format!(
            "cannot fuse features of `{}` with rule features of `{rule_image_id}`",
            dcn.image_id
        )));
    }
    let mut values = dcn.values.clone();
    values.extend([rule.ctr_1d as f32, rule.ctr_2d as f32, rule.ctar as f32]);
    let mut backbone = dcn.backbone.clone();
    backbone.tap_layer = format!("{}+ctr", backbone.tap_layer);
    Ok(FeatureVector {
        image_id: dcn.image_id.clone(),
        backbone,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub split: SplitSpec,
    pub head: TrainedHead,
    pub predictions: Vec<ProbabilityRecord>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiSeedResult {
    pub runs: Vec<SeedRun>,
    pub summary: RunSummary,
}

/// `(train, train labels, test, test labels)`.
pub type SplitFeatures = (Vec<FeatureVector>, Vec<u8>, Vec<FeatureVector>, Vec<u8>);

/// Gathers features for a split.
pub fn split_features(source: &dyn FeatureSource, manifest: &DatasetManifest, split: &SplitSpec) -> Result<SplitFeatures> {
    let (train_ids, train_y): (Vec<&str>, Vec<u8>) = split.train().unzip();
    let (test_ids, test_y): (Vec<&str>, Vec<u8>) = split.test().unzip();
    Ok((
        source.features_for(manifest, &train_ids)?,
        train_y,
        source.features_for(manifest, &test_ids)?,
        test_y,
    ))
}

/// Trains and evaluates one head on one split.
pub fn run_split(
    train: &[FeatureVector],
    train_y: &[u8],
    test: &[FeatureVector],
    test_y: &[u8],
    split: &SplitSpec,
    config: &HeadConfig,
    model_id: String,
) -> Result<SeedRun> {
    let mut head = train_head(train, train_y, config)?;
    head.model_id = model_id;
    head.split = Some(format!("{}/{}", split.abnormality, split.seed));
    let predictions = predict_proba(&head, test, test_y)?;
    let report = metrics::evaluate(&predictions, 0.5)?
        .with_meta("model_id", &head.model_id)
        .with_meta("abnormality", &split.abnormality)
        .with_meta("seed", split.seed)
        .with_meta("n_train_per_class", split.train_pos.len())
        .with_meta("n_test_per_class", split.test_pos.len())
        .with_meta("learning_rate", config.learning_rate)
        .with_meta("dropout_p", config.dropout_p)
        .with_meta("epochs", config.epochs)
        .with_meta("batch_size", config.batch_size);
    Ok(SeedRun {
        seed: split.seed,
        split: split.clone(),
        head,
        predictions,
        report,
    })
}

/// One balanced split and one head per seed (split seed = head seed), then
/// mean ± sd over the per-seed reports.
pub fn run_multi_seed(
    manifest: &DatasetManifest,
    abnormality: &str,
    source: &dyn FeatureSource,
    config: &HeadConfig,
    seeds: &[u64],
    sizes: SplitSizes,
    opts: SplitOptions,
) -> Result<MultiSeedResult> {
    if seeds.is_empty() {
        return Err(Error::validation("multi-seed run needs at least one seed"));
    }
    let splits = seeds
        .iter()
        .map(|&s| make_balanced_split(manifest, abnormality, sizes.n_train, sizes.n_test, s, opts))
        .collect::<Result<Vec<_>>>()?;

    // Extract the union once so shared images are not recomputed per seed.
    let mut ids: Vec<&str> = splits.iter().flat_map(|s| s.all_ids()).collect();
    ids.sort_unstable();
    ids.dedup();
    let vectors = source.features_for(manifest, &ids)?;
    let by_id: HashMap<&str, &FeatureVector> = ids.iter().copied().zip(vectors.iter()).collect();
    let gather = |it: &mut dyn Iterator<Item = (&str, u8)>| -> (Vec<FeatureVector>, Vec<u8>) {
        it.map(|(id, y)| ((*by_id[id]).clone(), y)).unzip()
    };

    let key = source.spec().key();
    let runs = splits
        .par_iter()
        .map(|split| {
            let (train, train_y) = gather(&mut split.train());
            let (test, test_y) = gather(&mut split.test());
            run_split(
                &train,
                &train_y,
                &test,
                &test_y,
                split,
                &config.with_seed(split.seed),
                format!("{key}/seed{}", split.seed),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report.clone()).collect();
    let summary = metrics::summarize_runs(&reports)?;
    Ok(MultiSeedResult { runs, summary })
}
