//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use cxr_core::backbones::{BackboneSpec, Family, Preprocessing, WeightsSource};
use cxr_core::datasets::{Source, SplitOptions};
use cxr_core::ensemble::SubsetMode;
use cxr_core::heads::HeadConfig;
use cxr_core::localization::{KeepMode, OcclusionConfig};
use cxr_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub abnormality: String,
    /// One balanced split and one head per seed.
    pub seeds: Vec<u64>,
    /// Decision threshold for accuracy, sensitivity and specificity.
    pub threshold: f64,
    pub datasets: Vec<DatasetConfig>,
    pub split: SplitConfig,
    pub backbones: Vec<BackboneConfig>,
    pub head: HeadConfig,
    pub ensemble: EnsembleConfig,
    pub localization: LocalizationConfig,
    pub rulebased: RuleBasedConfig,
    pub size_sweep: SizeSweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("results"),
            abnormality: "cardiomegaly".into(),
            seeds: (0..9).collect(),
            threshold: 0.5,
            datasets: vec![DatasetConfig {
                source: Source::Indiana,
                root: PathBuf::from("data/indiana"),
            }],
            split: SplitConfig::default(),
            backbones: [Family::Alexnet, Family::Vgg19, Family::Resnet152]
                .into_iter()
                .map(BackboneConfig::for_family)
                .collect(),
            head: HeadConfig::default(),
            ensemble: EnsembleConfig::default(),
            localization: LocalizationConfig::default(),
            rulebased: RuleBasedConfig::default(),
            size_sweep: SizeSweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: Source,
    pub root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Images per class in each training set.
    pub n_train: usize,
    /// Images per class in each test set.
    pub n_test: usize,
    pub include_lateral: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_train: 282,
            n_test: 50,
            include_lateral: false,
        }
    }
}

impl SplitConfig {
    pub fn options(&self) -> SplitOptions {
        SplitOptions {
            include_lateral: self.include_lateral,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub family: Family,
    /// Defaults to the family's standard tap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_layer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_side: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<Preprocessing>,
    /// `standin`, `standin:<seed>` or a weights file.
    #[serde(default = "default_weights")]
    pub weights: String,
    /// Precomputed feature store; extraction is skipped when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<PathBuf>,
}

fn default_weights() -> String {
    "standin".into()
}

impl BackboneConfig {
    pub fn for_family(family: Family) -> Self {
        let spec = BackboneSpec::default_for(family);
        Self {
            family,
            tap_layer: Some(spec.tap_layer),
            input_side: Some(spec.input_side),
            preprocessing: Some(spec.preprocessing),
            weights: default_weights(),
            features: None,
        }
    }

    pub fn spec(&self) -> BackboneSpec {
        let base = BackboneSpec::default_for(self.family);
        BackboneSpec {
            family: self.family,
            tap_layer: self.tap_layer.clone().unwrap_or(base.tap_layer),
            input_side: self.input_side.unwrap_or(base.input_side),
            preprocessing: self.preprocessing.unwrap_or(base.preprocessing),
        }
    }

    pub fn weights_source(&self) -> WeightsSource {
        WeightsSource::parse(&self.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetSearch {
    Exhaustive,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub enabled: bool,
    /// Model ids to pool. Empty means every backbone's model at `split_seed`.
    pub models: Vec<String>,
    /// Seed whose shared test set the pooled models are evaluated on.
    pub split_seed: u64,
    pub search: SubsetSearch,
    /// Subsets drawn per size when sampling.
    pub per_size: usize,
    pub sample_seed: u64,
    /// Also report accuracy at the accuracy-maximizing threshold.
    pub tune_threshold: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            models: Vec::new(),
            split_seed: 0,
            search: SubsetSearch::Exhaustive,
            per_size: 1000,
            sample_seed: 0,
            tune_threshold: false,
        }
    }
}

impl EnsembleConfig {
    pub fn mode(&self) -> SubsetMode {
        match self.search {
            SubsetSearch::Exhaustive => SubsetMode::Exhaustive,
            SubsetSearch::Sampled => SubsetMode::Sampled {
                per_size: self.per_size,
                seed: self.sample_seed,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Roi {
    None,
    /// Union of the record's lung masks.
    Lungs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizationConfig {
    pub enabled: bool,
    pub patch_side: usize,
    pub stride: usize,
    pub fill: f32,
    pub keep_fraction: f64,
    pub keep_mode: KeepMode,
    /// Image ids to localize. Empty means test positives of the ensemble split.
    pub images: Vec<String>,
    pub max_images: usize,
    pub roi: Roi,
    /// External scoring command; empty uses the trained heads in process.
    pub scorer: Vec<String>,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        let occ = OcclusionConfig::default();
        Self {
            enabled: true,
            patch_side: occ.patch_side,
            stride: occ.stride,
            fill: occ.fill,
            keep_fraction: occ.keep_fraction,
            keep_mode: occ.keep_mode,
            images: Vec::new(),
            max_images: 10,
            roi: Roi::None,
            scorer: Vec::new(),
        }
    }
}

impl LocalizationConfig {
    pub fn occlusion(&self) -> OcclusionConfig {
        OcclusionConfig {
            patch_side: self.patch_side,
            stride: self.stride,
            fill: self.fill,
            keep_fraction: self.keep_fraction,
            keep_mode: self.keep_mode,
            roi: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceKind {
    BlockMatching,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleBasedConfig {
    pub enabled: bool,
    /// Atlases retrieved per image.
    pub atlas_count: usize,
    /// SVM box constraint.
    pub cost: f64,
    pub correspondence: CorrespondenceKind,
    /// Also train a head on backbone features extended with the rule features.
    pub fuse: bool,
}

impl Default for RuleBasedConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            atlas_count: cxr_core::rulebased::DEFAULT_ATLAS_COUNT,
            cost: 1.0,
            correspondence: CorrespondenceKind::BlockMatching,
            fuse: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeSweepConfig {
    pub enabled: bool,
    /// Training images per class.
    pub sizes: Vec<usize>,
}

impl Default for SizeSweepConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            sizes: vec![25, 50, 100, 150, 200, 250, 282],
        }
    }
}

impl ExperimentConfig {
    /// Parses a config file. Relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.anchor(base);
        config.validate()?;
        Ok(config)
    }

    fn anchor(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for d in &mut self.datasets {
            fix(&mut d.root);
        }
        for b in &mut self.backbones {
            if let Some(f) = &mut b.features {
                fix(f);
            }
            if let WeightsSource::File(_) = b.weights_source() {
                let mut p = PathBuf::from(&b.weights);
                fix(&mut p);
                b.weights = p.display().to_string();
            }
        }
    }

    /// Fills every optional backbone field with its resolved value.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.backbones {
            let spec = b.spec();
            b.tap_layer = Some(spec.tap_layer);
            b.input_side = Some(spec.input_side);
            b.preprocessing = Some(spec.preprocessing);
        }
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.abnormality.trim().is_empty() {
            return Err(Error::Config("abnormality is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets configured".into()));
        }
        if self.backbones.is_empty() {
            return Err(Error::Config("no backbones configured".into()));
        }
        if self.split.n_train == 0 || self.split.n_test == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        let mut keys = std::collections::HashSet::new();
        for b in &self.backbones {
            let spec = b.spec();
            spec.validate()?;
            if !keys.insert(spec.key()) {
                return Err(Error::Config(format!("backbone `{}` listed twice", spec.key())));
            }
        }
        self.head.validate()?;
        if self.ensemble.enabled && !self.seeds.contains(&self.ensemble.split_seed) {
            return Err(Error::Config(format!(
                "ensemble split_seed {} is not one of the configured seeds",
                self.ensemble.split_seed
            )));
        }
        if self.ensemble.search == SubsetSearch::Sampled && self.ensemble.per_size == 0 {
            return Err(Error::Config("ensemble per_size must be positive".into()));
        }
        self.localization.occlusion().validate()?;
        if self.rulebased.atlas_count == 0 || self.rulebased.cost.is_nan() || self.rulebased.cost <= 0.0 {
            return Err(Error::Config("rule-based atlas_count and cost must be positive".into()));
        }
        if self.size_sweep.enabled && self.size_sweep.sizes.contains(&0) {
            return Err(Error::Config("size sweep sizes must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = ExperimentConfig::default().resolved();
        let text = config.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
        back.validate().unwrap();
    }

    #[test]
    fn published_defaults_are_prefilled() {
        let c = ExperimentConfig::default();
        assert_eq!(c.head.learning_rate, 0.001);
        assert_eq!(c.localization.patch_side, 40);
        assert_eq!(c.localization.keep_fraction, 0.2);
        assert_eq!(c.threshold, 0.5);
        assert_eq!((c.split.n_train, c.split.n_test), (282, 50));
        assert_eq!(c.seeds.len(), 9);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c: ExperimentConfig = toml::from_str(
            "abnormality = \"pulmonary_edema\"\n[[backbones]]\nfamily = \"vgg19\"\n[head]\ndropout_p = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.backbones[0].spec().tap_layer, "fc7");
        assert_eq!(c.head.dropout_p, 0.5);
        assert_eq!(c.head.epochs, 50);
        assert_eq!(c.split.n_test, 50);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(toml::from_str::<ExperimentConfig>("trheshold = 0.5").is_err());
        let mut c = ExperimentConfig::default();
        c.ensemble.split_seed = 99;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.backbones[0].tap_layer = Some("nope".into());
        assert!(matches!(c.validate(), Err(Error::LayerName { .. })));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "output_dir = \"out\"\n[[datasets]]\nsource = \"synthetic\"\nroot = \"data\"\n").unwrap();
        let c = ExperimentConfig::load(&path).unwrap();
        assert_eq!(c.output_dir, dir.path().join("out"));
        assert_eq!(c.datasets[0].root, dir.path().join("data"));
    }
}
