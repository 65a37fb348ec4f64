//! Frozen-backbone feature extraction.
//!
//! A [`BackboneSpec`] names an architecture and the layer to tap. A
//! [`Backbone`] turns a preprocessed `H x W x 3` tensor into the flattened
//! activations of that layer and never mutates its weights. The shipped
//! implementation is the seeded [`standin`] network; activations from real
//! pretrained models enter through the [`store`] CSV format.

pub mod external;
pub mod layers;
pub mod standin;
pub mod store;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array3, ArrayView3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::raster::Raster;

pub use external::ExternalScorer;
pub use layers::{list_candidate_layers, published_layers, CandidateLayer};
pub use standin::{StandInBackbone, StandInWeights};
pub use store::{FeatureCache, FeatureStore};

/// Per-channel ImageNet means on the 0..255 scale, RGB order.
pub const IMAGENET_MEAN: [f32; 3] = [123.68, 116.779, 103.939];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Alexnet,
    Vgg16,
    Vgg19,
    Resnet50,
    Resnet101,
    Resnet152,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Alexnet,
        Family::Vgg16,
        Family::Vgg19,
        Family::Resnet50,
        Family::Resnet101,
        Family::Resnet152,
    ];

    /// Second fully connected layer for AlexNet/VGG, last block of stage 4 for ResNets.
    pub fn default_tap(self) -> &'static str {
        match self {
            Family::Alexnet | Family::Vgg16 | Family::Vgg19 => "fc7",
            Family::Resnet50 => "res4f",
            Family::Resnet101 => "res4b22",
            Family::Resnet152 => "res4b35",
        }
    }

    pub fn default_input_side(self) -> u32 {
        match self {
            Family::Alexnet => 227,
            _ => 224,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Alexnet => "alexnet",
            Family::Vgg16 => "vgg16",
            Family::Vgg19 => "vgg19",
            Family::Resnet50 => "resnet50",
            Family::Resnet101 => "resnet101",
            Family::Resnet152 => "resnet152",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::validation(format!("unknown backbone family `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocessing {
    /// Scale to 0..255 and subtract [`IMAGENET_MEAN`].
    MeanSubtract,
    /// Keep intensities in `[0, 1]`.
    ScaleUnit,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: Family,
    pub tap_layer: String,
    pub input_side: u32,
    pub preprocessing: Preprocessing,
}

impl BackboneSpec {
    /// Spec with the family's native input size and mean subtraction.
    pub fn new(family: Family, tap_layer: &str) -> Result<Self> {
        let spec = Self {
            family,
            tap_layer: tap_layer.to_string(),
            input_side: family.default_input_side(),
            preprocessing: Preprocessing::MeanSubtract,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn default_for(family: Family) -> Self {
        Self::new(family, family.default_tap()).expect("default taps are published layers")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 {
            return Err(Error::validation("input_side must be positive"));
        }
        let valid = published_layers(self.family);
        if !valid.contains(&self.tap_layer) {
            return Err(Error::LayerName {
                family: self.family.to_string(),
                layer: self.tap_layer.clone(),
                valid,
            });
        }
        Ok(())
    }

    /// `family/tap_layer`, used in model ids and file names.
    pub fn key(&self) -> String {
        format!("{}/{}", self.family, self.tap_layer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub image_id: String,
    pub backbone: BackboneSpec,
    pub values: Vec<f32>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Resizes to `input_side` square, replicates gray to three channels and
/// normalizes per `spec.preprocessing`. Output is `H x W x 3`.
pub fn preprocess_raster(image: &Raster, spec: &BackboneSpec) -> Result<Array3<f32>> {
    if image.is_empty() {
        return Err(Error::validation("zero-sized image"));
    }
    let side = spec.input_side as usize;
    let resized = image.resized(side, side);
    let channels = resized.channels();
    Ok(Array3::from_shape_fn((side, side, 3), |(y, x, c)| {
        let v = resized.get(x, y, if channels == 1 { 0 } else { c });
        match spec.preprocessing {
            Preprocessing::ScaleUnit => v,
            Preprocessing::MeanSubtract => v * 255.0 - IMAGENET_MEAN[c],
        }
    }))
}

pub fn preprocess_image(record: &ImageRecord, spec: &BackboneSpec) -> Result<Array3<f32>> {
    preprocess_raster(&Raster::load(&record.path)?, spec)
}

/// Frozen network truncated at its tap layer.
pub trait Backbone: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    /// Fingerprint of the weights; constant for the backbone's lifetime.
    fn checksum(&self) -> &str;

    fn features(&self, image: &ArrayView3<f32>) -> Result<Vec<f32>>;
}

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightsSource {
    /// A registry name: `standin` or `standin:<seed>`. Each family draws its
    /// own weights from the seed.
    Registry(String),
    File(PathBuf),
}

impl WeightsSource {
    pub fn parse(locator: &str) -> Self {
        if locator == "standin" || locator.starts_with("standin:") {
            WeightsSource::Registry(locator.to_string())
        } else {
            WeightsSource::File(PathBuf::from(locator))
        }
    }
}

impl fmt::Display for WeightsSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WeightsSource::Registry(name) => f.write_str(name),
            WeightsSource::File(p) => write!(f, "{}", p.display()),
        }
    }
}

pub fn load_backbone(spec: &BackboneSpec, source: &WeightsSource) -> Result<Arc<dyn Backbone>> {
    spec.validate()?;
    let weights = match source {
        WeightsSource::Registry(name) => {
            let seed = match name.strip_prefix("standin") {
                Some("") => 0,
                Some(rest) => rest
                    .strip_prefix(':')
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad stand-in registry name `{name}`")))?,
                None => return Err(Error::Config(format!("unknown weights registry name `{name}`"))),
            };
            let family = Family::ALL.iter().position(|&f| f == spec.family).expect("family is listed") as u64;
            StandInWeights::from_seed(seed ^ (family << 32))
        }
        WeightsSource::File(path) => {
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "missing backbone weights {}",
                    path.display()
                )));
            }
            StandInWeights::load(path)?
        }
    };
    Ok(Arc::new(StandInBackbone::new(spec.clone(), weights)))
}

/// Runs a backbone over records, in parallel by image, with an optional disk cache.
pub struct FeatureExtractor {
    backbone: Arc<dyn Backbone>,
    cache: Option<FeatureCache>,
}

impl FeatureExtractor {
    pub fn new(backbone: Arc<dyn Backbone>) -> Self {
        Self { backbone, cache: None }
    }

    pub fn with_cache(mut self, dir: &Path) -> Result<Self> {
        self.cache = Some(FeatureCache::open(dir)?);
        Ok(self)
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone> {
        &self.backbone
    }

    fn extract_one(&self, record: &ImageRecord) -> Result<FeatureVector> {
        let spec = self.backbone.spec();
        let checksum = self.backbone.checksum();
        if let Some(cache) = &self.cache {
            if let Some(values) = cache.get(&record.id, spec, checksum)? {
                return Ok(FeatureVector {
                    image_id: record.id.clone(),
                    backbone: spec.clone(),
                    values,
                });
            }
        }
        let tensor = preprocess_image(record, spec)?;
        let values = self.backbone.features(&tensor.view())?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite activation {v} for image `{}`",
                record.id
            )));
        }
        if let Some(cache) = &self.cache {
            cache.put(&record.id, spec, checksum, &values)?;
        }
        Ok(FeatureVector {
            image_id: record.id.clone(),
            backbone: spec.clone(),
            values,
        })
    }

    /// One vector per record, in input order.
    pub fn extract(&self, records: &[&ImageRecord]) -> Result<Vec<FeatureVector>> {
        records.par_iter().map(|r| self.extract_one(r)).collect()
    }
}

pub fn extract_features(
    records: &[&ImageRecord],
    spec: &BackboneSpec,
    weights_source: &WeightsSource,
) -> Result<Vec<FeatureVector>> {
    FeatureExtractor::new(load_backbone(spec, weights_source)?).extract(records)
}

/// Anything that can produce feature vectors for manifest ids.
pub trait FeatureSource: Sync {
    fn spec(&self) -> &BackboneSpec;

    /// Vectors for `ids`, in the same order.
    fn features_for(&self, manifest: &DatasetManifest, ids: &[&str]) -> Result<Vec<FeatureVector>>;
}

impl FeatureSource for FeatureExtractor {
    fn spec(&self) -> &BackboneSpec {
        self.backbone.spec()
    }

    fn features_for(&self, manifest: &DatasetManifest, ids: &[&str]) -> Result<Vec<FeatureVector>> {
        let by_id: std::collections::HashMap<&str, &ImageRecord> =
            manifest.records.iter().map(|r| (r.id.as_str(), r)).collect();
        let records = ids
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::validation(format!("image `{id}` is not in the manifest")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.extract(&records)
    }
}

impl FeatureSource for FeatureStore {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn features_for(&self, _manifest: &DatasetManifest, ids: &[&str]) -> Result<Vec<FeatureVector>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::validation(format!("feature store has no vector for `{id}`")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::datasets::{MaskRefs, Source, View};

    fn record(dir: &Path, id: &str, raster: &Raster) -> ImageRecord {
        let path = dir.join(format!("{id}.png"));
        raster.save(&path).unwrap();
        ImageRecord {
            id: id.into(),
            path,
            source: Source::Synthetic,
            view: View::Frontal,
            labels: BTreeSet::new(),
            masks: MaskRefs::default(),
        }
    }

    #[test]
    fn large_gray_image_becomes_three_identical_channels() {
        let img = Raster::from_fn(2048, 2048, |x, y| ((x ^ y) & 255) as f32 / 255.0);
        let spec = BackboneSpec::new(Family::Resnet152, "res4b35").unwrap();
        let t = preprocess_raster(&img, &spec).unwrap();
        assert_eq!(t.dim(), (224, 224, 3));
        for y in 0..224 {
            for x in 0..224 {
                let (r, g, b) = (t[[y, x, 0]] + IMAGENET_MEAN[0], t[[y, x, 1]] + IMAGENET_MEAN[1], t[[y, x, 2]] + IMAGENET_MEAN[2]);
                assert!((r - g).abs() < 1e-3 && (g - b).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn scale_unit_stays_in_unit_range() {
        let img = Raster::new(224, 224, 3, (0..224 * 224 * 3).map(|i| (i % 256) as f32 / 255.0).collect()).unwrap();
        let mut spec = BackboneSpec::default_for(Family::Vgg16);
        spec.preprocessing = Preprocessing::ScaleUnit;
        let t = preprocess_raster(&img, &spec).unwrap();
        assert!(t.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn mean_subtract_shifts_constant_image() {
        let c = 100.0 / 255.0;
        let img = Raster::filled(50, 70, 1, c);
        let spec = BackboneSpec::default_for(Family::Alexnet);
        let t = preprocess_raster(&img, &spec).unwrap();
        assert_eq!(t.dim(), (227, 227, 3));
        for (ch, mean) in IMAGENET_MEAN.iter().enumerate() {
            let want = c * 255.0 - mean;
            assert!(t.index_axis(ndarray::Axis(2), ch).iter().all(|&v| (v - want).abs() < 1e-3));
        }
    }

    #[test]
    fn zero_sized_image_rejected() {
        let img = Raster::new(0, 0, 1, vec![]).unwrap();
        assert!(preprocess_raster(&img, &BackboneSpec::default_for(Family::Vgg19)).is_err());
    }

    #[test]
    fn unknown_layer_lists_valid_names() {
        match BackboneSpec::new(Family::Alexnet, "res4b35") {
            Err(Error::LayerName { valid, .. }) => assert!(valid.contains(&"fc7".to_string())),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_weights_is_a_configuration_error() {
        let spec = BackboneSpec::default_for(Family::Resnet50);
        let err = load_backbone(&spec, &WeightsSource::parse("/nonexistent/weights.json")).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
        assert!(load_backbone(&spec, &WeightsSource::parse("standin:x")).is_err());
    }

    #[test]
    fn extraction_is_deterministic_and_dimensionally_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = record(dir.path(), "a", &Raster::from_fn(64, 64, |x, _| x as f32 / 64.0));
        let b = record(dir.path(), "b", &Raster::from_fn(80, 60, |_, y| y as f32 / 60.0));
        let spec = BackboneSpec::new(Family::Resnet152, "res4b35").unwrap();
        let src = WeightsSource::parse("standin:3");
        let out = extract_features(&[&a, &b, &a], &spec, &src).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].values, out[2].values);
        assert_eq!(out[0].dim(), out[1].dim());
        assert_ne!(out[0].values, out[1].values);
    }

    #[test]
    fn registry_weights_differ_by_family() {
        let dir = tempfile::tempdir().unwrap();
        let a = record(dir.path(), "a", &Raster::from_fn(64, 64, |x, y| ((x * y) % 7) as f32 / 7.0));
        let src = WeightsSource::parse("standin");
        let vgg = extract_features(&[&a], &BackboneSpec::default_for(Family::Vgg19), &src).unwrap();
        let alex = extract_features(&[&a], &BackboneSpec::default_for(Family::Alexnet), &src).unwrap();
        assert_ne!(vgg[0].values, alex[0].values);
    }

    #[test]
    fn cache_hits_return_identical_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let a = record(dir.path(), "a", &Raster::from_fn(64, 64, |x, y| ((x + y) % 9) as f32 / 9.0));
        let spec = BackboneSpec::default_for(Family::Vgg19);
        let backbone = load_backbone(&spec, &WeightsSource::parse("standin")).unwrap();
        let ex = FeatureExtractor::new(backbone).with_cache(&dir.path().join("cache")).unwrap();
        let first = ex.extract(&[&a]).unwrap();
        std::fs::remove_file(&a.path).unwrap();
        let second = ex.extract(&[&a]).unwrap();
        assert_eq!(first, second);
    }
}
