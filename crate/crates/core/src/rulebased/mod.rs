//! Rule-based comparison baseline.
//!
//! Atlases similar to the query (by radon signature) are registered onto it,
//! their lung and heart masks are transferred and combined by majority vote,
//! cardiothoracic ratios are measured on the result and a linear SVM
//! classifies the ratios.

mod correspondence;
mod features;
mod radon;
mod svm;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use correspondence::{BlockMatching, DenseCorrespondence, Flow, Identity, Translation};
pub use features::{
    boundary_pixels, compute_rule_features, convex_hull, load_rule_features, save_rule_features, RuleFeatures,
    Segmentation,
};
pub use radon::{
    bhattacharyya_distance, default_angles, rank_similar_atlases, radon_signature, signature_distance,
    RadonSignature, DISJOINT_DISTANCE,
};
pub use svm::{LinearSvm, PlattLink};

use crate::datasets::{DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::heads::ProbabilityRecord;
use crate::metrics::write_json;
use crate::raster::{Mask, Raster};

/// Side of the square raster segmentation runs on.
pub const SEGMENTATION_SIDE: usize = 256;
/// Side of the square raster signatures are computed on.
pub const SIGNATURE_SIDE: usize = 128;
pub const DEFAULT_ATLAS_COUNT: usize = 5;

/// An image with gold-standard lung and heart masks, all the same size.
#[derive(Debug, Clone)]
pub struct AtlasEntry {
    pub id: String,
    pub image: Raster,
    pub lung_left: Mask,
    pub lung_right: Mask,
    pub heart: Mask,
}

impl AtlasEntry {
    /// Loads the image and masks, resampled to `side x side`.
    pub fn load(record: &ImageRecord, side: usize) -> Result<Self> {
        let need = |p: &Option<std::path::PathBuf>, what: &str| {
            p.clone()
                .ok_or_else(|| Error::validation(format!("atlas `{}` has no {what} mask", record.id)))
        };
        let masks = &record.masks;
        let load_mask = |p: &Path| Mask::load(p).map(|m| m.resized(side, side));
        Ok(Self {
            id: record.id.clone(),
            image: Raster::load(&record.path)?.to_gray().resized(side, side),
            lung_left: load_mask(&need(&masks.lung_left, "left lung")?)?,
            lung_right: load_mask(&need(&masks.lung_right, "right lung")?)?,
            heart: load_mask(&need(&masks.heart, "heart")?)?,
        })
    }
}

/// Atlases with precomputed signatures.
pub struct AtlasPool {
    pub entries: Vec<AtlasEntry>,
    pub signatures: Vec<RadonSignature>,
    pub angles: Vec<f64>,
}

/// Grayscale, resized to the signature raster.
pub fn signature_of(id: &str, image: &Raster, angles: &[f64]) -> Result<RadonSignature> {
    radon_signature(id, &image.to_gray().resized(SIGNATURE_SIDE, SIGNATURE_SIDE), angles)
}

impl AtlasPool {
    pub fn new(entries: Vec<AtlasEntry>, angles: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::validation("atlas pool is empty"));
        }
        let signatures = entries
            .par_iter()
            .map(|e| signature_of(&e.id, &e.image, &angles))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            signatures,
            angles,
        })
    }

    /// Every frontal record that carries all three masks.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let entries = manifest
            .records
            .par_iter()
            .filter(|r| r.masks.is_complete())
            .map(|r| AtlasEntry::load(r, SEGMENTATION_SIDE))
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries, default_angles())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Segments `image`, never using an atlas with the same id as the query.
    pub fn segment(
        &self,
        image_id: &str,
        image: &Raster,
        k: usize,
        correspondence: &dyn DenseCorrespondence,
    ) -> Result<Segmentation> {
        let target = image.to_gray().resized(SEGMENTATION_SIDE, SEGMENTATION_SIDE);
        let query = signature_of(image_id, &target, &self.angles)?;
        let others: Vec<RadonSignature> = self.signatures.iter().filter(|s| s.image_id != image_id).cloned().collect();
        let ranked = rank_similar_atlases(&query, &others, k)?;
        let chosen: Vec<&AtlasEntry> = ranked
            .iter()
            .map(|(id, _)| self.entries.iter().find(|e| &e.id == id).expect("ranked atlas exists"))
            .collect();
        transfer_segmentation(image_id, &target, &chosen, correspondence)
    }
}

fn resized_atlas(atlas: &AtlasEntry, w: usize, h: usize) -> AtlasEntry {
    AtlasEntry {
        id: atlas.id.clone(),
        image: atlas.image.to_gray().resized(w, h),
        lung_left: atlas.lung_left.resized(w, h),
        lung_right: atlas.lung_right.resized(w, h),
        heart: atlas.heart.resized(w, h),
    }
}

fn majority(masks: &[Mask]) -> Mask {
    let (w, h) = (masks[0].width(), masks[0].height());
    Mask::from_fn(w, h, |x, y| 2 * masks.iter().filter(|m| m.get(x, y)).count() > masks.len())
}

/// Warps each atlas's masks onto the target and keeps pixels marked by a
/// strict majority of the atlases that registered successfully.
pub fn transfer_segmentation(
    image_id: &str,
    target: &Raster,
    atlases: &[&AtlasEntry],
    correspondence: &dyn DenseCorrespondence,
) -> Result<Segmentation> {
    if atlases.is_empty() {
        return Err(Error::Segmentation(format!("no atlases given for `{image_id}`")));
    }
    let (w, h) = (target.width(), target.height());
    let gray = target.to_gray();
    let warped: Vec<(String, [Mask; 3])> = atlases
        .par_iter()
        .filter_map(|a| {
            let a = resized_atlas(a, w, h);
            match correspondence.flow(&a.image, &gray) {
                Ok(flow) => Some((
                    a.id.clone(),
                    [
                        flow.warp_mask(&a.lung_left),
                        flow.warp_mask(&a.lung_right),
                        flow.warp_mask(&a.heart),
                    ],
                )),
                Err(e) => {
                    log::warn!("atlas `{}` dropped for `{image_id}`: {e}", a.id);
                    None
                }
            }
        })
        .collect();
    if warped.is_empty() {
        return Err(Error::Segmentation(format!("every atlas failed to register onto `{image_id}`")));
    }
    let vote = |k: usize| majority(&warped.iter().map(|(_, m)| m[k].clone()).collect::<Vec<_>>());
    Ok(Segmentation {
        image_id: image_id.to_string(),
        lung_left: vote(0),
        lung_right: vote(1),
        heart: vote(2),
        atlases: warped.iter().map(|(id, _)| id.clone()).collect(),
    })
}

/// Standardized CTR features, linear SVM and logistic link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleClassifier {
    pub mean: [f64; 3],
    pub scale: [f64; 3],
    pub svm: LinearSvm,
    pub link: PlattLink,
    pub cost: f64,
}

impl RuleClassifier {
    fn standardize(&self, f: &RuleFeatures) -> Vec<f64> {
        let a = f.as_array();
        (0..3).map(|i| (a[i] - self.mean[i]) / self.scale[i]).collect()
    }

    pub fn decision(&self, f: &RuleFeatures) -> f64 {
        self.svm.decision(&self.standardize(f))
    }

    pub fn probability(&self, f: &RuleFeatures) -> f64 {
        self.link.probability(self.decision(f))
    }

    pub fn predict(
        &self,
        model_id: &str,
        items: &[(String, RuleFeatures, u8)],
    ) -> Vec<ProbabilityRecord> {
        items
            .iter()
            .map(|(id, f, label)| ProbabilityRecord {
                image_id: id.clone(),
                model_id: model_id.to_string(),
                p_abnormal: self.probability(f),
                true_label: *label,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Fits the classifier. The solver is deterministic, so no seed is needed.
pub fn train_rule_classifier(features: &[RuleFeatures], labels: &[u8], cost: f64) -> Result<RuleClassifier> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::validation("features and labels differ in length"));
    }
    if let Some(f) = features.iter().find(|f| f.as_array().iter().any(|v| !v.is_finite())) {
        return Err(Error::validation(format!("non-finite rule features {f:?}")));
    }
    let n = features.len() as f64;
    let mut mean = [0.0; 3];
    let mut scale = [0.0; 3];
    for i in 0..3 {
        mean[i] = features.iter().map(|f| f.as_array()[i]).sum::<f64>() / n;
        let var = features.iter().map(|f| (f.as_array()[i] - mean[i]).powi(2)).sum::<f64>() / n;
        scale[i] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let mut clf = RuleClassifier {
        mean,
        scale,
        svm: LinearSvm { weights: vec![0.0; 3], bias: 0.0 },
        link: PlattLink { a: -1.0, b: 0.0 },
        cost,
    };
    let xs: Vec<Vec<f64>> = features.iter().map(|f| clf.standardize(f)).collect();
    clf.svm = LinearSvm::fit(&xs, labels, cost, 1e-6)?;
    let decisions: Vec<f64> = xs.iter().map(|x| clf.svm.decision(x)).collect();
    clf.link = PlattLink::fit(&decisions, labels);
    Ok(clf)
}
