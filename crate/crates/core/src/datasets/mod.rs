//! Dataset ingestion into a uniform manifest and balanced binary splits.
//!
//! On-disk conventions per source:
//!
//! * `indiana`: `indiana_reports.csv` (columns `uid`, `MeSH`),
//!   `indiana_projections.csv` (columns `uid`, `filename`, `projection`) and the
//!   image files under `images/` (or `images/images_normalized/`).
//! * `jsrt`: `JPCLN*`/`JPCNN*` images (`.IMG` raw or converted) at the root or
//!   under `images/`; SCR masks under `masks/{left lung,right lung,heart}/`.
//! * `shenzhen`: `CHNCXR_<nnnn>_<c>.png` at the root or under `CXR_png/`, where
//!   `c` is 0 for normal and 1 for tuberculosis.
//! * `synthetic`: `labels.csv` with columns `id,file,view,labels` and optional
//!   `lung_left,lung_right,heart` mask paths; `labels` is `|`-separated.

mod sources;
mod split;
pub mod synthetic;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use split::{make_balanced_split, make_fraction_split, make_size_sweep, SplitOptions, SplitSpec};

pub const TUBERCULOSIS: &str = "tuberculosis";
pub const NODULE: &str = "nodule";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Indiana,
    Jsrt,
    Shenzhen,
    Synthetic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Indiana => "indiana",
            Source::Jsrt => "jsrt",
            Source::Shenzhen => "shenzhen",
            Source::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "indiana" => Ok(Source::Indiana),
            "jsrt" => Ok(Source::Jsrt),
            "shenzhen" => Ok(Source::Shenzhen),
            "synthetic" => Ok(Source::Synthetic),
            other => Err(Error::validation(format!("unknown dataset source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Frontal,
    Lateral,
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "frontal" | "pa" | "ap" => Ok(View::Frontal),
            "lateral" | "lat" => Ok(View::Lateral),
            other => Err(Error::validation(format!("unknown view `{other}`"))),
        }
    }
}

/// Paths to the gold-standard or transferred lung/heart masks of one image.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRefs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lung_left: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lung_right: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heart: Option<PathBuf>,
}

impl MaskRefs {
    pub fn is_complete(&self) -> bool {
        self.lung_left.is_some() && self.lung_right.is_some() && self.heart.is_some()
    }
}

/// One radiograph. An empty label set means normal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub source: Source,
    pub view: View,
    pub labels: BTreeSet<String>,
    #[serde(default)]
    pub masks: MaskRefs,
}

impl ImageRecord {
    pub fn is_normal(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn has(&self, tag: &str) -> bool {
        self.labels.contains(tag)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub provenance: String,
}

impl DatasetManifest {
    pub fn new(records: Vec<ImageRecord>, provenance: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::validation(format!("duplicate image id `{}`", r.id)));
            }
            if r.labels.iter().any(|t| t == "normal") {
                return Err(Error::validation(format!(
                    "record `{}` carries a `normal` tag; normals have no tags",
                    r.id
                )));
            }
        }
        Ok(Self {
            records,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Merges manifests, keeping the id-uniqueness invariant.
    pub fn merge(manifests: impl IntoIterator<Item = DatasetManifest>) -> Result<Self> {
        let mut records = Vec::new();
        let mut provenance = Vec::new();
        for m in manifests {
            records.extend(m.records);
            provenance.push(m.provenance);
        }
        Self::new(records, provenance.join("; "))
    }

    /// All tags present, with their frontal positive counts.
    pub fn tag_counts(&self) -> Vec<(String, usize)> {
        let mut counts = std::collections::BTreeMap::<&str, usize>::new();
        for r in self.records.iter().filter(|r| r.view == View::Frontal) {
            for t in &r.labels {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        counts.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Persists the records as a JSON array.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.records)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<ImageRecord> = serde_json::from_str(&text)?;
        Self::new(records, path.display().to_string())
    }
}

/// Reads a dataset directory laid out per `source`'s convention.
pub fn load_manifest(root: &Path, source: Source) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let records = match source {
        Source::Indiana => sources::load_indiana(root)?,
        Source::Jsrt => sources::load_jsrt(root)?,
        Source::Shenzhen => sources::load_shenzhen(root)?,
        Source::Synthetic => sources::load_synthetic(root)?,
    };
    DatasetManifest::new(records, format!("{source}:{}", root.display()))
}

/// Normalizes an annotation term into a tag key: lowercase, words joined by `_`.
pub fn normalize_tag(term: &str) -> String {
    let mut out = String::new();
    for word in term
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
    {
        if !out.is_empty() {
            out.push('_');
        }
        out.push_str(&word.to_lowercase());
    }
    out
}
