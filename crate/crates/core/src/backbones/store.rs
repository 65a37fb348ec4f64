//! Feature persistence.
//!
//! Feature store (`cxr-feature-store v1`), one CSV per (split, backbone):
//!
//! ```text
//! # cxr-feature-store v1
//! # family=resnet152 tap_layer=res4b35 input_side=224 preprocessing=mean_subtract weights=<sha256>
//! image_id,dim,v0,v1,...
//! JPCLN001,1024,0.25,...
//! ```
//!
//! This is also the import route for activations computed by real pretrained
//! networks outside this crate.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{BackboneSpec, FeatureVector, Preprocessing};
use crate::error::{Error, Result};

const STORE_MAGIC: &str = "# cxr-feature-store v1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub spec: BackboneSpec,
    pub weights_checksum: String,
    vectors: Vec<FeatureVector>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(spec: BackboneSpec, weights_checksum: impl Into<String>, vectors: Vec<FeatureVector>) -> Result<Self> {
        let mut index = HashMap::new();
        let dim = vectors.first().map(|v| v.dim());
        for (i, v) in vectors.iter().enumerate() {
            if Some(v.dim()) != dim {
                return Err(Error::validation(format!(
                    "feature `{}` has dim {}, store dim is {}",
                    v.image_id,
                    v.dim(),
                    dim.unwrap_or(0)
                )));
            }
            if index.insert(v.image_id.clone(), i).is_some() {
                return Err(Error::validation(format!("duplicate feature id `{}`", v.image_id)));
            }
        }
        Ok(Self {
            spec,
            weights_checksum: weights_checksum.into(),
            vectors,
            index,
        })
    }

    pub fn vectors(&self) -> &[FeatureVector] {
        &self.vectors
    }

    pub fn get(&self, id: &str) -> Option<&FeatureVector> {
        self.index.get(id).map(|&i| &self.vectors[i])
    }

    pub fn dim(&self) -> Option<usize> {
        self.vectors.first().map(|v| v.dim())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let pre = match self.spec.preprocessing {
            Preprocessing::MeanSubtract => "mean_subtract",
            Preprocessing::ScaleUnit => "scale_unit",
        };
        let dim = self.dim().unwrap_or(0);
        let mut header = format!(
            "{STORE_MAGIC}\n# family={} tap_layer={} input_side={} preprocessing={pre} weights={}\nimage_id,dim",
            self.spec.family, self.spec.tap_layer, self.spec.input_side, self.weights_checksum
        );
        for i in 0..dim {
            header.push_str(&format!(",v{i}"));
        }
        writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
        for v in &self.vectors {
            let mut line = format!("{},{}", v.image_id, v.dim());
            for x in &v.values {
                line.push(',');
                line.push_str(&x.to_string());
            }
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        file.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(STORE_MAGIC) {
            return Err(Error::validation(format!("{} is not a v1 feature store", path.display())));
        }
        let meta_line = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| Error::validation(format!("{}: missing metadata line", path.display())))?;
        let meta: HashMap<&str, &str> = meta_line
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let need = |k: &str| {
            meta.get(k)
                .copied()
                .ok_or_else(|| Error::validation(format!("{}: metadata lacks `{k}`", path.display())))
        };
        let spec = BackboneSpec {
            family: need("family")?.parse()?,
            tap_layer: need("tap_layer")?.to_string(),
            input_side: need("input_side")?
                .parse()
                .map_err(|_| Error::validation("input_side is not an integer"))?,
            preprocessing: match need("preprocessing")? {
                "mean_subtract" => Preprocessing::MeanSubtract,
                "scale_unit" => Preprocessing::ScaleUnit,
                other => return Err(Error::validation(format!("unknown preprocessing `{other}`"))),
            },
        };
        spec.validate()?;
        let checksum = need("weights")?.to_string();

        let body: String = lines.collect::<Vec<_>>().join("\n");
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(body.as_bytes());
        let mut vectors = Vec::new();
        for row in reader.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line() as usize + 2);
            let bad = |m: String| Error::Annotation {
                file: path.to_path_buf(),
                line,
                message: m,
            };
            let id = row.get(0).ok_or_else(|| bad("missing image_id".into()))?;
            let dim: usize = row
                .get(1)
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| bad("missing or bad dim".into()))?;
            if row.len() != dim + 2 {
                return Err(bad(format!("dim says {dim} but row has {} values", row.len() - 2)));
            }
            let values = row
                .iter()
                .skip(2)
                .map(|s| s.parse::<f32>().map_err(|_| bad(format!("bad value `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            vectors.push(FeatureVector {
                image_id: id.to_string(),
                backbone: spec.clone(),
                values,
            });
        }
        Self::new(spec, checksum, vectors)
    }
}

/// On-disk cache keyed by (image id, family, tap layer, input settings,
/// weights checksum); one little-endian `f32` file per key.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, id: &str, spec: &BackboneSpec, checksum: &str) -> PathBuf {
        let key = format!(
            "{id}\u{0}{}\u{0}{}\u{0}{}\u{0}{:?}\u{0}{checksum}",
            spec.family, spec.tap_layer, spec.input_side, spec.preprocessing
        );
        self.dir.join(format!("{}.f32", hex::encode(Sha256::digest(key.as_bytes()))))
    }

    pub fn get(&self, id: &str, spec: &BackboneSpec, checksum: &str) -> Result<Option<Vec<f32>>> {
        let path = self.path(id, spec, checksum);
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            )),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, id: &str, spec: &BackboneSpec, checksum: &str, values: &[f32]) -> Result<()> {
        let path = self.path(id, spec, checksum);
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        // Write-then-rename so concurrent readers never see a partial file.
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::Family;

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BackboneSpec::default_for(Family::Resnet152);
        let vectors = vec![
            FeatureVector { image_id: "a".into(), backbone: spec.clone(), values: vec![0.5, -1.25, 3.0] },
            FeatureVector { image_id: "b".into(), backbone: spec.clone(), values: vec![1e-7, 0.0, 2.5e8] },
        ];
        let store = FeatureStore::new(spec, "abc", vectors).unwrap();
        let path = dir.path().join("f.csv");
        store.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(2).unwrap().starts_with("image_id,dim,v0,v1,v2"));
        assert_eq!(FeatureStore::load(&path).unwrap(), store);
    }

    #[test]
    fn row_with_wrong_dim_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(
            &path,
            "# cxr-feature-store v1\n# family=vgg19 tap_layer=fc7 input_side=224 preprocessing=mean_subtract weights=x\nimage_id,dim,v0,v1\na,2,1,2\nb,2,1\n",
        )
        .unwrap();
        assert!(FeatureStore::load(&path).is_err());
    }

    #[test]
    fn mixed_dims_rejected() {
        let spec = BackboneSpec::default_for(Family::Vgg16);
        let v = |id: &str, n| FeatureVector { image_id: id.into(), backbone: spec.clone(), values: vec![0.0; n] };
        assert!(FeatureStore::new(spec.clone(), "x", vec![v("a", 2), v("b", 3)]).is_err());
    }
}
