use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ImageRecord, View};
use crate::error::{Error, Result};

/// Balanced train/test partition for one abnormality against normals.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub abnormality: String,
    pub seed: u64,
    pub train_pos: Vec<String>,
    pub train_neg: Vec<String>,
    pub test_pos: Vec<String>,
    pub test_neg: Vec<String>,
}

impl SplitSpec {
    /// `(id, label)` pairs of the training half, positives first.
    pub fn train(&self) -> impl Iterator<Item = (&str, u8)> {
        labelled(&self.train_pos, &self.train_neg)
    }

    pub fn test(&self) -> impl Iterator<Item = (&str, u8)> {
        labelled(&self.test_pos, &self.test_neg)
    }

    pub fn all_ids(&self) -> impl Iterator<Item = &str> {
        self.train_pos
            .iter()
            .chain(&self.train_neg)
            .chain(&self.test_pos)
            .chain(&self.test_neg)
            .map(String::as_str)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn labelled<'a>(pos: &'a [String], neg: &'a [String]) -> impl Iterator<Item = (&'a str, u8)> {
    pos.iter()
        .map(|s| (s.as_str(), 1u8))
        .chain(neg.iter().map(|s| (s.as_str(), 0u8)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitOptions {
    /// Lateral views are excluded unless set.
    pub include_lateral: bool,
}

struct Pools<'a> {
    positives: Vec<&'a str>,
    normals: Vec<&'a str>,
}

fn pools<'a>(manifest: &'a DatasetManifest, tag: &str, opts: SplitOptions) -> Pools<'a> {
    let eligible = |r: &&ImageRecord| opts.include_lateral || r.view == View::Frontal;
    let mut positives: Vec<&str> = manifest
        .records
        .iter()
        .filter(eligible)
        .filter(|r| r.has(tag))
        .map(|r| r.id.as_str())
        .collect();
    let mut normals: Vec<&str> = manifest
        .records
        .iter()
        .filter(eligible)
        .filter(|r| r.is_normal())
        .map(|r| r.id.as_str())
        .collect();
    // Manifest order must not influence the draw.
    positives.sort_unstable();
    normals.sort_unstable();
    Pools { positives, normals }
}

/// Seeded permutation of both pools. The first `n_test` of each become the
/// test set and the following ids the training set, so test sets are shared
/// across training sizes for a fixed seed.
fn shuffled<'a>(pools: &Pools<'a>, seed: u64) -> (Vec<&'a str>, Vec<&'a str>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = pools.positives.clone();
    let mut neg = pools.normals.clone();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    (pos, neg)
}

fn check_capacity(pools: &Pools<'_>, tag: &str, needed: usize) -> Result<()> {
    if pools.positives.len() < needed || pools.normals.len() < needed {
        return Err(Error::Capacity(format!(
            "`{tag}` split needs {needed} per class; available: {} positive, {} normal",
            pools.positives.len(),
            pools.normals.len()
        )));
    }
    Ok(())
}

fn carve(tag: &str, seed: u64, pos: &[&str], neg: &[&str], n_train: usize, n_test: usize) -> SplitSpec {
    let owned = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    SplitSpec {
        abnormality: tag.to_string(),
        seed,
        test_pos: owned(&pos[..n_test]),
        test_neg: owned(&neg[..n_test]),
        train_pos: owned(&pos[n_test..n_test + n_train]),
        train_neg: owned(&neg[n_test..n_test + n_train]),
    }
}

pub fn make_balanced_split(
    manifest: &DatasetManifest,
    abnormality: &str,
    n_train: usize,
    n_test: usize,
    seed: u64,
    opts: SplitOptions,
) -> Result<SplitSpec> {
    let pools = pools(manifest, abnormality, opts);
    check_capacity(&pools, abnormality, n_train + n_test)?;
    let (pos, neg) = shuffled(&pools, seed);
    Ok(carve(abnormality, seed, &pos, &neg, n_train, n_test))
}

/// One split per `(seed, size)`, seeds outermost. For a fixed seed the test
/// lists are identical and training sets are nested as size grows.
pub fn make_size_sweep(
    manifest: &DatasetManifest,
    abnormality: &str,
    sizes: &[usize],
    n_test: usize,
    seeds: &[u64],
    opts: SplitOptions,
) -> Result<Vec<SplitSpec>> {
    let Some(&largest) = sizes.iter().max() else {
        return Ok(Vec::new());
    };
    let pools = pools(manifest, abnormality, opts);
    check_capacity(&pools, abnormality, largest + n_test)?;
    let mut out = Vec::with_capacity(sizes.len() * seeds.len());
    for &seed in seeds {
        let (pos, neg) = shuffled(&pools, seed);
        for &size in sizes {
            out.push(carve(abnormality, seed, &pos, &neg, size, n_test));
        }
    }
    Ok(out)
}

/// Balanced split using every available positive (capped by the normal pool),
/// with `train_fraction` of each class going to training.
pub fn make_fraction_split(
    manifest: &DatasetManifest,
    abnormality: &str,
    train_fraction: f64,
    seed: u64,
    opts: SplitOptions,
) -> Result<SplitSpec> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::validation(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let pools = pools(manifest, abnormality, opts);
    let per_class = pools.positives.len().min(pools.normals.len());
    let n_train = (per_class as f64 * train_fraction).round() as usize;
    let n_test = per_class - n_train;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Capacity(format!(
            "`{abnormality}` has {} positive and {} normal images, too few for a {train_fraction} split",
            pools.positives.len(),
            pools.normals.len()
        )));
    }
    make_balanced_split(manifest, abnormality, n_train, n_test, seed, opts)
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeSet, HashSet};

    use proptest::prelude::*;

    use super::*;
    use crate::datasets::{MaskRefs, Source};

    fn record(id: &str, tags: &[&str], view: View) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            path: format!("{id}.png").into(),
            source: Source::Synthetic,
            view,
            labels: tags.iter().map(|t| t.to_string()).collect::<BTreeSet<_>>(),
            masks: MaskRefs::default(),
        }
    }

    fn indiana_like(n_pos: usize, n_neg: usize) -> DatasetManifest {
        let mut records = Vec::new();
        for i in 0..n_pos {
            records.push(record(&format!("p{i}"), &["cardiomegaly"], View::Frontal));
        }
        for i in 0..n_neg {
            records.push(record(&format!("n{i}"), &[], View::Frontal));
        }
        for i in 0..20 {
            records.push(record(&format!("o{i}"), &["nodule"], View::Frontal));
            records.push(record(&format!("l{i}"), &["cardiomegaly"], View::Lateral));
        }
        DatasetManifest::new(records, "fixture").unwrap()
    }

    #[test]
    fn cardiomegaly_design_sizes() {
        let m = indiana_like(332, 2000);
        let s = make_balanced_split(&m, "cardiomegaly", 282, 50, 0, SplitOptions::default()).unwrap();
        assert_eq!(s.train_pos.len() + s.train_neg.len(), 564);
        assert_eq!(s.test_pos.len() + s.test_neg.len(), 100);
        assert!(s.all_ids().all(|id| !id.starts_with('l')), "laterals excluded");
    }

    #[test]
    fn degenerate_sizes() {
        let m = DatasetManifest::new(
            vec![record("a", &["x"], View::Frontal), record("b", &[], View::Frontal)],
            "t",
        )
        .unwrap();
        let s = make_balanced_split(&m, "x", 0, 1, 3, SplitOptions::default()).unwrap();
        assert!(s.train_pos.is_empty() && s.train_neg.is_empty());
        assert_eq!(s.test_pos, ["a"]);
        assert_eq!(s.test_neg, ["b"]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let m = indiana_like(60, 80);
        let a = make_balanced_split(&m, "cardiomegaly", 20, 10, 7, SplitOptions::default()).unwrap();
        let b = make_balanced_split(&m, "cardiomegaly", 20, 10, 7, SplitOptions::default()).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        let c = make_balanced_split(&m, "cardiomegaly", 20, 10, 8, SplitOptions::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn capacity_error_reports_counts() {
        let m = indiana_like(10, 100);
        let err = make_balanced_split(&m, "cardiomegaly", 8, 5, 0, SplitOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("10 positive") && msg.contains("100 normal"), "{msg}");
        // laterals unlock extra positives only when asked for
        let opts = SplitOptions { include_lateral: true };
        assert!(make_balanced_split(&m, "cardiomegaly", 8, 5, 0, opts).is_ok());
    }

    #[test]
    fn size_sweep_shares_test_sets() {
        let m = indiana_like(400, 600);
        let sizes = [25, 50, 100, 200, 282];
        let sweep = make_size_sweep(&m, "cardiomegaly", &sizes, 50, &[1, 2, 3], SplitOptions::default()).unwrap();
        assert_eq!(sweep.len(), 15);
        let for_seed3: Vec<_> = sweep.iter().filter(|s| s.seed == 3).collect();
        let small = for_seed3.iter().find(|s| s.train_pos.len() == 25).unwrap();
        let large = for_seed3.iter().find(|s| s.train_pos.len() == 200).unwrap();
        assert_eq!(small.test_pos, large.test_pos);
        assert_eq!(small.test_neg, large.test_neg);
        assert!(make_size_sweep(&m, "cardiomegaly", &[], 50, &[1], SplitOptions::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn fraction_split_is_seventy_thirty() {
        let m = indiana_like(40, 300);
        let s = make_fraction_split(&m, "cardiomegaly", 0.7, 0, SplitOptions::default()).unwrap();
        assert_eq!((s.train_pos.len(), s.test_pos.len()), (28, 12));
        assert_eq!((s.train_neg.len(), s.test_neg.len()), (28, 12));
    }

    proptest! {
        #[test]
        fn split_invariants(n_pos in 2usize..40, n_neg in 2usize..60, seed in any::<u64>(), frac in 0.0f64..1.0) {
            let m = indiana_like(n_pos, n_neg);
            let cap = n_pos.min(n_neg);
            let n_test = ((cap as f64 * frac) as usize).max(1).min(cap);
            let n_train = cap - n_test;
            let s = make_balanced_split(&m, "cardiomegaly", n_train, n_test, seed, SplitOptions::default()).unwrap();
            prop_assert_eq!(s.train_pos.len(), s.train_neg.len());
            prop_assert_eq!(s.test_pos.len(), s.test_neg.len());
            let all: Vec<&str> = s.all_ids().collect();
            let unique: HashSet<&str> = all.iter().copied().collect();
            prop_assert_eq!(all.len(), unique.len());
            for id in s.train_neg.iter().chain(&s.test_neg) {
                prop_assert!(m.get(id).unwrap().is_normal());
            }
            for id in s.train_pos.iter().chain(&s.test_pos) {
                prop_assert!(m.get(id).unwrap().has("cardiomegaly"));
            }
        }
    }
}
