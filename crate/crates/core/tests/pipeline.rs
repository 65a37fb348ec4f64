use cxr_core::backbones::{load_backbone, BackboneSpec, Family, FeatureExtractor, FeatureStore, WeightsSource};
use cxr_core::datasets::synthetic::{write_fixture, FixtureSpec};
use cxr_core::datasets::{load_manifest, make_balanced_split, DatasetManifest, Source, SplitOptions};
use cxr_core::ensemble::{average_probabilities, evaluate_all_subsets, tune_threshold, EnsemblePool, SubsetMode};
use cxr_core::heads::{run_multi_seed, HeadConfig, SplitSizes};
use cxr_core::metrics::{evaluate, summarize_runs};
use cxr_core::raster::Raster;
use cxr_core::rulebased::{compute_rule_features, train_rule_classifier, AtlasPool, Identity};

const SIDE: usize = 96;

fn fixture(dir: &std::path::Path) -> DatasetManifest {
    let spec = FixtureSpec { side: SIDE, seed: 11, normals: 16, positives: vec![("cardiomegaly".into(), 16)] };
    write_fixture(dir, &spec).unwrap();
    load_manifest(dir, Source::Synthetic).unwrap()
}

fn spec(family: Family) -> BackboneSpec {
    let mut s = BackboneSpec::default_for(family);
    s.input_side = SIDE as u32;
    s
}

fn head() -> HeadConfig {
    HeadConfig { epochs: 30, ..HeadConfig::default() }
}

#[test]
fn fixture_to_ensemble() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixture(tmp.path());
    assert_eq!(manifest.len(), 32);

    let sizes = SplitSizes { n_train: 10, n_test: 6 };
    let seeds = [0, 1, 2];
    let mut members = Vec::new();
    for family in [Family::Alexnet, Family::Vgg19, Family::Resnet152] {
        let backbone = load_backbone(&spec(family), &WeightsSource::parse("standin")).unwrap();
        let extractor = FeatureExtractor::new(backbone);
        let result = run_multi_seed(&manifest, "cardiomegaly", &extractor, &head(), &seeds, sizes, SplitOptions::default())
            .unwrap();
        assert_eq!(result.runs.len(), 3);
        assert_eq!(result.summary, summarize_runs(&result.runs.iter().map(|r| r.report.clone()).collect::<Vec<_>>()).unwrap());
        for run in &result.runs {
            assert_eq!(run.predictions.len(), 2 * sizes.n_test);
            assert_eq!(run.report.counts.total(), 12);
        }
        let seed0 = &result.runs[0];
        members.push((seed0.head.model_id.clone(), seed0.predictions.clone()));
    }

    let pool = EnsemblePool::new(members).unwrap();
    let results = evaluate_all_subsets(&pool, 0.5, SubsetMode::Exhaustive).unwrap();
    assert_eq!(results.len(), 7);
    let ids: Vec<&str> = pool.model_ids().iter().map(String::as_str).collect();
    let full = average_probabilities(&pool, &ids).unwrap();
    let report = evaluate(&full, 0.5).unwrap();
    let best = results.iter().find(|r| r.mask == (1 << ids.len()) - 1).unwrap();
    assert_eq!(best.accuracy, report.accuracy);
    assert_eq!(best.auc, report.auc);

    let (t, acc) = tune_threshold(&full).unwrap();
    assert!(acc >= report.accuracy);
    assert_eq!(evaluate(&full, t).unwrap().accuracy, acc);
}

#[test]
fn feature_store_round_trip_feeds_training() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixture(&tmp.path().join("data"));
    let split = make_balanced_split(&manifest, "cardiomegaly", 10, 6, 0, SplitOptions::default()).unwrap();
    let s = spec(Family::Resnet152);
    let backbone = load_backbone(&s, &WeightsSource::parse("standin:3")).unwrap();
    let checksum = backbone.checksum().to_string();
    let extractor = FeatureExtractor::new(backbone);
    let records: Vec<_> = split.all_ids().map(|id| manifest.get(id).unwrap()).collect();
    let vectors = extractor.extract(&records).unwrap();
    let path = tmp.path().join("features.csv");
    FeatureStore::new(s.clone(), checksum, vectors).unwrap().save(&path).unwrap();
    let store = FeatureStore::load(&path).unwrap();

    let sizes = SplitSizes { n_train: 10, n_test: 6 };
    let from_store = run_multi_seed(&manifest, "cardiomegaly", &store, &head(), &[0], sizes, SplitOptions::default()).unwrap();
    let direct = run_multi_seed(&manifest, "cardiomegaly", &extractor, &head(), &[0], sizes, SplitOptions::default()).unwrap();
    let p = |r: &cxr_core::heads::MultiSeedResult| r.runs[0].predictions.iter().map(|x| x.p_abnormal).collect::<Vec<_>>();
    let (a, b) = (p(&from_store), p(&direct));
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6), "{a:?} vs {b:?}");
}

#[test]
fn atlas_segmentation_feeds_the_rule_classifier() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixture(tmp.path());
    let pool = AtlasPool::from_manifest(&manifest).unwrap();
    assert_eq!(pool.len(), manifest.len());

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in &manifest.records {
        let image = Raster::load(&record.path).unwrap();
        let seg = pool.segment(&record.id, &image, 3, &Identity).unwrap();
        assert_eq!(seg.atlases.len(), 3);
        assert!(!seg.atlases.contains(&record.id));
        features.push(compute_rule_features(&seg).unwrap());
        labels.push(u8::from(!record.is_normal()));
    }
    let clf = train_rule_classifier(&features, &labels, 1.0).unwrap();
    let items: Vec<_> = manifest
        .records
        .iter()
        .zip(&features)
        .zip(&labels)
        .map(|((r, f), &y)| (r.id.clone(), *f, y))
        .collect();
    let preds = clf.predict("rulebased", &items);
    let report = evaluate(&preds, 0.5).unwrap();
    assert!(report.auc > 0.5, "{report:?}");
}
