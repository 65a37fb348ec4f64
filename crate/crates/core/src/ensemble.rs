//! Unweighted probability-averaging ensembles and subset sweeps.
//!
//! Models in a pool are kept sorted by id. A subset is a bitmask in which
//! bit `i` selects the `i`-th model in that order. Sweeps visit subsets by
//! size, then lexicographically by member ids.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use ordered_float::OrderedFloat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::ProbabilityRecord;
use crate::metrics::{self, write_json};

/// Largest pool the exhaustive sweep accepts.
pub const MAX_EXHAUSTIVE_POOL: usize = 24;
const MAX_POOL: usize = 64;
const BATCH: usize = 1 << 14;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePool {
    model_ids: Vec<String>,
    image_ids: Vec<String>,
    labels: Vec<u8>,
    /// `probs[m][i]`: model `m` on image `i`.
    probs: Vec<Vec<f64>>,
    positives: u64,
    negatives: u64,
}

impl EnsemblePool {
    /// Groups records by `model_id`.
    pub fn from_records(records: &[ProbabilityRecord]) -> Result<Self> {
        let mut groups: BTreeMap<&str, Vec<ProbabilityRecord>> = BTreeMap::new();
        for r in records {
            groups.entry(&r.model_id).or_default().push(r.clone());
        }
        Self::new(groups.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
    }

    pub fn new(mut members: Vec<(String, Vec<ProbabilityRecord>)>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::validation("ensemble pool is empty"));
        }
        if members.len() > MAX_POOL {
            return Err(Error::Capacity(format!(
                "pool of {} models exceeds the limit of {MAX_POOL}",
                members.len()
            )));
        }
        members.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = members.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::validation(format!("model `{}` appears twice in the pool", w[0].0)));
        }

        let mut first: Vec<&ProbabilityRecord> = members[0].1.iter().collect();
        first.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if let Some(w) = first.windows(2).find(|w| w[0].image_id == w[1].image_id) {
            return Err(Error::validation(format!(
                "model `{}` scores `{}` twice",
                members[0].0, w[0].image_id
            )));
        }
        let image_ids: Vec<String> = first.iter().map(|r| r.image_id.clone()).collect();
        let labels: Vec<u8> = first.iter().map(|r| r.true_label).collect();

        let mut probs = Vec::with_capacity(members.len());
        for (model, recs) in &members {
            let by_id: HashMap<&str, &ProbabilityRecord> = recs.iter().map(|r| (r.image_id.as_str(), r)).collect();
            if by_id.len() != recs.len() {
                return Err(Error::validation(format!("model `{model}` scores an image twice")));
            }
            let mut row = Vec::with_capacity(image_ids.len());
            for (id, &label) in image_ids.iter().zip(&labels) {
                let r = by_id.get(id.as_str()).ok_or_else(|| Error::Coverage {
                    model: model.clone(),
                    image: id.clone(),
                })?;
                if r.true_label != label {
                    return Err(Error::validation(format!("models disagree on the label of `{id}`")));
                }
                row.push(r.p_abnormal);
            }
            if recs.len() != image_ids.len() {
                let extra = recs.iter().find(|r| image_ids.binary_search(&r.image_id).is_err()).expect("extra record");
                return Err(Error::Coverage {
                    model: members[0].0.clone(),
                    image: extra.image_id.clone(),
                });
            }
            probs.push(row);
        }
        let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
        Ok(Self {
            model_ids: members.into_iter().map(|m| m.0).collect(),
            negatives: labels.len() as u64 - positives,
            image_ids,
            labels,
            probs,
            positives,
        })
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }

    pub fn len(&self) -> usize {
        self.model_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_ids.is_empty()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    /// Bitmask for a set of model ids.
    pub fn mask_of(&self, subset: &[&str]) -> Result<u64> {
        let mut mask = 0u64;
        for id in subset {
            let i = self
                .model_ids
                .binary_search_by(|m| m.as_str().cmp(id))
                .map_err(|_| Error::validation(format!("model `{id}` is not in the pool")))?;
            mask |= 1 << i;
        }
        if mask == 0 {
            return Err(Error::validation("ensemble subset is empty"));
        }
        Ok(mask)
    }

    pub fn members(&self, mask: u64) -> Vec<&str> {
        (0..self.len()).filter(|i| mask >> i & 1 == 1).map(|i| self.model_ids[i].as_str()).collect()
    }

    /// Averaged probability per image, summed in pool order.
    fn average_into(&self, mask: u64, out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.image_ids.len(), 0.0);
        let mut k = 0;
        for (m, row) in self.probs.iter().enumerate() {
            if mask >> m & 1 == 1 {
                k += 1;
                out.iter_mut().zip(row).for_each(|(o, p)| *o += p);
            }
        }
        let k = k as f64;
        out.iter_mut().for_each(|o| *o /= k);
    }

    fn evaluate_mask(&self, mask: u64, threshold: f64, avg: &mut Vec<f64>, pairs: &mut Vec<(f64, u8)>) -> SubsetResult {
        self.average_into(mask, avg);
        let correct = avg
            .iter()
            .zip(&self.labels)
            .filter(|(p, &l)| (**p >= threshold) == (l == 1))
            .count();
        pairs.clear();
        pairs.extend(avg.iter().copied().zip(self.labels.iter().copied()));
        SubsetResult {
            mask,
            size: mask.count_ones() as usize,
            accuracy: correct as f64 / avg.len() as f64,
            auc: metrics::auc_from_scores(pairs, self.positives, self.negatives),
        }
    }
}

/// Per-image mean of the selected members' probabilities, in sorted image
/// order. The model id of a multi-member result joins member ids with `+`.
pub fn average_probabilities(pool: &EnsemblePool, subset: &[&str]) -> Result<Vec<ProbabilityRecord>> {
    let mask = pool.mask_of(subset)?;
    let model_id = pool.members(mask).join("+");
    let mut avg = Vec::new();
    pool.average_into(mask, &mut avg);
    Ok(pool
        .image_ids
        .iter()
        .zip(&pool.labels)
        .zip(avg)
        .map(|((id, &label), p)| ProbabilityRecord {
            image_id: id.clone(),
            model_id: model_id.clone(),
            p_abnormal: p,
            true_label: label,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetResult {
    pub mask: u64,
    pub size: usize,
    pub accuracy: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsetMode {
    Exhaustive,
    /// Uniform sample of at most `per_size` subsets of each size. Approximate.
    Sampled { per_size: usize, seed: u64 },
}

/// Next k-combination of `0..n` in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let Some(i) = (0..k).rev().find(|&i| idx[i] < n - k + i) else {
        return false;
    };
    idx[i] += 1;
    for j in i + 1..k {
        idx[j] = idx[j - 1] + 1;
    }
    true
}

fn mask_from(idx: &[usize]) -> u64 {
    idx.iter().fold(0, |m, &i| m | 1 << i)
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn sampled_masks(n: usize, per_size: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for k in 1..=n {
        let mut chosen: Vec<Vec<usize>> = if binomial(n, k) <= per_size as u128 {
            let mut idx: Vec<usize> = (0..k).collect();
            let mut all = vec![idx.clone()];
            while next_combination(&mut idx, n) {
                all.push(idx.clone());
            }
            all
        } else {
            let mut seen = HashSet::new();
            while seen.len() < per_size {
                let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                seen.insert(idx);
            }
            seen.into_iter().collect()
        };
        chosen.sort();
        out.extend(chosen.iter().map(|c| mask_from(c)));
    }
    out
}

/// Evaluates every subset (or a sample of them) and hands results to `sink`
/// in canonical order. Results are produced in parallel batches and never
/// held all at once.
pub fn for_each_subset(
    pool: &EnsemblePool,
    threshold: f64,
    mode: SubsetMode,
    mut sink: impl FnMut(SubsetResult) -> Result<()>,
) -> Result<()> {
    if pool.positives == 0 || pool.negatives == 0 {
        return Err(Error::UndefinedMetric("auc"));
    }
    let n = pool.len();
    let eval_batch = |batch: &[u64], sink: &mut dyn FnMut(SubsetResult) -> Result<()>| -> Result<()> {
        let results: Vec<SubsetResult> = batch
            .par_iter()
            .map_init(|| (Vec::new(), Vec::new()), |(avg, pairs), &m| pool.evaluate_mask(m, threshold, avg, pairs))
            .collect();
        results.into_iter().try_for_each(sink)
    };
    match mode {
        SubsetMode::Exhaustive => {
            if n > MAX_EXHAUSTIVE_POOL {
                return Err(Error::Capacity(format!(
                    "pool of {n} models has {} subsets; use sampling above {MAX_EXHAUSTIVE_POOL} models",
                    (1u128 << n) - 1
                )));
            }
            let mut batch = Vec::with_capacity(BATCH);
            for k in 1..=n {
                let mut idx: Vec<usize> = (0..k).collect();
                loop {
                    batch.push(mask_from(&idx));
                    if batch.len() == BATCH {
                        eval_batch(&batch, &mut sink)?;
                        batch.clear();
                    }
                    if !next_combination(&mut idx, n) {
                        break;
                    }
                }
            }
            eval_batch(&batch, &mut sink)
        }
        SubsetMode::Sampled { per_size, seed } => {
            if per_size == 0 {
                return Err(Error::validation("sampling needs per_size >= 1"));
            }
            sampled_masks(n, per_size, seed)
                .chunks(BATCH)
                .try_for_each(|b| eval_batch(b, &mut sink))
        }
    }
}

/// Collects every subset result. Use [`for_each_subset`] for large pools.
pub fn evaluate_all_subsets(pool: &EnsemblePool, threshold: f64, mode: SubsetMode) -> Result<Vec<SubsetResult>> {
    let mut out = Vec::new();
    for_each_subset(pool, threshold, mode, |r| {
        out.push(r);
        Ok(())
    })?;
    Ok(out)
}

/// Streams subset results to CSV (`mask,size,accuracy,auc`).
pub struct SubsetCsv {
    writer: csv::Writer<std::fs::File>,
}

impl SubsetCsv {
    pub fn create(path: &Path) -> Result<Self> {
        let writer = csv::Writer::from_path(path).map_err(|e| Error::Serde(e.to_string()))?;
        Ok(Self { writer })
    }

    pub fn write(&mut self, r: &SubsetResult) -> Result<()> {
        Ok(self.writer.serialize(r)?)
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::Serde(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub size: usize,
    pub count: u64,
    pub accuracy: Quartiles,
    pub auc: Quartiles,
}

/// Exact per-size quartiles from value counts, so memory grows with the
/// number of distinct values rather than the number of subsets.
#[derive(Debug, Default, Clone)]
pub struct SizeStatsAccumulator {
    accuracy: BTreeMap<usize, BTreeMap<OrderedFloat<f64>, u64>>,
    auc: BTreeMap<usize, BTreeMap<OrderedFloat<f64>, u64>>,
}

impl SizeStatsAccumulator {
    pub fn add(&mut self, r: &SubsetResult) {
        *self.accuracy.entry(r.size).or_default().entry(OrderedFloat(r.accuracy)).or_default() += 1;
        *self.auc.entry(r.size).or_default().entry(OrderedFloat(r.auc)).or_default() += 1;
    }

    pub fn finish(&self) -> Result<Vec<SizeStats>> {
        if self.accuracy.is_empty() {
            return Err(Error::validation("no subset results to summarize"));
        }
        Ok(self
            .accuracy
            .iter()
            .map(|(&size, acc)| SizeStats {
                size,
                count: acc.values().sum(),
                accuracy: quartiles(acc),
                auc: quartiles(&self.auc[&size]),
            })
            .collect())
    }
}

/// The `rank`-th smallest value (0-based) in a count map.
fn nth(counts: &BTreeMap<OrderedFloat<f64>, u64>, rank: u64) -> f64 {
    let mut seen = 0;
    for (v, c) in counts {
        seen += c;
        if rank < seen {
            return v.0;
        }
    }
    unreachable!("rank beyond count total")
}

/// Linear-interpolation quantile: position `q * (n - 1)` in sorted order.
fn quantile(counts: &BTreeMap<OrderedFloat<f64>, u64>, total: u64, q: f64) -> f64 {
    let h = q * (total - 1) as f64;
    let lo = h.floor() as u64;
    let a = nth(counts, lo);
    if lo + 1 >= total {
        return a;
    }
    let b = nth(counts, lo + 1);
    a + (h - lo as f64) * (b - a)
}

fn quartiles(counts: &BTreeMap<OrderedFloat<f64>, u64>) -> Quartiles {
    let total: u64 = counts.values().sum();
    Quartiles {
        min: counts.keys().next().expect("non-empty").0,
        q25: quantile(counts, total, 0.25),
        median: quantile(counts, total, 0.5),
        q75: quantile(counts, total, 0.75),
        max: counts.keys().next_back().expect("non-empty").0,
    }
}

pub fn subset_size_stats(results: &[SubsetResult]) -> Result<Vec<SizeStats>> {
    let mut acc = SizeStatsAccumulator::default();
    results.iter().for_each(|r| acc.add(r));
    acc.finish()
}

pub fn save_size_stats(path: &Path, stats: &[SizeStats]) -> Result<()> {
    write_json(path, &stats)
}

pub fn load_size_stats(path: &Path) -> Result<Vec<SizeStats>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Accuracy-maximizing threshold over the distinct probabilities plus 0.5.
/// Ties go to the candidate closest to 0.5, then to the larger one.
pub fn tune_threshold(records: &[ProbabilityRecord]) -> Result<(f64, f64)> {
    let pos = records.iter().filter(|r| r.true_label == 1).count();
    if pos == 0 || pos == records.len() {
        return Err(Error::validation("threshold tuning needs both classes"));
    }
    let mut sorted: Vec<(f64, u8)> = records.iter().map(|r| (r.p_abnormal, r.true_label)).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut candidates: Vec<f64> = sorted.iter().map(|s| s.0).collect();
    candidates.push(0.5);
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();

    let n = records.len();
    let neg = n - pos;
    let (mut tp, mut fp, mut i) = (0usize, 0usize, 0usize);
    let mut best: Option<(f64, usize)> = None;
    for t in candidates {
        while i < n && sorted[i].0 >= t {
            if sorted[i].1 == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let correct = tp + (neg - fp);
        let better = match best {
            None => true,
            Some((bt, bc)) => {
                correct > bc || (correct == bc && ((t - 0.5).abs() < (bt - 0.5).abs()))
            }
        };
        if better {
            best = Some((t, correct));
        }
    }
    let (t, correct) = best.expect("at least one candidate");
    Ok((t, correct as f64 / n as f64))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn rec(model: &str, id: &str, p: f64, label: u8) -> ProbabilityRecord {
        ProbabilityRecord {
            image_id: id.into(),
            model_id: model.into(),
            p_abnormal: p,
            true_label: label,
        }
    }

    fn pool_of(models: &[&str], n_images: usize, seed: u64) -> (EnsemblePool, Vec<ProbabilityRecord>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut all = Vec::new();
        for m in models {
            for i in 0..n_images {
                all.push(rec(m, &format!("img{i:03}"), rng.random::<f64>(), (i % 2) as u8));
            }
        }
        (EnsemblePool::from_records(&all).unwrap(), all)
    }

    #[test]
    fn pool_of_three_gives_seven_subsets_in_order() {
        let (pool, _) = pool_of(&["c", "a", "b"], 10, 1);
        let results = evaluate_all_subsets(&pool, 0.5, SubsetMode::Exhaustive).unwrap();
        let members: Vec<String> = results.iter().map(|r| pool.members(r.mask).join("+")).collect();
        assert_eq!(members, ["a", "b", "c", "a+b", "a+c", "b+c", "a+b+c"]);
    }

    #[test]
    fn singleton_reproduces_member() {
        let (pool, all) = pool_of(&["m1", "m2"], 15, 2);
        let mut member: Vec<_> = all.into_iter().filter(|r| r.model_id == "m2").collect();
        member.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        assert_eq!(average_probabilities(&pool, &["m2"]).unwrap(), member);
    }

    #[test]
    fn two_member_mean() {
        let pool = EnsemblePool::from_records(&[rec("a", "x", 0.2, 1), rec("b", "x", 0.8, 1)]).unwrap();
        let avg = average_probabilities(&pool, &["b", "a"]).unwrap();
        assert_eq!(avg[0].p_abnormal, 0.5);
        assert_eq!(avg[0].model_id, "a+b");
    }

    #[test]
    fn six_member_brute_force_mean() {
        let names = ["a", "b", "c", "d", "e", "f", "g"];
        let (pool, all) = pool_of(&names, 20, 3);
        let subset = ["f", "a", "c", "d", "e", "b"];
        let avg = average_probabilities(&pool, &subset).unwrap();
        for r in &avg {
            let vals: Vec<f64> = all
                .iter()
                .filter(|x| x.image_id == r.image_id && subset.contains(&x.model_id.as_str()))
                .map(|x| x.p_abnormal)
                .collect();
            assert_eq!(vals.len(), 6);
            let mean = vals.iter().sum::<f64>() / 6.0;
            assert!((r.p_abnormal - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_image_is_a_coverage_error() {
        let recs = [rec("a", "x", 0.1, 0), rec("a", "y", 0.9, 1), rec("b", "x", 0.2, 0)];
        match EnsemblePool::from_records(&recs) {
            Err(Error::Coverage { model, image }) => assert_eq!((model.as_str(), image.as_str()), ("b", "y")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn oversized_pool_needs_sampling() {
        let names: Vec<String> = (0..25).map(|i| format!("m{i:02}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let (pool, _) = pool_of(&refs, 4, 4);
        assert!(matches!(
            evaluate_all_subsets(&pool, 0.5, SubsetMode::Exhaustive),
            Err(Error::Capacity(_))
        ));
        let sampled = evaluate_all_subsets(&pool, 0.5, SubsetMode::Sampled { per_size: 3, seed: 9 }).unwrap();
        // every size has at least 3 subsets except the full pool
        assert_eq!(sampled.len(), 3 * 24 + 1);
        assert!(sampled.windows(2).all(|w| w[0].size <= w[1].size));
    }

    #[test]
    fn singleton_auc_matches_metrics() {
        let (pool, all) = pool_of(&["a", "b", "c"], 30, 5);
        let results = evaluate_all_subsets(&pool, 0.5, SubsetMode::Exhaustive).unwrap();
        for (r, name) in results.iter().take(3).zip(["a", "b", "c"]) {
            let member: Vec<_> = all.iter().filter(|x| x.model_id == name).cloned().collect();
            let report = metrics::evaluate(&member, 0.5).unwrap();
            assert_eq!(r.auc, report.auc);
            assert_eq!(r.accuracy, report.accuracy);
        }
    }

    fn result(size: usize, accuracy: f64) -> SubsetResult {
        SubsetResult { mask: 0, size, accuracy, auc: accuracy }
    }

    #[test]
    fn size_stats_small_cases() {
        let stats = subset_size_stats(&[result(1, 0.8), result(1, 0.9), result(1, 1.0), result(2, 0.7)]).unwrap();
        assert_eq!(stats[0].accuracy.median, 0.9);
        let q = stats[1].accuracy;
        assert!([q.min, q.q25, q.median, q.q75].iter().all(|&v| v == q.max));
        assert!(subset_size_stats(&[]).is_err());
    }

    /// Sort-based percentile with linear interpolation.
    fn oracle_percentile(values: &[f64], q: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let h = q * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    }

    #[test]
    fn quartiles_match_oracle_on_fifteen_results() {
        let values = [0.61, 0.72, 0.72, 0.8, 0.55, 0.9, 0.66, 0.72, 0.81, 0.95, 0.6, 0.7, 0.88, 0.77, 0.69];
        let results: Vec<_> = values.iter().map(|&v| result(3, v)).collect();
        let s = &subset_size_stats(&results).unwrap()[0];
        assert_eq!(s.count, 15);
        for (got, q) in [(s.accuracy.q25, 0.25), (s.accuracy.median, 0.5), (s.accuracy.q75, 0.75)] {
            assert!((got - oracle_percentile(&values, q)).abs() < 1e-12);
        }
    }

    fn scan_oracle(records: &[ProbabilityRecord]) -> f64 {
        let mut best: f64 = 0.0;
        for t in records.iter().map(|r| r.p_abnormal).chain([0.5]) {
            let correct = records.iter().filter(|r| (r.p_abnormal >= t) == (r.true_label == 1)).count();
            best = best.max(correct as f64 / records.len() as f64);
        }
        best
    }

    #[test]
    fn tuned_threshold_matches_exhaustive_scan() {
        let ps = [0.05, 0.3, 0.62, 0.41, 0.77, 0.55, 0.9, 0.12, 0.68, 0.49];
        let ls = [0, 0, 1, 0, 1, 0, 1, 0, 0, 1];
        let recs: Vec<_> = ps.iter().zip(ls).map(|(&p, l)| rec("m", "", p, l)).collect();
        let (t, acc) = tune_threshold(&recs).unwrap();
        assert_eq!(acc, scan_oracle(&recs));
        let at_t = recs.iter().filter(|r| (r.p_abnormal >= t) == (r.true_label == 1)).count();
        assert_eq!(at_t as f64 / 10.0, acc);
    }

    #[test]
    fn tuning_beats_default_threshold() {
        // 25 + 25 records where 0.5 gives 88% and 0.74 gives 90%.
        let mut recs: Vec<_> = (0..22).map(|i| rec("e", "", 0.80 + i as f64 * 0.005, 1)).collect();
        recs.extend([rec("e", "", 0.74, 1), rec("e", "", 0.05, 1), rec("e", "", 0.05, 1)]);
        recs.extend((0..21).map(|i| rec("e", "", 0.25 + i as f64 * 0.01, 0)));
        recs.extend([0.62, 0.95, 0.96, 0.97].map(|p| rec("e", "", p, 0)));
        let default_acc = metrics::evaluate(&recs, 0.5).unwrap().accuracy;
        assert!((default_acc - 0.88).abs() < 1e-12);
        let (t, acc) = tune_threshold(&recs).unwrap();
        assert!((acc - 0.90).abs() < 1e-12, "{acc}");
        assert_eq!(t, 0.74);
    }

    #[test]
    fn separated_records_prefer_half() {
        let recs = [rec("m", "", 0.1, 0), rec("m", "", 0.2, 0), rec("m", "", 0.8, 1), rec("m", "", 0.9, 1)];
        assert_eq!(tune_threshold(&recs).unwrap(), (0.5, 1.0));
        assert!(tune_threshold(&recs[..2]).is_err());
    }

    proptest! {
        #[test]
        fn averaging_is_permutation_invariant(seed in 0u64..1000, perm_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let names = ["a", "b", "c", "d", "e"];
            let (pool, _) = pool_of(&names, 8, seed);
            let mut subset = names.to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            subset.shuffle(&mut rng);
            let k = 1 + (perm_seed as usize % 5);
            let a = average_probabilities(&pool, &subset[..k]).unwrap();
            let mut sorted = subset[..k].to_vec();
            sorted.sort();
            let b = average_probabilities(&pool, &sorted).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
