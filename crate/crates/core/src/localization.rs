//! Occlusion-sensitivity maps.
//!
//! A square patch filled with a constant is slid over the image and the
//! occluded image is rescored. Low cells mark regions the classifier relies
//! on. Grid positions advance by `stride` and the last position in each axis
//! is clamped to the image edge, so the patches cover every pixel.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbones::{preprocess_raster, Backbone, ExternalScorer};
use crate::error::{Error, Result};
use crate::heads::TrainedHead;
use crate::metrics::write_json;
use crate::raster::{Mask, Raster};

pub const HISTOGRAM_BINS: usize = 20;

/// How many cells the lowest-fraction mask keeps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepMode {
    /// `floor(keep_fraction * eligible cells)` cells.
    #[default]
    Cells,
    /// Lowest cells until their footprints cover `keep_fraction` of the
    /// eligible pixel area.
    Area,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionConfig {
    pub patch_side: usize,
    pub stride: usize,
    /// Raw intensity written into the patch, before any preprocessing.
    pub fill: f32,
    pub keep_fraction: f64,
    pub keep_mode: KeepMode,
    /// Ranking is restricted to cells whose patch center lies in the mask.
    #[serde(skip)]
    pub roi: Option<Mask>,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            patch_side: 40,
            stride: 16,
            fill: 0.0,
            keep_fraction: 0.2,
            keep_mode: KeepMode::Cells,
            roi: None,
        }
    }
}

impl OcclusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || self.stride == 0 {
            return Err(Error::validation("patch side and stride must be positive"));
        }
        check_keep_fraction(self.keep_fraction)?;
        if !(0.0..=1.0).contains(&self.fill) {
            return Err(Error::validation(format!("fill {} outside [0, 1]", self.fill)));
        }
        Ok(())
    }
}

fn check_keep_fraction(k: f64) -> Result<()> {
    if k > 0.0 && k <= 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("keep fraction {k} outside (0, 1]")))
    }
}

/// Image to abnormal-class probability.
pub trait Scorer: Sync {
    fn score(&self, image: &Raster) -> Result<f64>;
}

impl<F> Scorer for F
where
    F: Fn(&Raster) -> Result<f64> + Sync,
{
    fn score(&self, image: &Raster) -> Result<f64> {
        self(image)
    }
}

/// In-process scorer: a backbone followed by one or more heads whose
/// probabilities are averaged.
pub struct HeadScorer {
    backbone: Arc<dyn Backbone>,
    heads: Vec<TrainedHead>,
}

impl HeadScorer {
    pub fn new(backbone: Arc<dyn Backbone>, heads: Vec<TrainedHead>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::validation("scorer needs at least one head"));
        }
        Ok(Self { backbone, heads })
    }
}

impl Scorer for HeadScorer {
    fn score(&self, image: &Raster) -> Result<f64> {
        let tensor = preprocess_raster(image, self.backbone.spec())?;
        let features = self.backbone.features(&tensor.view())?;
        let mut sum = 0.0;
        for head in &self.heads {
            sum += head.probabilities(&features)?[1];
        }
        Ok(sum / self.heads.len() as f64)
    }
}

static EXTERNAL_REQUEST: AtomicU64 = AtomicU64::new(0);

impl Scorer for ExternalScorer {
    fn score(&self, image: &Raster) -> Result<f64> {
        let n = EXTERNAL_REQUEST.fetch_add(1, Ordering::Relaxed);
        let path = self.scratch_dir().join(format!("occluded-{n}.png"));
        image.save(&path)?;
        let p = self.score_path(&path);
        let _ = std::fs::remove_file(&path);
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub image_id: String,
    pub image_width: usize,
    pub image_height: usize,
    /// Top-left x of each grid column.
    pub xs: Vec<usize>,
    /// Top-left y of each grid row.
    pub ys: Vec<usize>,
    /// Row-major, `ys.len() x xs.len()`.
    pub grid: Vec<f64>,
    pub config: OcclusionConfig,
    pub baseline_p: f64,
}

fn positions(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if *v.last().expect("non-empty") != last {
        v.push(last);
    }
    v
}

impl HeatMap {
    pub fn cols(&self) -> usize {
        self.xs.len()
    }

    pub fn rows(&self) -> usize {
        self.ys.len()
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.grid[row * self.cols() + col]
    }

    /// Pixel center of a cell's patch.
    pub fn center(&self, cell: usize) -> (f64, f64) {
        let half = self.config.patch_side as f64 / 2.0;
        (
            self.xs[cell % self.cols()] as f64 + half,
            self.ys[cell / self.cols()] as f64 + half,
        )
    }

    /// Per-pixel minimum over all patches covering the pixel.
    pub fn pixel_map(&self) -> Vec<f64> {
        let (w, s) = (self.image_width, self.config.patch_side);
        let mut out = vec![f64::INFINITY; w * self.image_height];
        for (cell, &p) in self.grid.iter().enumerate() {
            let (x0, y0) = (self.xs[cell % self.cols()], self.ys[cell / self.cols()]);
            for y in y0..y0 + s {
                for v in &mut out[y * w + x0..y * w + x0 + s] {
                    *v = v.min(p);
                }
            }
        }
        out
    }

    /// Writes the grid as CSV and a JSON sidecar next to it.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let mut text = String::new();
        for row in self.grid.chunks(self.cols()) {
            let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            text.push_str(&line.join(","));
            text.push('\n');
        }
        std::fs::write(csv_path, text).map_err(|e| Error::io(csv_path, e))?;
        let meta = HeatMapMeta {
            image_id: self.image_id.clone(),
            image_width: self.image_width,
            image_height: self.image_height,
            xs: self.xs.clone(),
            ys: self.ys.clone(),
            config: self.config.clone(),
            roi_pixels: self.config.roi.as_ref().map(Mask::count),
            baseline_p: self.baseline_p,
        };
        write_json(&sidecar(csv_path), &meta)
    }

    /// Loads a saved map. The ROI itself is not persisted.
    pub fn load(csv_path: &Path) -> Result<Self> {
        let side = sidecar(csv_path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: HeatMapMeta = serde_json::from_str(&text)?;
        let text = std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let mut grid = Vec::new();
        for (i, line) in text.lines().enumerate() {
            for v in line.split(',') {
                grid.push(v.trim().parse::<f64>().map_err(|_| Error::Annotation {
                    file: csv_path.to_path_buf(),
                    line: i + 1,
                    message: format!("bad probability `{v}`"),
                })?);
            }
        }
        if grid.len() != meta.xs.len() * meta.ys.len() {
            return Err(Error::validation(format!(
                "{}: grid has {} cells, sidecar says {}x{}",
                csv_path.display(),
                grid.len(),
                meta.ys.len(),
                meta.xs.len()
            )));
        }
        Ok(Self {
            image_id: meta.image_id,
            image_width: meta.image_width,
            image_height: meta.image_height,
            xs: meta.xs,
            ys: meta.ys,
            grid,
            config: meta.config,
            baseline_p: meta.baseline_p,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct HeatMapMeta {
    image_id: String,
    image_width: usize,
    image_height: usize,
    xs: Vec<usize>,
    ys: Vec<usize>,
    config: OcclusionConfig,
    roi_pixels: Option<usize>,
    baseline_p: f64,
}

fn sidecar(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn check_probability(p: f64, x: usize, y: usize) -> Result<f64> {
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(Error::Scorer {
            x,
            y,
            message: format!("probability {p} outside [0, 1]"),
        })
    }
}

/// Scores the unoccluded image and every occluded variant, in parallel by
/// cell. The result does not depend on scheduling.
pub fn occlusion_map(image_id: &str, image: &Raster, scorer: &dyn Scorer, config: &OcclusionConfig) -> Result<HeatMap> {
    config.validate()?;
    let (w, h, s) = (image.width(), image.height(), config.patch_side);
    if w < s || h < s {
        return Err(Error::validation(format!("image {w}x{h} is smaller than the {s}px patch")));
    }
    if let Some(roi) = &config.roi {
        if (roi.width(), roi.height()) != (w, h) {
            return Err(Error::validation(format!(
                "roi is {}x{}, image is {w}x{h}",
                roi.width(),
                roi.height()
            )));
        }
    }
    let xs = positions(w, s, config.stride);
    let ys = positions(h, s, config.stride);
    let baseline_p = scorer.score(image).map_err(|e| Error::Scorer {
        x: 0,
        y: 0,
        message: format!("unoccluded image: {e}"),
    })?;
    let baseline_p = check_probability(baseline_p, 0, 0)?;

    let cols = xs.len();
    let grid = (0..xs.len() * ys.len())
        .into_par_iter()
        .map(|cell| {
            let (x, y) = (xs[cell % cols], ys[cell / cols]);
            let mut occluded = image.clone();
            occluded.fill_square(x, y, s, config.fill);
            let p = scorer.score(&occluded).map_err(|e| Error::Scorer {
                x,
                y,
                message: e.to_string(),
            })?;
            check_probability(p, x, y)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(HeatMap {
        image_id: image_id.to_string(),
        image_width: w,
        image_height: h,
        xs,
        ys,
        grid,
        config: config.clone(),
        baseline_p,
    })
}

/// Marked grid cells, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMask {
    pub cols: usize,
    pub rows: usize,
    pub cells: Vec<bool>,
}

impl GridMask {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Marks the lowest-probability cells. Ties are broken by row-major order.
pub fn binarize_lowest_fraction(map: &HeatMap, keep_fraction: f64) -> Result<GridMask> {
    check_keep_fraction(keep_fraction)?;
    let mut eligible: Vec<usize> = (0..map.grid.len())
        .filter(|&cell| match &map.config.roi {
            None => true,
            Some(roi) => {
                let (cx, cy) = map.center(cell);
                roi.get(cx as usize, cy as usize)
            }
        })
        .collect();
    eligible.sort_by(|&a, &b| map.grid[a].total_cmp(&map.grid[b]).then(a.cmp(&b)));

    let mut cells = vec![false; map.grid.len()];
    match map.config.keep_mode {
        KeepMode::Cells => {
            let k = (keep_fraction * eligible.len() as f64).floor() as usize;
            for &c in &eligible[..k] {
                cells[c] = true;
            }
        }
        KeepMode::Area => {
            let area = match &map.config.roi {
                Some(roi) => roi.count(),
                None => map.image_width * map.image_height,
            };
            let target = (keep_fraction * area as f64).floor() as usize;
            let mut covered = Mask::new(map.image_width, map.image_height);
            let s = map.config.patch_side;
            for &c in &eligible {
                if covered.count() >= target {
                    break;
                }
                cells[c] = true;
                let (x0, y0) = (map.xs[c % map.cols()], map.ys[c / map.cols()]);
                for y in y0..y0 + s {
                    for x in x0..x0 + s {
                        covered.set(x, y, true);
                    }
                }
            }
        }
    }
    Ok(GridMask {
        cols: map.cols(),
        rows: map.rows(),
        cells,
    })
}

/// Mean patch center of the marked cells.
pub fn marked_centroid(map: &HeatMap, mask: &GridMask) -> Option<(f64, f64)> {
    let marked: Vec<(f64, f64)> = (0..mask.cells.len()).filter(|&c| mask.cells[c]).map(|c| map.center(c)).collect();
    if marked.is_empty() {
        return None;
    }
    let n = marked.len() as f64;
    Some((
        marked.iter().map(|p| p.0).sum::<f64>() / n,
        marked.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
}

/// Bin `i` holds `[i/20, (i+1)/20)`; 1.0 falls in the last bin.
pub fn heatmap_histogram(map: &HeatMap) -> Histogram {
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &p in &map.grid {
        counts[((p * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    let total = map.grid.len() as f64;
    Histogram {
        frequencies: counts.iter().map(|&c| c as f64 / total).collect(),
        counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramAverage {
    pub maps: usize,
    pub frequencies: Vec<f64>,
}

pub fn average_histograms(histograms: &[Histogram]) -> Result<HistogramAverage> {
    let first = histograms
        .first()
        .ok_or_else(|| Error::validation("no histograms to average"))?;
    let bins = first.frequencies.len();
    let mut sum = vec![0.0; bins];
    for h in histograms {
        if h.frequencies.len() != bins {
            return Err(Error::validation(format!(
                "histogram has {} bins, expected {bins}",
                h.frequencies.len()
            )));
        }
        sum.iter_mut().zip(&h.frequencies).for_each(|(s, f)| *s += f);
    }
    let n = histograms.len() as f64;
    Ok(HistogramAverage {
        maps: histograms.len(),
        frequencies: sum.into_iter().map(|s| s / n).collect(),
    })
}

/// Tints the footprints of marked cells red and writes the result.
pub fn overlay(image: &Raster, map: &HeatMap, mask: &GridMask) -> Result<Raster> {
    if (image.width(), image.height()) != (map.image_width, map.image_height) {
        return Err(Error::validation("overlay image does not match the heat map size"));
    }
    if mask.count() == 0 {
        return Ok(image.clone());
    }
    let (w, h, s) = (image.width(), image.height(), map.config.patch_side);
    let mut tinted = vec![false; w * h];
    for c in (0..mask.cells.len()).filter(|&c| mask.cells[c]) {
        let (x0, y0) = (map.xs[c % map.cols()], map.ys[c / map.cols()]);
        for y in y0..y0 + s {
            tinted[y * w + x0..y * w + x0 + s].fill(true);
        }
    }
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let g = image.luma(x, y);
            if tinted[y * w + x] {
                data.extend([0.5 * g + 0.5, 0.5 * g, 0.5 * g]);
            } else {
                data.extend([g, g, g]);
            }
        }
    }
    Raster::new(w, h, 3, data)
}

pub fn render_overlay(image: &Raster, map: &HeatMap, mask: &GridMask, out: &Path) -> Result<()> {
    overlay(image, map, mask)?.save(out)
}

#[cfg(test)]
mod tests {
    use sha2::{Digest, Sha256};

    use super::*;

    fn constant(_: &Raster) -> Result<f64> {
        Ok(0.7)
    }

    /// Mean intensity inside `[x0, x0 + side) x [y0, y0 + side)`.
    fn target_scorer(x0: usize, y0: usize, side: usize) -> impl Fn(&Raster) -> Result<f64> + Sync {
        move |img: &Raster| {
            let mut sum = 0.0;
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    sum += img.luma(x, y) as f64;
                }
            }
            Ok(sum / (side * side) as f64)
        }
    }

    fn toy_map(values: Vec<f64>, cols: usize) -> HeatMap {
        let rows = values.len() / cols;
        HeatMap {
            image_id: "t".into(),
            image_width: 40 + 10 * (cols - 1),
            image_height: 40 + 10 * (rows - 1),
            xs: (0..cols).map(|i| i * 10).collect(),
            ys: (0..rows).map(|i| i * 10).collect(),
            grid: values,
            config: OcclusionConfig { stride: 10, ..OcclusionConfig::default() },
            baseline_p: 0.5,
        }
    }

    #[test]
    fn grid_positions_cover_edges() {
        assert_eq!(positions(224, 40, 16).last(), Some(&184));
        assert_eq!(positions(100, 40, 30), vec![0, 30, 60]);
        assert_eq!(positions(40, 40, 16), vec![0]);
    }

    #[test]
    fn constant_scorer_gives_flat_map() {
        let img = Raster::filled(100, 80, 1, 0.5);
        let map = occlusion_map("c", &img, &constant, &OcclusionConfig::default()).unwrap();
        assert!(map.grid.iter().all(|&p| p == 0.7));
        assert_eq!(map.baseline_p, 0.7);
    }

    #[test]
    fn argmin_overlaps_target() {
        let img = Raster::filled(120, 120, 1, 1.0);
        let map = occlusion_map("t", &img, &target_scorer(60, 30, 20), &OcclusionConfig::default()).unwrap();
        let argmin = (0..map.grid.len()).min_by(|&a, &b| map.grid[a].total_cmp(&map.grid[b])).unwrap();
        let (x, y) = (map.xs[argmin % map.cols()], map.ys[argmin / map.cols()]);
        assert!(x < 80 && x + 40 > 60 && y < 50 && y + 40 > 30);
        assert!(map.grid[argmin] < map.baseline_p);
    }

    #[test]
    fn small_image_rejected() {
        let img = Raster::filled(30, 60, 1, 0.5);
        assert!(occlusion_map("s", &img, &constant, &OcclusionConfig::default()).is_err());
    }

    #[test]
    fn scorer_failure_carries_coordinates() {
        let img = Raster::filled(60, 40, 1, 1.0);
        let failing = |r: &Raster| {
            if r.get(17, 10, 0) == 0.0 && r.get(0, 0, 0) == 1.0 {
                Err(Error::validation("boom"))
            } else {
                Ok(0.5)
            }
        };
        match occlusion_map("f", &img, &failing, &OcclusionConfig::default()) {
            Err(Error::Scorer { x, y, .. }) => assert_eq!((x, y), (16, 0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lowest_fraction_picks_smallest() {
        let map = toy_map(vec![0.5, 0.1, 0.9, 0.3, 0.8, 0.6, 0.05, 0.7, 0.4, 0.95], 5);
        let mask = binarize_lowest_fraction(&map, 0.2).unwrap();
        assert_eq!(mask.count(), 2);
        assert!(mask.cells[1] && mask.cells[6]);
    }

    #[test]
    fn uniform_map_breaks_ties_row_major() {
        let map = toy_map(vec![0.3; 20], 5);
        let mask = binarize_lowest_fraction(&map, 0.2).unwrap();
        assert_eq!(mask.cells.iter().position(|&c| !c), Some(4));
        assert!(binarize_lowest_fraction(&map, 0.0).is_err());
        assert!(binarize_lowest_fraction(&map, 1.5).is_err());
    }

    #[test]
    fn roi_restricts_marked_centers() {
        let img = Raster::filled(120, 120, 1, 1.0);
        // the scorer prefers the left half, the roi allows only the right half
        let roi = Mask::from_fn(120, 120, |x, _| x >= 60);
        let config = OcclusionConfig { roi: Some(roi.clone()), ..OcclusionConfig::default() };
        let map = occlusion_map("r", &img, &target_scorer(0, 0, 50), &config).unwrap();
        let mask = binarize_lowest_fraction(&map, 0.5).unwrap();
        assert!(mask.count() > 0);
        for c in (0..mask.cells.len()).filter(|&c| mask.cells[c]) {
            let (cx, cy) = map.center(c);
            assert!(roi.get(cx as usize, cy as usize));
        }
    }

    #[test]
    fn area_mode_reaches_target_area() {
        let img = Raster::filled(120, 120, 1, 1.0);
        let config = OcclusionConfig { keep_mode: KeepMode::Area, ..OcclusionConfig::default() };
        let map = occlusion_map("a", &img, &target_scorer(40, 40, 40), &config).unwrap();
        let mask = binarize_lowest_fraction(&map, 0.2).unwrap();
        let mut covered = Mask::new(120, 120);
        for c in (0..mask.cells.len()).filter(|&c| mask.cells[c]) {
            let (x0, y0) = (map.xs[c % map.cols()], map.ys[c / map.cols()]);
            for y in y0..y0 + 40 {
                for x in x0..x0 + 40 {
                    covered.set(x, y, true);
                }
            }
        }
        assert!(covered.count() >= 2880);
        assert!(mask.count() < map.grid.len());
    }

    #[test]
    fn histograms() {
        let h = heatmap_histogram(&toy_map(vec![0.7; 6], 3));
        assert_eq!(h.counts[14], 6);
        assert_eq!(h.counts.iter().sum::<u64>(), 6);
        let h2 = heatmap_histogram(&toy_map(vec![0.1, 0.9, 0.1, 0.9], 2));
        assert_eq!((h2.counts[2], h2.counts[18]), (2, 2));
        assert_eq!(heatmap_histogram(&toy_map(vec![1.0, 0.0], 2)).counts[19], 1);

        let avg = average_histograms(std::slice::from_ref(&h)).unwrap();
        assert_eq!(avg.frequencies, h.frequencies);
        let avg = average_histograms(&[h.clone(), h.clone()]).unwrap();
        assert_eq!(avg.frequencies, h.frequencies);
        let short = Histogram { counts: vec![1], frequencies: vec![1.0] };
        assert!(average_histograms(&[h, short]).is_err());
    }

    #[test]
    fn histogram_matches_binning_oracle() {
        // values k/100, whose bin is k div 5 in exact integer arithmetic
        let ks: Vec<u64> = (0..60).map(|i| (i * 37) % 101).collect();
        let h = heatmap_histogram(&toy_map(ks.iter().map(|&k| k as f64 / 100.0).collect(), 6));
        let mut oracle = [0u64; 20];
        for k in ks {
            oracle[((k / 5) as usize).min(19)] += 1;
        }
        assert_eq!(h.counts, oracle);
    }

    #[test]
    fn heat_map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = toy_map(vec![0.25, 0.5, 0.125, 1.0, 0.0, 0.3], 3);
        let path = dir.path().join("m.csv");
        map.save(&path).unwrap();
        assert_eq!(HeatMap::load(&path).unwrap(), map);
    }

    #[test]
    fn overlay_cases() {
        let img = Raster::from_fn(60, 50, |x, y| ((x + y) % 7) as f32 / 7.0);
        let map = toy_map(vec![0.2, 0.8, 0.6, 0.9, 0.1, 0.4], 3);
        let empty = GridMask { cols: 3, rows: 2, cells: vec![false; 6] };
        assert_eq!(overlay(&img, &map, &empty).unwrap(), img);

        let full = GridMask { cols: 3, rows: 2, cells: vec![true; 6] };
        let out = overlay(&img, &map, &full).unwrap();
        for y in 0..50 {
            for x in 0..60 {
                assert_eq!(out.get(x, y, 0), 0.5 * img.luma(x, y) + 0.5);
            }
        }
    }

    #[test]
    fn overlay_matches_golden_digest() {
        let dir = tempfile::tempdir().unwrap();
        let img = Raster::from_fn(60, 50, |x, y| ((x * 3 + y * 5) % 11) as f32 / 10.0);
        let map = toy_map(vec![0.2, 0.8, 0.6, 0.9, 0.1, 0.4], 3);
        let mask = binarize_lowest_fraction(&map, 0.34).unwrap();
        let path = dir.path().join("o.png");
        render_overlay(&img, &map, &mask, &path).unwrap();
        let back = Raster::load(&path).unwrap();
        let bytes: Vec<u8> = back.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), GOLDEN_OVERLAY);
    }

    const GOLDEN_OVERLAY: &str = "53aae5444be7ca92b8a050c4f9eb5b45b9ff0bfaa541ee94958bb8c741100152";
}
