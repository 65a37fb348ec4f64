//! Cardiothoracic features from lung and heart masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::write_json;
use crate::raster::Mask;

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub image_id: String,
    pub lung_left: Mask,
    pub lung_right: Mask,
    pub heart: Mask,
    /// Atlases that contributed to the vote.
    pub atlases: Vec<String>,
}

impl Segmentation {
    /// Writes `<id>_lung_left.png`, `<id>_lung_right.png`, `<id>_heart.png`
    /// and `<id>_segmentation.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.lung_left.save(&dir.join(format!("{}_lung_left.png", self.image_id)))?;
        self.lung_right.save(&dir.join(format!("{}_lung_right.png", self.image_id)))?;
        self.heart.save(&dir.join(format!("{}_heart.png", self.image_id)))?;
        #[derive(Serialize)]
        struct Meta<'a> {
            image_id: &'a str,
            atlases: &'a [String],
        }
        write_json(
            &dir.join(format!("{}_segmentation.json", self.image_id)),
            &Meta {
                image_id: &self.image_id,
                atlases: &self.atlases,
            },
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleFeatures {
    pub ctr_1d: f64,
    pub ctr_2d: f64,
    pub ctar: f64,
}

impl RuleFeatures {
    pub fn as_array(&self) -> [f64; 3] {
        [self.ctr_1d, self.ctr_2d, self.ctar]
    }
}

/// Widest horizontal extent over rows, in pixels.
fn max_row_extent(masks: &[&Mask]) -> usize {
    let (w, h) = (masks[0].width(), masks[0].height());
    (0..h)
        .filter_map(|y| {
            let on = |x: usize| masks.iter().any(|m| m.get(x, y));
            let left = (0..w).find(|&x| on(x))?;
            let right = (0..w).rev().find(|&x| on(x))?;
            Some(right - left + 1)
        })
        .max()
        .unwrap_or(0)
}

/// Foreground pixels with at least one 4-neighbour outside the mask.
pub fn boundary_pixels(mask: &Mask) -> usize {
    let mut n = 0;
    for y in 0..mask.height() as i64 {
        for x in 0..mask.width() as i64 {
            if mask.get_signed(x, y)
                && !(mask.get_signed(x - 1, y)
                    && mask.get_signed(x + 1, y)
                    && mask.get_signed(x, y - 1)
                    && mask.get_signed(x, y + 1))
            {
                n += 1;
            }
        }
    }
    n
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull of the mask's pixel centers, rasterized back onto the grid.
pub fn convex_hull(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut pts: Vec<(i64, i64)> = Vec::new();
    for y in 0..h {
        let left = (0..w).find(|&x| mask.get(x, y));
        let right = (0..w).rev().find(|&x| mask.get(x, y));
        if let (Some(l), Some(r)) = (left, right) {
            pts.push((l as i64, y as i64));
            pts.push((r as i64, y as i64));
        }
    }
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return mask.clone();
    }
    // Andrew's monotone chain, counter-clockwise in (x, y).
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    let inside = |x: i64, y: i64| {
        if hull.len() < 3 {
            // collinear points: the hull is a segment
            let (a, b) = (hull[0], hull[hull.len() - 1]);
            return cross(a, b, (x, y)) == 0
                && x >= a.0.min(b.0)
                && x <= a.0.max(b.0)
                && y >= a.1.min(b.1)
                && y <= a.1.max(b.1);
        }
        (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], (x, y)) >= 0)
    };
    Mask::from_fn(w, h, |x, y| mask.get(x, y) || inside(x as i64, y as i64))
}

/// Width ratio, perimeter ratio and area ratio of heart to thorax.
pub fn compute_rule_features(seg: &Segmentation) -> Result<RuleFeatures> {
    for (name, m) in [("lung_left", &seg.lung_left), ("lung_right", &seg.lung_right), ("heart", &seg.heart)] {
        if m.is_empty() {
            return Err(Error::Degenerate(name));
        }
    }
    let dims = (seg.heart.width(), seg.heart.height());
    if (seg.lung_left.width(), seg.lung_left.height()) != dims || (seg.lung_right.width(), seg.lung_right.height()) != dims {
        return Err(Error::validation("segmentation masks differ in size"));
    }
    let heart_width = max_row_extent(&[&seg.heart]);
    let thorax_width = max_row_extent(&[&seg.lung_left, &seg.lung_right]);
    let thorax = convex_hull(&seg.lung_left).union(&convex_hull(&seg.lung_right));
    let lung_area = seg.lung_left.count() + seg.lung_right.count();
    Ok(RuleFeatures {
        ctr_1d: heart_width as f64 / thorax_width as f64,
        ctr_2d: boundary_pixels(&seg.heart) as f64 / boundary_pixels(&thorax) as f64,
        ctar: seg.heart.count() as f64 / lung_area as f64,
    })
}

pub fn save_rule_features(path: &Path, features: &std::collections::BTreeMap<String, RuleFeatures>) -> Result<()> {
    write_json(path, features)
}

pub fn load_rule_features(path: &Path) -> Result<std::collections::BTreeMap<String, RuleFeatures>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
