//! Dense correspondence between an atlas image and a target image.
//!
//! A [`Flow`] is backward: for every target pixel it gives the atlas
//! coordinate that lands there, so warping never leaves holes.

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub width: usize,
    pub height: usize,
    /// Target pixel `(x, y)` samples the atlas at `(x + dx, y + dy)`.
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

impl Flow {
    pub fn zero(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    /// Nearest-neighbour warp of an atlas mask into target space.
    pub fn warp_mask(&self, atlas: &Mask) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            let i = y * self.width + x;
            let sx = (x as f32 + self.dx[i]).round() as i64;
            let sy = (y as f32 + self.dy[i]).round() as i64;
            atlas.get_signed(sx, sy)
        })
    }
}

/// Maps atlas coordinates onto a same-sized target image.
pub trait DenseCorrespondence: Sync {
    fn flow(&self, atlas: &Raster, target: &Raster) -> Result<Flow>;
}

fn same_size(atlas: &Raster, target: &Raster) -> Result<()> {
    if (atlas.width(), atlas.height()) != (target.width(), target.height()) {
        return Err(Error::validation(format!(
            "atlas is {}x{}, target is {}x{}",
            atlas.width(),
            atlas.height(),
            target.width(),
            target.height()
        )));
    }
    Ok(())
}

pub struct Identity;

impl DenseCorrespondence for Identity {
    fn flow(&self, atlas: &Raster, target: &Raster) -> Result<Flow> {
        same_size(atlas, target)?;
        Ok(Flow::zero(target.width(), target.height()))
    }
}

/// Atlas content moves by `(dx, dy)` pixels in the target.
pub struct Translation {
    pub dx: f32,
    pub dy: f32,
}

impl DenseCorrespondence for Translation {
    fn flow(&self, atlas: &Raster, target: &Raster) -> Result<Flow> {
        same_size(atlas, target)?;
        let n = target.width() * target.height();
        Ok(Flow {
            width: target.width(),
            height: target.height(),
            dx: vec![-self.dx; n],
            dy: vec![-self.dy; n],
        })
    }
}

const ORIENTATION_BINS: usize = 8;

/// Coarse block matching of gradient-orientation descriptors on a control
/// grid, median-smoothed and bilinearly interpolated to every pixel. A
/// simple stand-in for SIFT-flow.
#[derive(Debug, Clone)]
pub struct BlockMatching {
    /// Control-point spacing in pixels.
    pub step: usize,
    /// Descriptor block side in pixels; split into 2x2 cells.
    pub block: usize,
    /// Largest displacement searched along each axis.
    pub search: i64,
    /// Displacement candidates are tried at this spacing.
    pub search_step: i64,
    /// Penalty per squared pixel of displacement.
    pub smoothness: f64,
}

impl Default for BlockMatching {
    fn default() -> Self {
        Self {
            step: 16,
            block: 16,
            search: 24,
            search_step: 2,
            smoothness: 1e-4,
        }
    }
}

/// Per-orientation gradient magnitude, as summed-area tables.
struct OrientationIntegrals {
    width: usize,
    height: usize,
    tables: Vec<Vec<f64>>,
}

impl OrientationIntegrals {
    fn new(image: &Raster) -> Self {
        let (w, h) = (image.width(), image.height());
        let at = |x: usize, y: usize| image.luma(x.min(w - 1), y.min(h - 1)) as f64;
        let mut tables = vec![vec![0.0; (w + 1) * (h + 1)]; ORIENTATION_BINS];
        for y in 0..h {
            for x in 0..w {
                let gx = at(x + 1, y) - at(x.saturating_sub(1), y);
                let gy = at(x, y + 1) - at(x, y.saturating_sub(1));
                let mag = (gx * gx + gy * gy).sqrt();
                let angle = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                let bin = ((angle / std::f64::consts::TAU * ORIENTATION_BINS as f64) as usize).min(ORIENTATION_BINS - 1);
                for (b, t) in tables.iter_mut().enumerate() {
                    let v = if b == bin { mag } else { 0.0 };
                    t[(y + 1) * (w + 1) + x + 1] = v + t[y * (w + 1) + x + 1] + t[(y + 1) * (w + 1) + x] - t[y * (w + 1) + x];
                }
            }
        }
        Self { width: w, height: h, tables }
    }

    /// Box sum over `[x0, x1) x [y0, y1)`, clipped to the image.
    fn sum(&self, b: usize, x0: i64, y0: i64, x1: i64, y1: i64) -> f64 {
        let cx = |v: i64| v.clamp(0, self.width as i64) as usize;
        let cy = |v: i64| v.clamp(0, self.height as i64) as usize;
        let (x0, x1, y0, y1) = (cx(x0), cx(x1), cy(y0), cy(y1));
        let w = self.width + 1;
        let t = &self.tables[b];
        t[y1 * w + x1] - t[y0 * w + x1] - t[y1 * w + x0] + t[y0 * w + x0]
    }

    /// L2-normalized 2x2-cell descriptor of the block centered at `(cx, cy)`.
    fn descriptor(&self, cx: i64, cy: i64, block: i64, out: &mut [f64]) {
        let half = block / 2;
        let mut k = 0;
        for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let x0 = cx - half + ox * half;
            let y0 = cy - half + oy * half;
            for b in 0..ORIENTATION_BINS {
                out[k] = self.sum(b, x0, y0, x0 + half, y0 + half);
                k += 1;
            }
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_filter(grid: &[f64], cols: usize, rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    let mut window = Vec::with_capacity(9);
    for r in 0..rows {
        for c in 0..cols {
            window.clear();
            for rr in r.saturating_sub(1)..(r + 2).min(rows) {
                for cc in c.saturating_sub(1)..(c + 2).min(cols) {
                    window.push(grid[rr * cols + cc]);
                }
            }
            out[r * cols + c] = median(&mut window);
        }
    }
    out
}

/// Bilinear interpolation of a control grid whose node `i` sits at pixel `i * step`.
fn interpolate(grid: &[f64], cols: usize, rows: usize, step: usize, w: usize, h: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let gy = (y as f64 / step as f64).min((rows - 1) as f64);
        let (r0, fy) = (gy.floor() as usize, gy.fract());
        let r1 = (r0 + 1).min(rows - 1);
        for x in 0..w {
            let gx = (x as f64 / step as f64).min((cols - 1) as f64);
            let (c0, fx) = (gx.floor() as usize, gx.fract());
            let c1 = (c0 + 1).min(cols - 1);
            let top = grid[r0 * cols + c0] * (1.0 - fx) + grid[r0 * cols + c1] * fx;
            let bottom = grid[r1 * cols + c0] * (1.0 - fx) + grid[r1 * cols + c1] * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    out
}

impl DenseCorrespondence for BlockMatching {
    fn flow(&self, atlas: &Raster, target: &Raster) -> Result<Flow> {
        same_size(atlas, target)?;
        if self.step == 0 || self.block < 2 || self.search < 0 || self.search_step < 1 {
            return Err(Error::validation("invalid block-matching parameters"));
        }
        let (w, h) = (target.width(), target.height());
        let a = OrientationIntegrals::new(atlas);
        let t = OrientationIntegrals::new(target);
        let cols = w.div_ceil(self.step).max(1) + 1;
        let rows = h.div_ceil(self.step).max(1) + 1;
        let mut gdx = vec![0.0; cols * rows];
        let mut gdy = vec![0.0; cols * rows];
        let dim = 4 * ORIENTATION_BINS;
        let (mut dt, mut da) = (vec![0.0; dim], vec![0.0; dim]);
        let block = self.block as i64;
        for r in 0..rows {
            for c in 0..cols {
                let (px, py) = ((c * self.step) as i64, (r * self.step) as i64);
                t.descriptor(px, py, block, &mut dt);
                let mut best = (f64::INFINITY, 0i64, 0i64);
                let mut oy = -self.search;
                while oy <= self.search {
                    let mut ox = -self.search;
                    while ox <= self.search {
                        a.descriptor(px + ox, py + oy, block, &mut da);
                        let cost = dt.iter().zip(&da).map(|(p, q)| (p - q).powi(2)).sum::<f64>()
                            + self.smoothness * (ox * ox + oy * oy) as f64;
                        if cost < best.0 {
                            best = (cost, ox, oy);
                        }
                        ox += self.search_step;
                    }
                    oy += self.search_step;
                }
                if !best.0.is_finite() {
                    return Err(Error::validation(format!("no match for control point ({px}, {py})")));
                }
                gdx[r * cols + c] = best.1 as f64;
                gdy[r * cols + c] = best.2 as f64;
            }
        }
        let gdx = median_filter(&gdx, cols, rows);
        let gdy = median_filter(&gdy, cols, rows);
        Ok(Flow {
            width: w,
            height: h,
            dx: interpolate(&gdx, cols, rows, self.step, w, h),
            dy: interpolate(&gdy, cols, rows, self.step, w, h),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_mask(w: usize, h: usize, x0: usize, y0: usize, side: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side)
    }

    #[test]
    fn identity_keeps_masks() {
        let img = Raster::filled(32, 32, 1, 0.5);
        let m = square_mask(32, 32, 4, 6, 10);
        assert_eq!(Identity.flow(&img, &img).unwrap().warp_mask(&m), m);
    }

    #[test]
    fn translation_moves_mask() {
        let img = Raster::filled(40, 40, 1, 0.5);
        let m = square_mask(40, 40, 5, 5, 10);
        let warped = Translation { dx: 7.0, dy: -3.0 }.flow(&img, &img).unwrap().warp_mask(&m);
        assert_eq!(warped, square_mask(40, 40, 12, 2, 10));
    }

    #[test]
    fn block_matching_recovers_a_shift() {
        // a bright disc moved by (8, 4) between atlas and target
        let disc = |cx: f64, cy: f64| {
            Raster::from_fn(96, 96, move |x, y| {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d < 20.0 { 0.9 } else { 0.1 }
            })
        };
        let atlas = disc(44.0, 46.0);
        let target = disc(52.0, 50.0);
        let flow = BlockMatching::default().flow(&atlas, &target).unwrap();
        let m = Mask::from_fn(96, 96, |x, y| ((x as f64 - 44.0).powi(2) + (y as f64 - 46.0).powi(2)).sqrt() < 20.0);
        let expected = Mask::from_fn(96, 96, |x, y| ((x as f64 - 52.0).powi(2) + (y as f64 - 50.0).powi(2)).sqrt() < 20.0);
        let warped = flow.warp_mask(&m);
        let agree = (0..96 * 96).filter(|&i| warped.get(i % 96, i / 96) == expected.get(i % 96, i / 96)).count();
        let before = (0..96 * 96).filter(|&i| m.get(i % 96, i / 96) == expected.get(i % 96, i / 96)).count();
        assert!(agree > before, "warp did not improve overlap: {agree} vs {before}");
    }

    #[test]
    fn size_mismatch_rejected() {
        let a = Raster::filled(10, 10, 1, 0.5);
        let b = Raster::filled(12, 10, 1, 0.5);
        assert!(Identity.flow(&a, &b).is_err());
        assert!(BlockMatching::default().flow(&a, &b).is_err());
    }
}
