//! Procedural chest-radiograph phantoms with lung/heart masks.
//!
//! Each phantom is a soft-tissue ellipse with two dark lung fields and a bright
//! heart. Abnormality tags change the anatomy in ways a classifier can pick up:
//! `cardiomegaly` widens the heart, `pulmonary_edema` hazes the lungs,
//! `tuberculosis` and `nodule` add bright foci. Everything is driven by one
//! seed so fixture sets are reproducible byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub side: usize,
    pub seed: u64,
    pub normals: usize,
    /// `(tag, count)` pairs; each positive carries exactly one tag.
    pub positives: Vec<(String, usize)>,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            side: 224,
            seed: 0,
            normals: 40,
            positives: vec![("cardiomegaly".into(), 40)],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// A rendered phantom and its anatomy masks.
pub struct Phantom {
    pub image: Raster,
    pub lung_left: Mask,
    pub lung_right: Mask,
    pub heart: Mask,
}

/// Renders one phantom. `tags` decide which abnormal findings are drawn.
pub fn render_phantom(side: usize, tags: &[&str], rng: &mut impl Rng) -> Phantom {
    let s = side as f64;
    let jitter = |rng: &mut dyn rand::RngCore, scale: f64| (rng.random::<f64>() - 0.5) * 2.0 * scale;

    let thorax = Ellipse {
        cx: 0.5 * s,
        cy: 0.52 * s,
        rx: 0.43 * s,
        ry: 0.45 * s,
    };
    let lung_w = 0.14 * s * (1.0 + jitter(rng, 0.06));
    let lung_h = 0.29 * s * (1.0 + jitter(rng, 0.06));
    // Image-left is the patient's right side.
    let right = Ellipse {
        cx: 0.31 * s + jitter(rng, 0.01 * s),
        cy: 0.46 * s,
        rx: lung_w,
        ry: lung_h,
    };
    let left = Ellipse {
        cx: 0.69 * s + jitter(rng, 0.01 * s),
        cy: 0.46 * s,
        rx: lung_w,
        ry: lung_h,
    };
    let enlarged = tags.contains(&"cardiomegaly");
    let heart_rx = if enlarged { 0.175 } else { 0.12 } * s * (1.0 + jitter(rng, 0.12));
    let heart = Ellipse {
        cx: 0.54 * s + jitter(rng, 0.01 * s),
        cy: 0.64 * s + jitter(rng, 0.01 * s),
        rx: heart_rx,
        ry: 0.12 * s * (1.0 + jitter(rng, 0.08)),
    };

    let edema = tags.contains(&"pulmonary_edema");
    let mut foci: Vec<(Ellipse, f32)> = Vec::new();
    if tags.contains(&"tuberculosis") {
        for _ in 0..rng.random_range(2..5) {
            let lung = if rng.random::<bool>() { right } else { left };
            foci.push((
                Ellipse {
                    cx: lung.cx + jitter(rng, 0.5 * lung.rx),
                    cy: lung.cy - 0.4 * lung.ry + jitter(rng, 0.25 * lung.ry),
                    rx: 0.035 * s,
                    ry: 0.035 * s,
                },
                0.35,
            ));
        }
    }
    if tags.contains(&"nodule") {
        let lung = if rng.random::<bool>() { right } else { left };
        foci.push((
            Ellipse {
                cx: lung.cx + jitter(rng, 0.4 * lung.rx),
                cy: lung.cy + jitter(rng, 0.4 * lung.ry),
                rx: 0.02 * s,
                ry: 0.02 * s,
            },
            0.4,
        ));
    }
    let haze_phase: f64 = rng.random::<f64>() * std::f64::consts::TAU;

    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v: f32 = 0.05;
            if thorax.contains(fx, fy) {
                v = 0.45;
            }
            if right.contains(fx, fy) || left.contains(fx, fy) {
                v = 0.15;
                if edema {
                    let wave = ((fx * 0.09 + haze_phase).sin() * (fy * 0.07).cos()) as f32;
                    v += 0.16 + 0.06 * wave;
                }
            }
            if heart.contains(fx, fy) {
                v = 0.62;
            }
            for (e, add) in &foci {
                if e.contains(fx, fy) {
                    v += add;
                }
            }
            v += (rng.random::<f32>() - 0.5) * 0.06;
            data.push(v.clamp(0.0, 1.0));
        }
    }
    let image = Raster::new(side, side, 1, data).expect("sized by construction");
    let centre = |x: usize, y: usize| (x as f64 + 0.5, y as f64 + 0.5);
    let heart_mask = Mask::from_fn(side, side, |x, y| {
        let (fx, fy) = centre(x, y);
        heart.contains(fx, fy)
    });
    let lung_mask = |e: Ellipse| {
        Mask::from_fn(side, side, |x, y| {
            let (fx, fy) = centre(x, y);
            e.contains(fx, fy) && !heart.contains(fx, fy)
        })
    };
    Phantom {
        image,
        lung_left: lung_mask(left),
        lung_right: lung_mask(right),
        heart: heart_mask,
    }
}

/// Writes a `synthetic`-layout dataset (images, masks, `labels.csv`) into `dir`.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<()> {
    if spec.side < 16 {
        return Err(Error::validation("fixture side must be at least 16 px"));
    }
    for sub in ["images", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut csv = String::from("id,file,view,labels,lung_left,lung_right,heart\n");
    let mut jobs: Vec<(String, Option<&str>)> = (0..spec.normals)
        .map(|i| (format!("normal_{i:04}"), None))
        .collect();
    for (tag, count) in &spec.positives {
        for i in 0..*count {
            jobs.push((format!("{tag}_{i:04}"), Some(tag.as_str())));
        }
    }
    for (id, tag) in jobs {
        let tags: Vec<&str> = tag.into_iter().collect();
        let phantom = render_phantom(spec.side, &tags, &mut rng);
        let file = format!("images/{id}.png");
        phantom.image.save(&dir.join(&file))?;
        let mut mask_files = Vec::new();
        for (part, mask) in [
            ("lung_left", &phantom.lung_left),
            ("lung_right", &phantom.lung_right),
            ("heart", &phantom.heart),
        ] {
            let f = format!("masks/{id}_{part}.png");
            mask.save(&dir.join(&f))?;
            mask_files.push(f);
        }
        writeln!(
            csv,
            "{id},{file},frontal,{},{},{},{}",
            tag.unwrap_or(""),
            mask_files[0],
            mask_files[1],
            mask_files[2]
        )
        .expect("writing to a String");
    }
    let path = dir.join("labels.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(path, e))
}
