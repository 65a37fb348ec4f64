//! Deterministic stand-in backbone: a small random convolutional stack with
//! fixed seeded weights. It mirrors the coarse structure of the real
//! architectures (stem, four downsampling residual stages, global pooling,
//! three dense layers) so every published tap name resolves to an
//! activation, and lets the whole harness run without downloaded weights.

use ndarray::{Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{tap_point, TapPoint};
use super::{Backbone, BackboneSpec, Preprocessing};
use crate::error::{Error, Result};

const CHANNELS: [usize; 5] = [8, 16, 32, 48, 64];
const DENSE: [usize; 3] = [128, 128, 16];
/// Spatial taps are average-pooled onto this grid before flattening.
const TAP_GRID: usize = 4;
const FORMAT: &str = "cxr-standin/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Conv {
    c_in: usize,
    c_out: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stage {
    conv: Conv,
    gamma: Vec<f32>,
    beta: Vec<f32>,
    /// 1x1 projection of the pooled stage input; the stem has none.
    shortcut: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    n_in: usize,
    n_out: usize,
    weights: Vec<f32>,
    bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandInWeights {
    format: String,
    seed: u64,
    stages: Vec<Stage>,
    dense: Vec<Dense>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl StandInWeights {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in CHANNELS.iter().enumerate() {
            let bound = (6.0 / (c_in * 9) as f32).sqrt();
            let conv = Conv {
                c_in,
                c_out,
                weights: uniform(&mut rng, c_out * c_in * 9, bound),
                bias: uniform(&mut rng, c_out, 0.01),
            };
            let gamma = (0..c_out).map(|_| rng.random_range(0.8..1.2)).collect();
            let beta = uniform(&mut rng, c_out, 0.1);
            let shortcut = (i > 0).then(|| uniform(&mut rng, c_out * c_in, (6.0 / c_in as f32).sqrt()));
            stages.push(Stage {
                conv,
                gamma,
                beta,
                shortcut,
            });
            c_in = c_out;
        }
        let mut dense = Vec::new();
        let mut n_in = CHANNELS[CHANNELS.len() - 1];
        for &n_out in &DENSE {
            dense.push(Dense {
                n_in,
                n_out,
                weights: uniform(&mut rng, n_out * n_in, (6.0 / n_in as f32).sqrt()),
                bias: uniform(&mut rng, n_out, 0.01),
            });
            n_in = n_out;
        }
        Self {
            format: FORMAT.to_string(),
            seed,
            stages,
            dense,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Config(format!("cannot read backbone weights {}: {e}", path.display()))
        })?;
        let w: StandInWeights = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{} is not a stand-in weights file: {e}", path.display())))?;
        if w.format != FORMAT {
            return Err(Error::Config(format!(
                "{}: unsupported weights format `{}`",
                path.display(),
                w.format
            )));
        }
        Ok(w)
    }

    /// SHA-256 over every parameter, in a fixed order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(FORMAT.as_bytes());
        let mut feed = |v: &[f32]| {
            for x in v {
                h.update(x.to_le_bytes());
            }
        };
        for s in &self.stages {
            feed(&s.conv.weights);
            feed(&s.conv.bias);
            feed(&s.gamma);
            feed(&s.beta);
            if let Some(sc) = &s.shortcut {
                feed(sc);
            }
        }
        for d in &self.dense {
            feed(&d.weights);
            feed(&d.bias);
        }
        hex::encode(h.finalize())
    }
}

/// 3x3 convolution, stride 2, zero padding 1.
fn conv_s2(x: &Array3<f32>, conv: &Conv) -> Array3<f32> {
    let (c_in, h, w) = x.dim();
    debug_assert_eq!(c_in, conv.c_in);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array3::<f32>::zeros((conv.c_out, oh, ow));
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for co in 0..conv.c_out {
        let plane = &mut os[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(conv.bias[co]);
        for ci in 0..c_in {
            let src = &xs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wgt = conv.weights[((co * c_in + ci) * 3 + ky) * 3 + kx];
                    for oy in 0..oh {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix >= 0 && (ix as usize) < w {
                                *o += wgt * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2x2 average pooling, ceil mode (partial windows average what they cover).
fn avg_pool2(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    Array3::from_shape_fn((c, oh, ow), |(ch, oy, ox)| {
        let mut sum = 0.0;
        let mut n = 0.0;
        for y in oy * 2..(oy * 2 + 2).min(h) {
            for xx in ox * 2..(ox * 2 + 2).min(w) {
                sum += x[[ch, y, xx]];
                n += 1.0;
            }
        }
        sum / n
    })
}

fn affine(x: &mut Array3<f32>, gamma: &[f32], beta: &[f32]) {
    for (c, mut plane) in x.outer_iter_mut().enumerate() {
        plane.mapv_inplace(|v| gamma[c] * v + beta[c]);
    }
}

fn relu(mut x: Array3<f32>) -> Array3<f32> {
    x.mapv_inplace(|v| v.max(0.0));
    x
}

/// Adaptive average pooling onto a `TAP_GRID` square, flattened channel-major.
fn grid_flatten(x: &Array3<f32>) -> Vec<f32> {
    let (c, h, w) = x.dim();
    let g = TAP_GRID;
    let mut out = Vec::with_capacity(c * g * g);
    for ch in 0..c {
        for gy in 0..g {
            let (y0, y1) = (gy * h / g, ((gy + 1) * h).div_ceil(g).max(gy * h / g + 1).min(h));
            for gx in 0..g {
                let (x0, x1) = (gx * w / g, ((gx + 1) * w).div_ceil(g).max(gx * w / g + 1).min(w));
                let mut sum = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        sum += x[[ch, y, xx]];
                    }
                }
                out.push(sum / ((y1 - y0) * (x1 - x0)) as f32);
            }
        }
    }
    out
}

fn dense(x: &[f32], d: &Dense) -> Vec<f32> {
    (0..d.n_out)
        .map(|o| {
            let row = &d.weights[o * d.n_in..(o + 1) * d.n_in];
            d.bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>()
        })
        .collect()
}

pub struct StandInBackbone {
    spec: BackboneSpec,
    weights: StandInWeights,
    checksum: String,
    tap: TapPoint,
}

impl StandInBackbone {
    pub fn new(spec: BackboneSpec, weights: StandInWeights) -> Self {
        let checksum = weights.checksum();
        let tap = tap_point(spec.family, &spec.tap_layer);
        Self {
            spec,
            weights,
            checksum,
            tap,
        }
    }

    pub fn weights(&self) -> &StandInWeights {
        &self.weights
    }

    /// Output length at this tap for a square input of `side` pixels.
    pub fn feature_dim(&self) -> usize {
        let grid = TAP_GRID * TAP_GRID;
        match self.tap {
            TapPoint::Conv(s) | TapPoint::Norm(s) | TapPoint::Residual(s) | TapPoint::Relu(s) | TapPoint::Pool(s) => {
                CHANNELS[s] * grid
            }
            TapPoint::GlobalPool => CHANNELS[CHANNELS.len() - 1],
            TapPoint::Dense(n) | TapPoint::DenseRelu(n) => DENSE[n - 1],
        }
    }

    fn forward(&self, image_hwc: &ArrayView3<f32>) -> Vec<f32> {
        // Bring mean-subtracted 0..255 inputs to roughly unit scale.
        let scale = match self.spec.preprocessing {
            Preprocessing::MeanSubtract => 1.0 / 64.0,
            Preprocessing::ScaleUnit => 1.0,
        };
        let mut x = image_hwc.permuted_axes([2, 0, 1]).mapv(|v| v * scale);
        x = x.as_standard_layout().to_owned();
        for (i, stage) in self.weights.stages.iter().enumerate() {
            let mut y = conv_s2(&x, &stage.conv);
            if self.tap == TapPoint::Conv(i) {
                return grid_flatten(&y);
            }
            affine(&mut y, &stage.gamma, &stage.beta);
            if self.tap == TapPoint::Norm(i) {
                return grid_flatten(&y);
            }
            if let Some(sc) = &stage.shortcut {
                let pooled = avg_pool2(&x);
                let (c_in, c_out) = (stage.conv.c_in, stage.conv.c_out);
                for co in 0..c_out {
                    for ci in 0..c_in {
                        let wgt = sc[co * c_in + ci];
                        let src = pooled.index_axis(ndarray::Axis(0), ci);
                        let mut dst = y.index_axis_mut(ndarray::Axis(0), co);
                        dst.zip_mut_with(&src, |d, s| *d += wgt * s);
                    }
                }
            }
            if self.tap == TapPoint::Residual(i) {
                return grid_flatten(&y);
            }
            y = relu(y);
            if self.tap == TapPoint::Relu(i) {
                return grid_flatten(&y);
            }
            if self.tap == TapPoint::Pool(i) {
                return grid_flatten(&avg_pool2(&y));
            }
            x = y;
        }
        let (c, h, w) = x.dim();
        let mut v: Vec<f32> = (0..c)
            .map(|ch| x.index_axis(ndarray::Axis(0), ch).sum() / (h * w) as f32)
            .collect();
        if self.tap == TapPoint::GlobalPool {
            return v;
        }
        for (n, d) in self.weights.dense.iter().enumerate() {
            v = dense(&v, d);
            if self.tap == TapPoint::Dense(n + 1) {
                return v;
            }
            v.iter_mut().for_each(|a| *a = a.max(0.0));
            if self.tap == TapPoint::DenseRelu(n + 1) {
                return v;
            }
        }
        v
    }
}

impl Backbone for StandInBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn checksum(&self) -> &str {
        &self.checksum
    }

    fn features(&self, image: &ArrayView3<f32>) -> Result<Vec<f32>> {
        let (h, w, c) = image.dim();
        if h == 0 || w == 0 || c != 3 {
            return Err(Error::validation(format!("backbone input must be HxWx3, got {h}x{w}x{c}")));
        }
        Ok(self.forward(image))
    }
}
