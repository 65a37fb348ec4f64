//! Linear soft-margin SVM (SMO with maximal-violating-pair selection) and a
//! Platt logistic link from decision values to probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    /// Solves the dual with box constraint `c`. Labels are 0/1.
    pub fn fit(xs: &[Vec<f64>], labels: &[u8], c: f64, tolerance: f64) -> Result<Self> {
        let n = xs.len();
        if n != labels.len() || n == 0 {
            return Err(Error::validation("features and labels differ in length"));
        }
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == n {
            return Err(Error::validation("SVM training needs both classes"));
        }
        if c.is_nan() || c <= 0.0 {
            return Err(Error::validation("SVM cost must be positive"));
        }
        let dim = xs[0].len();
        if xs.iter().any(|x| x.len() != dim) {
            return Err(Error::validation("SVM inputs differ in dimension"));
        }
        let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let q: Vec<f64> = (0..n * n).map(|k| y[k / n] * y[k % n] * dot(&xs[k / n], &xs[k % n])).collect();
        let mut alpha = vec![0.0; n];
        let mut grad = vec![-1.0; n];

        let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
        let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);
        let max_iter = 100_000.max(100 * n);
        for _ in 0..max_iter {
            let mut i = usize::MAX;
            let mut j = usize::MAX;
            let (mut gmax, mut gmin) = (f64::NEG_INFINITY, f64::INFINITY);
            for t in 0..n {
                let v = -y[t] * grad[t];
                if in_up(alpha[t], y[t]) && v > gmax {
                    gmax = v;
                    i = t;
                }
                if in_low(alpha[t], y[t]) && v < gmin {
                    gmin = v;
                    j = t;
                }
            }
            if i == usize::MAX || j == usize::MAX || gmax - gmin < tolerance {
                break;
            }
            let (qi, qj) = (&q[i * n..(i + 1) * n], &q[j * n..(j + 1) * n]);
            let (old_i, old_j) = (alpha[i], alpha[j]);
            if y[i] != y[j] {
                let quad = (qi[i] + qj[j] + 2.0 * qi[j]).max(TAU);
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = c - diff;
                    }
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let quad = (qi[i] + qj[j] - 2.0 * qi[j]).max(TAU);
                let delta = (grad[i] - grad[j]) / quad;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = sum - c;
                    }
                    if alpha[j] > c {
                        alpha[j] = c;
                        alpha[i] = sum - c;
                    }
                } else {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = sum;
                    }
                    if alpha[i] < 0.0 {
                        alpha[i] = 0.0;
                        alpha[j] = sum;
                    }
                }
            }
            let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
            for t in 0..n {
                grad[t] += qi[t] * di + qj[t] * dj;
            }
        }

        // Bias from free support vectors, else the midpoint of the feasible range.
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut free, mut free_sum) = (0usize, 0.0);
        for t in 0..n {
            let yg = y[t] * grad[t];
            let at_upper = alpha[t] >= c;
            let at_lower = alpha[t] <= 0.0;
            if (at_upper && y[t] < 0.0) || (at_lower && y[t] > 0.0) {
                ub = ub.min(yg);
            } else if at_upper || at_lower {
                lb = lb.max(yg);
            } else {
                free += 1;
                free_sum += yg;
            }
        }
        let rho = if free > 0 { free_sum / free as f64 } else { (ub + lb) / 2.0 };
        let mut weights = vec![0.0; dim];
        for t in 0..n {
            for (w, v) in weights.iter_mut().zip(&xs[t]) {
                *w += alpha[t] * y[t] * v;
            }
        }
        Ok(Self { weights, bias: -rho })
    }
}

/// `P(abnormal | f) = 1 / (1 + exp(a f + b))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattLink {
    pub a: f64,
    pub b: f64,
}

fn log1p_exp_neg(v: f64) -> f64 {
    // ln(1 + exp(-v)), stable for either sign
    if v >= 0.0 {
        (-v).exp().ln_1p()
    } else {
        -v + v.exp().ln_1p()
    }
}

impl PlattLink {
    pub fn probability(&self, decision: f64) -> f64 {
        let f = decision * self.a + self.b;
        if f >= 0.0 {
            (-f).exp() / (1.0 + (-f).exp())
        } else {
            1.0 / (1.0 + f.exp())
        }
    }

    /// Newton fit with backtracking on smoothed targets.
    pub fn fit(decisions: &[f64], labels: &[u8]) -> Self {
        let prior1 = labels.iter().filter(|&&l| l == 1).count() as f64;
        let prior0 = labels.len() as f64 - prior1;
        let hi = (prior1 + 1.0) / (prior1 + 2.0);
        let lo = 1.0 / (prior0 + 2.0);
        let t: Vec<f64> = labels.iter().map(|&l| if l == 1 { hi } else { lo }).collect();
        let objective = |a: f64, b: f64| -> f64 {
            decisions
                .iter()
                .zip(&t)
                .map(|(&d, &ti)| {
                    let f = d * a + b;
                    if f >= 0.0 {
                        ti * f + log1p_exp_neg(f)
                    } else {
                        (ti - 1.0) * f + log1p_exp_neg(-f)
                    }
                })
                .sum()
        };
        let (mut a, mut b) = (0.0, ((prior0 + 1.0) / (prior1 + 1.0)).ln());
        let mut fval = objective(a, b);
        for _ in 0..100 {
            let (mut h11, mut h22, mut h21, mut g1, mut g2) = (1e-12, 1e-12, 0.0, 0.0, 0.0);
            for (&d, &ti) in decisions.iter().zip(&t) {
                let f = d * a + b;
                let (p, q) = if f >= 0.0 {
                    ((-f).exp() / (1.0 + (-f).exp()), 1.0 / (1.0 + (-f).exp()))
                } else {
                    (1.0 / (1.0 + f.exp()), f.exp() / (1.0 + f.exp()))
                };
                let d2 = p * q;
                h11 += d * d * d2;
                h22 += d2;
                h21 += d * d2;
                let d1 = ti - p;
                g1 += d * d1;
                g2 += d1;
            }
            if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
                break;
            }
            let det = h11 * h22 - h21 * h21;
            let da = -(h22 * g1 - h21 * g2) / det;
            let db = -(-h21 * g1 + h11 * g2) / det;
            let gd = g1 * da + g2 * db;
            let mut step = 1.0;
            while step >= 1e-10 {
                let (na, nb) = (a + step * da, b + step * db);
                let nf = objective(na, nb);
                if nf < fval + 1e-4 * step * gd {
                    (a, b, fval) = (na, nb, nf);
                    break;
                }
                step /= 2.0;
            }
            if step < 1e-10 {
                break;
            }
        }
        // Keep the link increasing in the decision value.
        if a >= 0.0 {
            a = -1.0;
            b = 0.0;
        }
        Self { a, b }
    }
}
