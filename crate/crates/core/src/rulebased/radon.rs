//! Radon-projection signatures and Bhattacharyya retrieval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Distance reported when two distributions share no support.
pub const DISJOINT_DISTANCE: f64 = 1e9;
const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// 0 to 90 degrees inclusive, one degree apart.
pub fn default_angles() -> Vec<f64> {
    (0..=90).map(f64::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadonSignature {
    pub image_id: String,
    pub angles: Vec<f64>,
    /// One distribution per angle, each summing to 1.
    pub projections: Vec<Vec<f64>>,
}

fn cos_sin(degrees: f64) -> (f64, f64) {
    // Exact at the axis-aligned angles so those projections equal plain
    // row and column sums.
    if degrees == 0.0 {
        (1.0, 0.0)
    } else if degrees == 90.0 {
        (0.0, 1.0)
    } else {
        let r = degrees.to_radians();
        (r.cos(), r.sin())
    }
}

/// Pixel-driven projection: each pixel's intensity goes to the unit-width
/// bin containing `x cos t + y sin t`, measured from the image center.
pub fn radon_signature(image_id: &str, image: &Raster, angles: &[f64]) -> Result<RadonSignature> {
    if angles.is_empty() {
        return Err(Error::validation("radon transform needs at least one angle"));
    }
    if let Some(a) = angles.iter().find(|a| !(0.0..=90.0).contains(*a)) {
        return Err(Error::validation(format!("angle {a} outside [0, 90]")));
    }
    if image.is_empty() {
        return Err(Error::validation("radon transform of an empty image"));
    }
    let (w, h) = (image.width(), image.height());
    let bins = ((w * w + h * h) as f64).sqrt().ceil() as usize + 2;
    let half = bins as f64 / 2.0;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let gray: Vec<f64> = (0..w * h).map(|i| image.luma(i % w, i / w) as f64).collect();
    let total: f64 = gray.iter().sum();
    if total <= 0.0 {
        return Err(Error::validation(format!("image `{image_id}` has no intensity to project")));
    }

    let projections = angles
        .iter()
        .map(|&a| {
            let (c, s) = cos_sin(a);
            let mut p = vec![0.0; bins];
            for y in 0..h {
                let yc = y as f64 + 0.5 - cy;
                for x in 0..w {
                    let t = (x as f64 + 0.5 - cx) * c + yc * s;
                    p[(t + half).floor() as usize] += gray[y * w + x];
                }
            }
            let sum: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= sum);
            p
        })
        .collect();
    Ok(RadonSignature {
        image_id: image_id.to_string(),
        angles: angles.to_vec(),
        projections,
    })
}

/// `-ln sum sqrt(a_i b_i)`.
pub fn bhattacharyya_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "distributions differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    for d in [a, b] {
        let sum: f64 = d.iter().sum();
        if d.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::validation(format!("input is not a distribution (sum {sum})")));
        }
    }
    if a == b {
        return Ok(0.0);
    }
    let bc: f64 = a.iter().zip(b).map(|(x, y)| (x * y).sqrt()).sum();
    if bc <= 0.0 {
        return Ok(DISJOINT_DISTANCE);
    }
    Ok((-bc.ln()).max(0.0))
}

/// Mean per-angle Bhattacharyya distance.
pub fn signature_distance(a: &RadonSignature, b: &RadonSignature) -> Result<f64> {
    if a.angles != b.angles {
        return Err(Error::validation(format!(
            "signatures of `{}` and `{}` use different angle grids",
            a.image_id, b.image_id
        )));
    }
    let mut sum = 0.0;
    for (p, q) in a.projections.iter().zip(&b.projections) {
        sum += bhattacharyya_distance(p, q)?;
    }
    Ok(sum / a.angles.len() as f64)
}

/// The `k` nearest atlases, ascending by distance, ties broken by id.
pub fn rank_similar_atlases(
    query: &RadonSignature,
    atlases: &[RadonSignature],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if k > atlases.len() {
        return Err(Error::Capacity(format!("asked for {k} atlases, pool has {}", atlases.len())));
    }
    let mut scored = atlases
        .iter()
        .map(|a| Ok((a.image_id.clone(), signature_distance(query, a)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn spike_free(p: &[f64]) -> Vec<f64> {
        p.iter().copied().filter(|&v| v > 0.0).collect()
    }

    #[test]
    fn constant_image_is_uniform_over_columns() {
        let img = Raster::filled(10, 6, 1, 0.5);
        let sig = radon_signature("c", &img, &[0.0]).unwrap();
        let nonzero = spike_free(&sig.projections[0]);
        assert_eq!(nonzero.len(), 10);
        assert!(nonzero.iter().all(|&v| (v - 0.1).abs() < 1e-12));
    }

    #[test]
    fn single_pixel_gives_single_spikes() {
        let img = Raster::from_fn(9, 9, |x, y| if (x, y) == (2, 6) { 1.0 } else { 0.0 });
        let sig = radon_signature("p", &img, &default_angles()).unwrap();
        for p in &sig.projections {
            assert_eq!(spike_free(p), vec![1.0]);
        }
    }

    #[test]
    fn axis_projections_equal_row_and_column_sums() {
        let img = Raster::from_fn(8, 8, |x, y| ((x * 7 + y * 3) % 8) as f32 / 8.0);
        let sig = radon_signature("f", &img, &[0.0, 90.0]).unwrap();
        let total: f64 = img.data().iter().map(|&v| v as f64).sum();
        let cols: Vec<f64> = (0..8).map(|x| (0..8).map(|y| img.get(x, y, 0) as f64).sum::<f64>() / total).collect();
        let rows: Vec<f64> = (0..8).map(|y| (0..8).map(|x| img.get(x, y, 0) as f64).sum::<f64>() / total).collect();
        let off = (sig.projections[0].len() - 8) / 2;
        for i in 0..8 {
            assert!((sig.projections[0][off + i] - cols[i]).abs() < 1e-12);
            assert!((sig.projections[1][off + i] - rows[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn angle_validation() {
        let img = Raster::filled(4, 4, 1, 1.0);
        assert!(radon_signature("x", &img, &[]).is_err());
        assert!(radon_signature("x", &img, &[91.0]).is_err());
        assert!(radon_signature("x", &Raster::filled(4, 4, 1, 0.0), &[0.0]).is_err());
    }

    #[test]
    fn bhattacharyya_cases() {
        assert_eq!(bhattacharyya_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(bhattacharyya_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), DISJOINT_DISTANCE);
        let d = bhattacharyya_distance(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        let hand = -((0.45f64).sqrt() + (0.05f64).sqrt()).ln();
        assert!((d - hand).abs() < 1e-12);
        assert!((d - 0.1116).abs() < 1e-4);
        assert!(bhattacharyya_distance(&[0.5, 0.5], &[1.0]).is_err());
        assert!(bhattacharyya_distance(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    fn sig(id: &str, p: Vec<f64>) -> RadonSignature {
        RadonSignature { image_id: id.into(), angles: vec![0.0], projections: vec![p] }
    }

    #[test]
    fn ranking() {
        let q = sig("q", vec![0.5, 0.5]);
        let near = sig("near", vec![0.6, 0.4]);
        let far = sig("far", vec![0.95, 0.05]);
        let ranked = rank_similar_atlases(&q, &[far.clone(), near.clone()], 1).unwrap();
        assert_eq!(ranked[0].0, "near");
        let with_self = rank_similar_atlases(&q, &[far.clone(), q.clone(), near.clone()], 3).unwrap();
        assert_eq!(with_self[0], ("q".to_string(), 0.0));
        assert!(matches!(rank_similar_atlases(&q, &[near], 2), Err(Error::Capacity(_))));
        let twin = sig("a-twin", vec![0.6, 0.4]);
        let ranked = rank_similar_atlases(&q, &[sig("b", vec![0.6, 0.4]), twin], 2).unwrap();
        assert_eq!(ranked[0].0, "a-twin");
    }

    fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, len).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn projections_are_normalized(seed in 0u32..1000, angle in 0.0f64..=90.0) {
            let img = Raster::from_fn(13, 9, |x, y| ((x as u32 * 31 + y as u32 * 17 + seed) % 97) as f32 / 97.0 + 0.01);
            let s = radon_signature("r", &img, &[angle]).unwrap();
            prop_assert!((s.projections[0].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.projections[0].iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn bhattacharyya_symmetric_and_positive(a in distribution(16), b in distribution(16)) {
            let ab = bhattacharyya_distance(&a, &b).unwrap();
            let ba = bhattacharyya_distance(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
            prop_assert_eq!(bhattacharyya_distance(&a, &a).unwrap(), 0.0);
        }
    }
}
