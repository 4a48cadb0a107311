//! Reconstruction loss and anomaly scoring over reconstructed feature sets.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{zip_features, MultiScaleFeatureSet, Provenance};
use crate::error::{Error, Result};
use crate::graph::{cosine_distance, COSINE_EPS};

/// `Σ_i (1 − cos(vec F_input⁽ⁱ⁾, vec F⁽ⁱ⁾*))` over all scales.
pub fn branch_loss(input: &MultiScaleFeatureSet, recon: &MultiScaleFeatureSet) -> Result<f64> {
    input.check_same_shape(recon)?;
    Ok(input
        .scales
        .iter()
        .zip(&recon.scales)
        .map(|(a, b)| {
            let a = a
                .mapv(|v| v as f64)
                .into_shape_with_order((1, a.len()))
                .unwrap();
            let b = b
                .mapv(|v| v as f64)
                .into_shape_with_order((1, b.len()))
                .unwrap();
            cosine_distance(a.view(), b.view())
        })
        .sum())
}

/// Prior-branch loss plus self-branch loss.
pub fn reconstruction_loss(
    input: &MultiScaleFeatureSet,
    recon_prior: &MultiScaleFeatureSet,
    recon_self: &MultiScaleFeatureSet,
) -> Result<f64> {
    Ok(branch_loss(input, recon_prior)? + branch_loss(input, recon_self)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionWeights {
    pub w_prior: f32,
    pub w_self: f32,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            w_prior: 0.5,
            w_self: 0.5,
        }
    }
}

impl FusionWeights {
    pub fn new(w_prior: f32, w_self: f32) -> Result<Self> {
        let w = Self { w_prior, w_self };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_prior < 0.0
            || self.w_self < 0.0
            || (self.w_prior + self.w_self - 1.0).abs() > 1e-6
        {
            return Err(Error::config(format!(
                "fusion weights must be non-negative and sum to 1, got ({}, {})",
                self.w_prior, self.w_self
            )));
        }
        Ok(())
    }
}

pub fn fuse_reconstructions(
    recon_prior: &MultiScaleFeatureSet,
    recon_self: &MultiScaleFeatureSet,
    w: FusionWeights,
) -> Result<MultiScaleFeatureSet> {
    zip_features(recon_prior, recon_self, Provenance::Fused, |p, s| {
        w.w_prior * p + w.w_self * s
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ImageReduction {
    Max,
    MeanTopK { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub smoothing_sigma: f32,
    pub reduction: ImageReduction,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            smoothing_sigma: 4.0,
            reduction: ImageReduction::Max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    /// `S × S` sum of upsampled per-scale distance maps.
    pub pixel_map: Array2<f32>,
    pub image_score: f32,
    pub per_scale_maps: Vec<Array2<f32>>,
}

/// Per-location `1 − cos` along the channel axis.
pub fn channel_cosine_distance(a: ArrayView3<f32>, b: ArrayView3<f32>) -> Array2<f32> {
    let (c, h, w) = a.dim();
    let eps = COSINE_EPS;
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for ci in 0..c {
                let (u, v) = (a[[ci, y, x]] as f64, b[[ci, y, x]] as f64);
                dot += u * v;
                na += u * u;
                nb += v * v;
            }
            out[[y, x]] = (1.0 - dot / ((na.sqrt() + eps) * (nb.sqrt() + eps))) as f32;
        }
    }
    out
}

/// Bilinear resize with half-pixel centers (edge-clamped).
pub fn bilinear_resize(map: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = map.dim();
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let coords = |o: usize, scale: f32, n: usize| {
        let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| coords(x, sx, w)).collect();
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    for oy in 0..out_h {
        let (y0, y1, fy) = coords(oy, sy, h);
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
            let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
            out[[oy, ox]] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (4.0 * sigma + 0.5) as usize;
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur with reflected borders; `sigma <= 0` is a no-op.
pub fn gaussian_blur(map: ArrayView2<f32>, sigma: f32) -> Array2<f32> {
    if sigma <= 0.0 {
        return map.to_owned();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = map.dim();
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * map[[y, reflect(x as isize + i as isize - r, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[[reflect(y as isize + i as isize - r, h), x]])
                .sum();
        }
    }
    out
}

/// Image-level score from a pixel map under the configured reduction.
pub fn reduce_image_score(pixel_map: ArrayView2<f32>, cfg: &ScoreConfig) -> f32 {
    let smoothed = gaussian_blur(pixel_map, cfg.smoothing_sigma);
    match cfg.reduction {
        ImageReduction::Max => smoothed.iter().copied().fold(f32::NEG_INFINITY, f32::max),
        ImageReduction::MeanTopK { k } => {
            let mut v: Vec<f32> = smoothed.iter().copied().collect();
            v.sort_by(|a, b| b.total_cmp(a));
            let k = k.clamp(1, v.len());
            v[..k].iter().sum::<f32>() / k as f32
        }
    }
}

/// Sum over scales of upsampled per-location cosine distances.
pub fn anomaly_score(
    input: &MultiScaleFeatureSet,
    fused: &MultiScaleFeatureSet,
    output_size: usize,
    cfg: &ScoreConfig,
) -> Result<AnomalyResult> {
    input.check_same_shape(fused)?;
    let per_scale_maps: Vec<Array2<f32>> = input
        .scales
        .iter()
        .zip(&fused.scales)
        .map(|(a, b)| channel_cosine_distance(a.view(), b.view()))
        .collect();
    let mut pixel_map = Array2::<f32>::zeros((output_size, output_size));
    for m in &per_scale_maps {
        pixel_map += &bilinear_resize(m.view(), output_size, output_size);
    }
    // rounding can leave tiny negatives for perfect reconstructions
    pixel_map.mapv_inplace(|v| v.max(0.0));
    let image_score = reduce_image_score(pixel_map.view(), cfg);
    Ok(AnomalyResult {
        pixel_map,
        image_score,
        per_scale_maps,
    })
}

/// Mean over the stack of maps along the first axis (used by reports).
pub fn mean_map(maps: &Array3<f32>) -> Array2<f32> {
    maps.mean_axis(Axis(0)).expect("non-empty stack")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    const SHAPES: [(usize, usize, usize); 3] = [(4, 16, 16), (8, 8, 8), (16, 4, 4)];

    fn random_set(seed: u64) -> MultiScaleFeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultiScaleFeatureSet::new(
            SHAPES
                .iter()
                .map(|&d| Array3::from_shape_simple_fn(d, || StandardNormal.sample(&mut rng)))
                .collect(),
            Provenance::Input,
        )
    }

    fn map_set(
        f: &MultiScaleFeatureSet,
        g: impl Fn(&Array3<f32>) -> Array3<f32>,
    ) -> MultiScaleFeatureSet {
        MultiScaleFeatureSet::new(
            f.scales.iter().map(g).collect(),
            Provenance::ReconstructionSelf,
        )
    }

    #[test]
    fn loss_identities() {
        let f = random_set(1);
        assert!(reconstruction_loss(&f, &f, &f).unwrap().abs() < 1e-6);
        let neg = map_set(&f, |s| -s);
        assert!((reconstruction_loss(&f, &neg, &neg).unwrap() - 12.0).abs() < 1e-6);
        // orthogonal: swap halves with a sign flip, giving zero inner product
        let ortho = map_set(&f, |s| {
            let flat: Vec<f32> = s.iter().copied().collect();
            let n = flat.len() / 2;
            let mut out = vec![0.0; flat.len()];
            for i in 0..n {
                out[i] = -flat[n + i];
                out[n + i] = flat[i];
            }
            Array3::from_shape_vec(s.dim(), out).unwrap()
        });
        assert!((reconstruction_loss(&f, &ortho, &ortho).unwrap() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn loss_is_scale_invariant() {
        let f = random_set(2);
        let r = random_set(3);
        let scaled = map_set(&r, |s| s * 7.5);
        let a = branch_loss(&f, &r).unwrap();
        let b = branch_loss(&f, &scaled).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn zero_tensor_loss_is_finite() {
        let f = random_set(4);
        let z = map_set(&f, |s| Array3::zeros(s.dim()));
        assert!(branch_loss(&f, &z).unwrap().is_finite());
    }

    #[test]
    fn fusion_weights() {
        let a = random_set(5);
        let b = random_set(6);
        let w = FusionWeights::new(1.0, 0.0).unwrap();
        assert_eq!(fuse_reconstructions(&a, &b, w).unwrap().scales, a.scales);
        let half = FusionWeights::default();
        assert_eq!(fuse_reconstructions(&a, &a, half).unwrap().scales, a.scales);
        let w = FusionWeights::new(0.3, 0.7).unwrap();
        let fused = fuse_reconstructions(&a, &b, w).unwrap();
        for i in 0..3 {
            for ((x, y), z) in a.scales[i]
                .iter()
                .zip(b.scales[i].iter())
                .zip(fused.scales[i].iter())
            {
                assert_eq!(*z, 0.3 * x + 0.7 * y);
            }
        }
        assert!(FusionWeights::new(0.6, 0.6).is_err());
        assert!(FusionWeights::new(-0.5, 1.5).is_err());
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let f = random_set(7);
        let r = anomaly_score(&f, &f, 64, &ScoreConfig::default()).unwrap();
        assert!(r.pixel_map.iter().all(|&v| v.abs() < 1e-5));
        assert!(r.image_score.abs() < 1e-5);
    }

    #[test]
    fn map_bounded_by_twice_scale_count() {
        let r = anomaly_score(&random_set(8), &random_set(9), 32, &ScoreConfig::default()).unwrap();
        assert!(r.pixel_map.iter().all(|&v| (0.0..=6.0).contains(&v)));
    }

    #[test]
    fn negated_location_peaks_the_map() {
        let f = random_set(10);
        let mut g = f.clone();
        for c in 0..16 {
            g.scales[2][[c, 1, 2]] *= -1.0;
        }
        let r = anomaly_score(&f, &g, 64, &ScoreConfig::default()).unwrap();
        let (mut best, mut at) = (f32::MIN, (0, 0));
        for ((y, x), &v) in r.pixel_map.indexed_iter() {
            if v > best {
                best = v;
                at = (y, x);
            }
        }
        // location (1, 2) of a 4×4 map covers rows 16..32, columns 32..48
        assert!(
            (16..32).contains(&at.0) && (32..48).contains(&at.1),
            "{at:?}"
        );
        assert!(best > 1.5);
    }

    #[test]
    fn positive_rescaling_per_location_leaves_map_unchanged() {
        let f = random_set(11);
        let r = random_set(12);
        let mut scaled = r.clone();
        for s in scaled.scales.iter_mut() {
            let (_, h, w) = s.dim();
            for y in 0..h {
                for x in 0..w {
                    let k = 0.5 + (y * w + x) as f32 * 0.37;
                    s.slice_mut(ndarray::s![.., y, x]).mapv_inplace(|v| v * k);
                }
            }
        }
        let a = anomaly_score(&f, &r, 32, &ScoreConfig::default()).unwrap();
        let b = anomaly_score(&f, &scaled, 32, &ScoreConfig::default()).unwrap();
        for (x, y) in a.pixel_map.iter().zip(b.pixel_map.iter()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn bilinear_preserves_constants_and_blur_preserves_mass() {
        let m = Array2::from_elem((4, 4), 2.5f32);
        assert!(bilinear_resize(m.view(), 16, 16)
            .iter()
            .all(|&v| (v - 2.5).abs() < 1e-6));
        let mut spike = Array2::<f32>::zeros((64, 64));
        spike[[32, 32]] = 1.0;
        let b = gaussian_blur(spike.view(), 4.0);
        assert!((b.sum() - 1.0).abs() < 1e-4);
        assert!(b[[32, 32]] < 0.02);
    }

    #[test]
    fn mean_top_k_reduction() {
        let mut m = Array2::<f32>::zeros((8, 8));
        m[[0, 0]] = 4.0;
        m[[0, 1]] = 2.0;
        let cfg = ScoreConfig {
            smoothing_sigma: 0.0,
            reduction: ImageReduction::MeanTopK { k: 2 },
        };
        assert_eq!(reduce_image_score(m.view(), &cfg), 3.0);
    }
}
