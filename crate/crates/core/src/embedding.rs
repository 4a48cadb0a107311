//! Hierarchical patch embedding: multi-scale feature maps to a fixed-length
//! token sequence and back.
//!
//! Scale `i` is cut into non-overlapping `p_i × p_i` patches, with the patch
//! sizes chosen so that every scale yields the same `G × G` grid. Each
//! flattened patch (`p_i² · C_i` values, ordered channel, row, column) is
//! projected to `d_i` dims and the projections of spatially aligned patches
//! are concatenated along the channel axis into one token of width `C = Σ d_i`.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{MultiScaleFeatureSet, Provenance};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamSet, Real, Var};
use crate::nn::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConcatAxis {
    /// Aligned positions, per-scale projections side by side (`L = G²`).
    #[default]
    Channel,
    /// Each scale projected to the full width and stacked (`L = H · G²`).
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpeConfig {
    pub patch_sizes: Vec<usize>,
    pub hidden_dim: usize,
    /// Empty means an as-equal-as-possible split of `hidden_dim`.
    #[serde(default)]
    pub per_scale_dims: Vec<usize>,
    pub noise_std: f64,
    #[serde(default)]
    pub concat_axis: ConcatAxis,
}

impl Default for HpeConfig {
    fn default() -> Self {
        Self {
            patch_sizes: vec![4, 2, 1],
            hidden_dim: 760,
            per_scale_dims: Vec::new(),
            noise_std: 0.1,
            concat_axis: ConcatAxis::Channel,
        }
    }
}

/// Splits `total` into `parts` integers differing by at most one, larger first.
pub fn split_dims(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| total / parts + usize::from(i < total % parts))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleLayout {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    /// Column offset (channel axis) or row offset (sequence axis) in the token matrix.
    pub offset: usize,
}

impl ScaleLayout {
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HpeLayout {
    pub grid: usize,
    pub hidden_dim: usize,
    pub axis: ConcatAxis,
    pub scales: Vec<ScaleLayout>,
}

impl HpeLayout {
    pub fn resolve(cfg: &HpeConfig, shapes: &[(usize, usize, usize)]) -> Result<Self> {
        let h = shapes.len();
        if cfg.patch_sizes.len() != h {
            return Err(Error::config(format!(
                "{} patch sizes for {h} scales",
                cfg.patch_sizes.len()
            )));
        }
        let dims = match cfg.concat_axis {
            ConcatAxis::Sequence => vec![cfg.hidden_dim; h],
            ConcatAxis::Channel if cfg.per_scale_dims.is_empty() => split_dims(cfg.hidden_dim, h),
            ConcatAxis::Channel => cfg.per_scale_dims.clone(),
        };
        if dims.len() != h || dims.contains(&0) {
            return Err(Error::config(
                "per_scale_dims must give one positive width per scale",
            ));
        }
        if cfg.concat_axis == ConcatAxis::Channel && dims.iter().sum::<usize>() != cfg.hidden_dim {
            return Err(Error::config(format!(
                "per_scale_dims {dims:?} do not sum to hidden_dim {}",
                cfg.hidden_dim
            )));
        }
        let mut grid = None;
        let mut scales = Vec::with_capacity(h);
        let mut offset = 0;
        for (i, (&(c, hh, ww), &p)) in shapes.iter().zip(&cfg.patch_sizes).enumerate() {
            if p == 0 || hh % p != 0 || ww % p != 0 || hh != ww {
                return Err(Error::config(format!(
                    "scale {i} ({hh}×{ww}) is not divisible into {p}×{p} patches"
                )));
            }
            let g = hh / p;
            if *grid.get_or_insert(g) != g {
                return Err(Error::config(format!(
                    "scale {i} gives a {g}×{g} token grid, earlier scales give {}×{}",
                    grid.unwrap(),
                    grid.unwrap()
                )));
            }
            scales.push(ScaleLayout {
                channels: c,
                height: hh,
                width: ww,
                patch: p,
                dim: dims[i],
                offset,
            });
            offset += match cfg.concat_axis {
                ConcatAxis::Channel => dims[i],
                ConcatAxis::Sequence => g * g,
            };
        }
        let grid = grid.ok_or_else(|| Error::config("no scales"))?;
        Ok(Self {
            grid,
            hidden_dim: cfg.hidden_dim,
            axis: cfg.concat_axis,
            scales,
        })
    }

    /// Sequence length `L`.
    pub fn tokens(&self) -> usize {
        match self.axis {
            ConcatAxis::Channel => self.grid * self.grid,
            ConcatAxis::Sequence => self.grid * self.grid * self.scales.len(),
        }
    }
}

/// `C × H × W` map to a `G² × (p² · C)` patch matrix, rows in raster order.
pub fn patchify(map: ArrayView3<f32>, patch: usize) -> Array2<f32> {
    let (c, h, w) = map.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::<f32>::zeros((gh * gw, c * patch * patch));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let row = row.as_slice_mut().unwrap();
            let mut k = 0;
            for ci in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        row[k] = map[[ci, gy * patch + py, gx * patch + px]];
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn fold(
    patches: ArrayView2<f32>,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Array3<f32> {
    let gw = width / patch;
    let mut out = Array3::<f32>::zeros((channels, height, width));
    for (r, row) in patches.rows().into_iter().enumerate() {
        let (gy, gx) = (r / gw, r % gw);
        let mut k = 0;
        for ci in 0..channels {
            for py in 0..patch {
                for px in 0..patch {
                    out[[ci, gy * patch + py, gx * patch + px]] = row[k];
                    k += 1;
                }
            }
        }
    }
    out
}

/// Learnable projections and positional table of the embedding.
#[derive(Debug, Clone)]
pub struct Hpe {
    pub layout: HpeLayout,
    pub in_proj: Vec<Linear>,
    pub out_proj: Vec<Linear>,
    pub position: ParamId,
    pub noise_std: f64,
}

impl Hpe {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        cfg: &HpeConfig,
        shapes: &[(usize, usize, usize)],
        rng: &mut R,
    ) -> Result<Self> {
        let layout = HpeLayout::resolve(cfg, shapes)?;
        let mut in_proj = Vec::new();
        let mut out_proj = Vec::new();
        for (i, s) in layout.scales.iter().enumerate() {
            in_proj.push(Linear::new(
                params,
                &format!("hpe.scale{i}.in"),
                s.patch_len(),
                s.dim,
                rng,
            ));
        }
        for (i, s) in layout.scales.iter().enumerate() {
            out_proj.push(Linear::new(
                params,
                &format!("hpe.scale{i}.out"),
                s.dim,
                s.patch_len(),
                rng,
            ));
        }
        let position = params.add(
            "hpe.position",
            Array2::zeros((layout.tokens(), layout.hidden_dim)),
        );
        Ok(Self {
            layout,
            in_proj,
            out_proj,
            position,
            noise_std: cfg.noise_std,
        })
    }

    /// Patch matrices of each scale, converted to the graph scalar type.
    pub fn patch_inputs<T: Real>(&self, features: &MultiScaleFeatureSet) -> Result<Vec<Array2<T>>> {
        if features.num_scales() != self.layout.scales.len() {
            return Err(Error::shape(format!(
                "embedding expects {} scales, got {}",
                self.layout.scales.len(),
                features.num_scales()
            )));
        }
        features
            .scales
            .iter()
            .zip(&self.layout.scales)
            .map(|(map, s)| {
                if map.dim() != (s.channels, s.height, s.width) {
                    return Err(Error::shape(format!(
                        "feature map {:?} does not match embedding layout {:?}",
                        map.dim(),
                        (s.channels, s.height, s.width)
                    )));
                }
                Ok(patchify(map.view(), s.patch).mapv(|v| T::lit(v as f64)))
            })
            .collect()
    }

    /// Forward embedding on the graph; `noise` is drawn only when given and
    /// `noise_std > 0`.
    pub fn forward<T: Real, R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        patches: &[Array2<T>],
        noise: Option<&mut R>,
    ) -> Var {
        let mut parts = Vec::with_capacity(patches.len());
        for (p, proj) in patches.iter().zip(&self.in_proj) {
            let x = g.constant(p.clone());
            parts.push(proj.forward(g, x));
        }
        let tokens = match self.layout.axis {
            ConcatAxis::Channel if parts.len() == 1 => parts[0],
            ConcatAxis::Channel => g.concat_cols(&parts),
            ConcatAxis::Sequence if parts.len() == 1 => parts[0],
            ConcatAxis::Sequence => g.concat_rows(&parts),
        };
        let pos = g.param(self.position);
        let mut tokens = g.add(tokens, pos);
        if let Some(rng) = noise {
            if self.noise_std > 0.0 {
                let normal = Normal::new(0.0, self.noise_std).expect("finite noise std");
                let (r, c) = g.shape(tokens);
                let n = Array2::from_shape_simple_fn((r, c), || T::lit(normal.sample(rng)));
                let n = g.constant(n);
                tokens = g.add(tokens, n);
            }
        }
        tokens
    }

    /// Inverse embedding on the graph: one patch matrix per scale.
    pub fn inverse<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Vec<Var> {
        let l = self.layout.grid * self.layout.grid;
        self.layout
            .scales
            .iter()
            .zip(&self.out_proj)
            .map(|(s, proj)| {
                let slice = match self.layout.axis {
                    ConcatAxis::Channel if self.layout.scales.len() == 1 => tokens,
                    ConcatAxis::Channel => g.slice_cols(tokens, s.offset, s.dim),
                    ConcatAxis::Sequence => g.slice_rows(tokens, s.offset, l),
                };
                proj.forward(g, slice)
            })
            .collect()
    }

    /// Folds per-scale patch matrices back into feature maps.
    pub fn fold_outputs<T: Real>(
        &self,
        outputs: &[ArrayView2<T>],
        provenance: Provenance,
    ) -> MultiScaleFeatureSet {
        let scales = outputs
            .iter()
            .zip(&self.layout.scales)
            .map(|(o, s)| {
                let o32 = o.mapv(|v| v.to_f32().unwrap());
                fold(o32.view(), s.channels, s.height, s.width, s.patch)
            })
            .collect();
        MultiScaleFeatureSet::new(scales, provenance)
    }

    /// `hpe_forward` outside of training: returns the `L × C` token matrix.
    pub fn embed<T: Real, R: Rng>(
        &self,
        params: &ParamSet<T>,
        features: &MultiScaleFeatureSet,
        noise: Option<&mut R>,
    ) -> Result<Array2<T>> {
        let patches = self.patch_inputs::<T>(features)?;
        let mut g = Graph::new(params);
        let v = self.forward(&mut g, &patches, noise);
        Ok(g.value(v).clone())
    }

    /// `hpe_inverse`: maps an `L × C` token matrix back to feature maps.
    pub fn reconstruct<T: Real>(
        &self,
        params: &ParamSet<T>,
        tokens: &Array2<T>,
        provenance: Provenance,
    ) -> Result<MultiScaleFeatureSet> {
        let expected = (self.layout.tokens(), self.layout.hidden_dim);
        if tokens.dim() != expected {
            return Err(Error::shape(format!(
                "tokens {:?}, expected {expected:?}",
                tokens.dim()
            )));
        }
        let mut g = Graph::new(params);
        let t = g.constant(tokens.clone());
        let outs = self.inverse(&mut g, t);
        let views: Vec<_> = outs.iter().map(|&v| g.value(v).view()).collect();
        Ok(self.fold_outputs(&views, provenance))
    }

    /// Columns of scale `i` inside a token (channel axis only).
    pub fn scale_columns(&self, i: usize) -> std::ops::Range<usize> {
        let s = &self.layout.scales[i];
        s.offset..s.offset + s.dim
    }
}

/// Sets every projection to the identity and clears the positional table.
/// Only valid when each scale's patch length equals its token width.
pub fn set_identity_projections<T: Real>(hpe: &Hpe, params: &mut ParamSet<T>) {
    for (lin, s) in hpe
        .in_proj
        .iter()
        .chain(&hpe.out_proj)
        .zip(hpe.layout.scales.iter().cycle())
    {
        assert_eq!(s.patch_len(), s.dim, "identity needs square projections");
        *params.get_mut(lin.weight) = Array2::eye(s.dim);
        params.get_mut(lin.bias).fill(T::zero());
    }
    params.get_mut(hpe.position).fill(T::zero());
}

/// Raw slice helper used by diagnostics: the `G² × d_i` block of scale `i`.
pub fn token_block<T: Real>(hpe: &Hpe, tokens: &Array2<T>, i: usize) -> Array2<T> {
    let cols = hpe.scale_columns(i);
    tokens.slice(s![.., cols]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_set(rng: &mut ChaCha8Rng, shapes: &[(usize, usize, usize)]) -> MultiScaleFeatureSet {
        MultiScaleFeatureSet::new(
            shapes
                .iter()
                .map(|&d| Array3::from_shape_simple_fn(d, || StandardNormal.sample(rng)))
                .collect(),
            Provenance::Input,
        )
    }

    #[test]
    fn tiny_backbone_shapes_give_sixteen_by_sixteen_grid() {
        let cfg = HpeConfig {
            hidden_dim: 96,
            ..HpeConfig::default()
        };
        let layout = HpeLayout::resolve(&cfg, &[(16, 64, 64), (32, 32, 32), (64, 16, 16)]).unwrap();
        assert_eq!(layout.grid, 16);
        assert_eq!(layout.tokens(), 256);
        assert_eq!(
            layout.scales.iter().map(|s| s.dim).collect::<Vec<_>>(),
            vec![32, 32, 32]
        );
    }

    #[test]
    fn equal_split_of_760() {
        assert_eq!(split_dims(760, 3), vec![254, 253, 253]);
        assert_eq!(split_dims(96, 3), vec![32, 32, 32]);
    }

    #[test]
    fn indivisible_scale_is_a_config_error() {
        let cfg = HpeConfig {
            patch_sizes: vec![3, 2, 1],
            ..HpeConfig::default()
        };
        assert!(matches!(
            HpeLayout::resolve(&cfg, &[(16, 64, 64), (32, 32, 32), (64, 16, 16)]),
            Err(Error::Config(_))
        ));
        let cfg = HpeConfig {
            patch_sizes: vec![2, 2, 1],
            ..HpeConfig::default()
        };
        assert!(HpeLayout::resolve(&cfg, &[(16, 64, 64), (32, 32, 32), (64, 16, 16)]).is_err());
    }

    #[test]
    fn fold_inverts_patchify() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = random_set(&mut rng, &[(3, 8, 8)]);
        let p = patchify(f.scales[0].view(), 4);
        assert_eq!(p.dim(), (4, 48));
        assert_eq!(fold(p.view(), 3, 8, 8, 4), f.scales[0]);
    }

    #[test]
    fn identity_configuration_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shapes = [(6, 5, 5)];
        let cfg = HpeConfig {
            patch_sizes: vec![1],
            hidden_dim: 6,
            per_scale_dims: vec![],
            noise_std: 0.0,
            concat_axis: ConcatAxis::Channel,
        };
        let mut params = ParamSet::<f64>::new();
        let hpe = Hpe::new(&mut params, &cfg, &shapes, &mut rng).unwrap();
        set_identity_projections(&hpe, &mut params);
        let f = random_set(&mut rng, &shapes);
        let tokens = hpe.embed::<f64, ChaCha8Rng>(&params, &f, None).unwrap();
        // tokens equal the flattened map: row = position, columns = channels
        for y in 0..5 {
            for x in 0..5 {
                for c in 0..6 {
                    assert_eq!(tokens[[y * 5 + x, c]], f.scales[0][[c, y, x]] as f64);
                }
            }
        }
        let back = hpe
            .reconstruct(&params, &tokens, Provenance::ReconstructionSelf)
            .unwrap();
        for (a, b) in back.scales[0].iter().zip(f.scales[0].iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shapes = [(4, 8, 8), (8, 4, 4)];
        let cfg = HpeConfig {
            patch_sizes: vec![2, 1],
            hidden_dim: 8,
            ..HpeConfig::default()
        };
        let mut params = ParamSet::<f32>::new();
        let hpe = Hpe::new(&mut params, &cfg, &shapes, &mut rng).unwrap();
        let f = random_set(&mut rng, &shapes);
        let eval = hpe.embed::<f32, ChaCha8Rng>(&params, &f, None).unwrap();
        let train = hpe
            .embed(&params, &f, Some(&mut ChaCha8Rng::seed_from_u64(5)))
            .unwrap();
        assert_ne!(eval, train);
        let mut quiet = hpe.clone();
        quiet.noise_std = 0.0;
        let train = quiet
            .embed(&params, &f, Some(&mut ChaCha8Rng::seed_from_u64(5)))
            .unwrap();
        assert_eq!(eval, train);
    }

    #[test]
    fn shapes_roundtrip_for_both_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shapes = [(4, 16, 16), (8, 8, 8), (16, 4, 4)];
        for axis in [ConcatAxis::Channel, ConcatAxis::Sequence] {
            let cfg = HpeConfig {
                patch_sizes: vec![4, 2, 1],
                hidden_dim: 12,
                concat_axis: axis,
                ..HpeConfig::default()
            };
            let mut params = ParamSet::<f32>::new();
            let hpe = Hpe::new(&mut params, &cfg, &shapes, &mut rng).unwrap();
            let f = random_set(&mut rng, &shapes);
            let t = hpe.embed::<f32, ChaCha8Rng>(&params, &f, None).unwrap();
            assert_eq!(t.dim(), (hpe.layout.tokens(), 12));
            let back = hpe
                .reconstruct(&params, &t, Provenance::ReconstructionPrior)
                .unwrap();
            assert_eq!(back.shapes(), f.shapes());
        }
    }

    #[test]
    fn projections_match_per_patch_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shapes = [(3, 8, 8), (5, 4, 4)];
        let cfg = HpeConfig {
            patch_sizes: vec![2, 1],
            hidden_dim: 7,
            noise_std: 0.0,
            ..HpeConfig::default()
        };
        let mut params = ParamSet::<f64>::new();
        let hpe = Hpe::new(&mut params, &cfg, &shapes, &mut rng).unwrap();
        for v in params.values_mut() {
            v.mapv_inplace(|_| StandardNormal.sample(&mut rng));
        }
        let f = random_set(&mut rng, &shapes);
        let tokens = hpe.embed::<f64, ChaCha8Rng>(&params, &f, None).unwrap();
        let back = hpe
            .reconstruct(&params, &tokens, Provenance::ReconstructionSelf)
            .unwrap();

        // oracle: explicit loops over grid cells, patch elements and weights
        let pos = params.get(hpe.position);
        let mut expected_tokens = Array2::<f64>::zeros((16, 7));
        for (i, s) in hpe.layout.scales.iter().enumerate() {
            let w = params.get(hpe.in_proj[i].weight);
            let b = params.get(hpe.in_proj[i].bias);
            for gy in 0..4 {
                for gx in 0..4 {
                    for d in 0..s.dim {
                        let mut acc = b[[0, d]];
                        let mut k = 0;
                        for c in 0..s.channels {
                            for py in 0..s.patch {
                                for px in 0..s.patch {
                                    acc += f.scales[i][[c, gy * s.patch + py, gx * s.patch + px]]
                                        as f64
                                        * w[[k, d]];
                                    k += 1;
                                }
                            }
                        }
                        expected_tokens[[gy * 4 + gx, s.offset + d]] =
                            acc + pos[[gy * 4 + gx, s.offset + d]];
                    }
                }
            }
        }
        for (a, b) in tokens.iter().zip(expected_tokens.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        for (i, s) in hpe.layout.scales.iter().enumerate() {
            let w = params.get(hpe.out_proj[i].weight);
            let b = params.get(hpe.out_proj[i].bias);
            for gy in 0..4 {
                for gx in 0..4 {
                    let mut k = 0;
                    for c in 0..s.channels {
                        for py in 0..s.patch {
                            for px in 0..s.patch {
                                let mut acc = b[[0, k]];
                                for d in 0..s.dim {
                                    acc += tokens[[gy * 4 + gx, s.offset + d]] * w[[d, k]];
                                }
                                let got = back.scales[i][[c, gy * s.patch + py, gx * s.patch + px]]
                                    as f64;
                                assert!((got - acc).abs() < 1e-5 * acc.abs().max(1.0));
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}
