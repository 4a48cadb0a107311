//! The complete reconstruction model: embedding, trunk and inverse embedding
//! over a shared parameter set.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{MultiScaleFeatureSet, Provenance};
use crate::embedding::{Hpe, HpeConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamSet, Real, Var};
use crate::objective::{
    anomaly_score, fuse_reconstructions, AnomalyResult, FusionWeights, ScoreConfig,
};
use crate::transformer::{pnpt_forward, Ablation, AttentionConfig, Trunk};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub hpe: HpeConfig,
    pub attention: AttentionConfig,
    pub ablation: Ablation,
}

impl ModelConfig {
    /// Indices of the backbone scales the model consumes.
    pub fn active_scales(&self, num_scales: usize) -> Vec<usize> {
        if self.ablation.disable_hpe_multiscale {
            vec![num_scales - 1]
        } else {
            (0..num_scales).collect()
        }
    }

    fn effective_hpe(&self) -> HpeConfig {
        let mut hpe = self.hpe.clone();
        hpe.hidden_dim = self.attention.hidden_dim;
        if self.ablation.disable_hpe_multiscale {
            hpe.patch_sizes = vec![1];
            hpe.per_scale_dims = Vec::new();
        }
        hpe
    }
}

/// Patch matrices for one sample, ready to be placed on a graph.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub input: Vec<Array2<T>>,
    pub prior: Option<Vec<Array2<T>>>,
}

/// Per-scale output patch matrices on the graph.
#[derive(Debug, Clone)]
pub struct GraphOutputs {
    pub prior: Option<Vec<Var>>,
    pub own: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Active scales of the input features.
    pub input: MultiScaleFeatureSet,
    /// `None` for single-stream variants.
    pub prior: Option<MultiScaleFeatureSet>,
    pub own: MultiScaleFeatureSet,
}

impl Reconstruction {
    pub fn fused(&self, w: FusionWeights) -> Result<MultiScaleFeatureSet> {
        match &self.prior {
            Some(p) => fuse_reconstructions(p, &self.own, w),
            None => Ok(self.own.clone().with_provenance(Provenance::Fused)),
        }
    }

    pub fn score(
        &self,
        w: FusionWeights,
        output_size: usize,
        cfg: &ScoreConfig,
    ) -> Result<AnomalyResult> {
        anomaly_score(&self.input, &self.fused(w)?, output_size, cfg)
    }
}

#[derive(Debug, Clone)]
pub struct PnptModel<T> {
    pub config: ModelConfig,
    /// Full backbone output shapes, including inactive scales.
    pub feature_shapes: Vec<(usize, usize, usize)>,
    pub params: ParamSet<T>,
    pub hpe: Hpe,
    pub trunk: Trunk,
}

impl<T: Real> PnptModel<T> {
    pub fn new(
        config: ModelConfig,
        feature_shapes: &[(usize, usize, usize)],
        seed: u64,
    ) -> Result<Self> {
        if feature_shapes.is_empty() {
            return Err(Error::config("backbone produced no scales"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let active: Vec<_> = config
            .active_scales(feature_shapes.len())
            .iter()
            .map(|&i| feature_shapes[i])
            .collect();
        let hpe = Hpe::new(&mut params, &config.effective_hpe(), &active, &mut rng)?;
        let trunk = Trunk::new(&mut params, &config.attention, config.ablation, &mut rng)?;
        Ok(Self {
            config,
            feature_shapes: feature_shapes.to_vec(),
            params,
            hpe,
            trunk,
        })
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<U: Real>(&self) -> PnptModel<U> {
        PnptModel {
            config: self.config.clone(),
            feature_shapes: self.feature_shapes.clone(),
            params: self.params.cast(),
            hpe: self.hpe.clone(),
            trunk: self.trunk.clone(),
        }
    }

    pub fn is_dual(&self) -> bool {
        self.trunk.is_dual()
    }

    pub fn select_scales(&self, f: &MultiScaleFeatureSet) -> Result<MultiScaleFeatureSet> {
        if f.shapes() != self.feature_shapes {
            return Err(Error::shape(format!(
                "features {:?}, model expects {:?}",
                f.shapes(),
                self.feature_shapes
            )));
        }
        let scales = self
            .config
            .active_scales(f.num_scales())
            .iter()
            .map(|&i| f.scales[i].clone())
            .collect();
        Ok(MultiScaleFeatureSet::new(scales, f.provenance))
    }

    pub fn prepare(
        &self,
        input: &MultiScaleFeatureSet,
        prior: &MultiScaleFeatureSet,
    ) -> Result<Prepared<T>> {
        let input = self.hpe.patch_inputs(&self.select_scales(input)?)?;
        let prior = if self.is_dual() {
            Some(self.hpe.patch_inputs(&self.select_scales(prior)?)?)
        } else {
            None
        };
        Ok(Prepared { input, prior })
    }

    /// Embedding, trunk and inverse embedding on `g`. Noise is applied to both
    /// streams when `noise` is given.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph<'_, T>,
        sample: &Prepared<T>,
        mut noise: Option<&mut R>,
    ) -> Result<GraphOutputs> {
        let mut branches = Vec::with_capacity(2);
        if let Some(prior) = &sample.prior {
            branches.push(self.hpe.forward(g, prior, noise.as_deref_mut()));
        }
        branches.push(self.hpe.forward(g, &sample.input, noise));
        let out = pnpt_forward(g, &self.trunk, branches)?;
        let mut recon: Vec<Vec<Var>> = out.iter().map(|&t| self.hpe.inverse(g, t)).collect();
        let own = recon.pop().expect("self branch");
        Ok(GraphOutputs {
            prior: recon.pop(),
            own,
        })
    }

    /// Reconstruction loss on the graph. Single-stream variants count the
    /// self branch twice so both forms share one scale.
    pub fn loss(&self, g: &mut Graph<'_, T>, sample: &Prepared<T>, out: &GraphOutputs) -> Var {
        let mut terms = Vec::new();
        let mut branch = |g: &mut Graph<'_, T>, vars: &[Var]| {
            for (v, target) in vars.iter().zip(&sample.input) {
                terms.push(g.cosine_distance(*v, target.clone()));
            }
        };
        match &out.prior {
            Some(p) => branch(g, p),
            None => branch(g, &out.own),
        }
        branch(g, &out.own);
        g.sum_scalars(&terms)
    }

    /// Inference: reconstructs both streams without noise.
    pub fn reconstruct(
        &self,
        input: &MultiScaleFeatureSet,
        prior: &MultiScaleFeatureSet,
    ) -> Result<Reconstruction> {
        let sample = self.prepare(input, prior)?;
        let mut g = Graph::new(&self.params);
        let out = self.forward::<ChaCha8Rng>(&mut g, &sample, None)?;
        let fold = |vars: &[Var], provenance| {
            let views: Vec<_> = vars.iter().map(|&v| g.value(v).view()).collect();
            self.hpe.fold_outputs(&views, provenance)
        };
        Ok(Reconstruction {
            input: self.select_scales(input)?,
            prior: out
                .prior
                .as_ref()
                .map(|p| fold(p, Provenance::ReconstructionPrior)),
            own: fold(&out.own, Provenance::ReconstructionSelf),
        })
    }

    /// Loss value of one sample without noise.
    pub fn eval_loss(
        &self,
        input: &MultiScaleFeatureSet,
        prior: &MultiScaleFeatureSet,
    ) -> Result<T> {
        let sample = self.prepare(input, prior)?;
        let mut g = Graph::new(&self.params);
        let out = self.forward::<ChaCha8Rng>(&mut g, &sample, None)?;
        let l = self.loss(&mut g, &sample, &out);
        Ok(g.scalar(l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Provenance;
    use crate::objective::reconstruction_loss;
    use crate::transformer::Variant;
    use ndarray::Array3;
    use rand_distr::{Distribution, StandardNormal};

    const SHAPES: [(usize, usize, usize); 3] = [(4, 16, 16), (8, 8, 8), (16, 4, 4)];

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            hpe: HpeConfig {
                patch_sizes: vec![4, 2, 1],
                hidden_dim: 12,
                noise_std: 0.1,
                ..HpeConfig::default()
            },
            attention: AttentionConfig {
                heads: 2,
                hidden_dim: 12,
                blocks: 2,
                semantic_tokens: 3,
                share_branch_weights: true,
                ffn_expansion: 2,
            },
            ablation: variant.ablation(),
        }
    }

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

    #[test]
    fn graph_loss_matches_array_loss() {
        let model = PnptModel::<f64>::new(cfg(Variant::Full), &SHAPES, 1).unwrap();
        let (x, p) = (random_set(2), random_set(3));
        let r = model.reconstruct(&x, &p).unwrap();
        let expected = reconstruction_loss(&r.input, r.prior.as_ref().unwrap(), &r.own).unwrap();
        let got = model.eval_loss(&x, &p).unwrap();
        assert!((got - expected).abs() < 1e-5, "{got} vs {expected}");
    }

    #[test]
    fn inference_is_deterministic() {
        let model = PnptModel::<f32>::new(cfg(Variant::Full), &SHAPES, 1).unwrap();
        let (x, p) = (random_set(2), random_set(3));
        let a = model.reconstruct(&x, &p).unwrap();
        let b = model.reconstruct(&x, &p).unwrap();
        assert_eq!(a.own, b.own);
        assert_eq!(a.prior, b.prior);
    }

    #[test]
    fn single_stream_variants_have_no_prior_output() {
        for v in [Variant::A, Variant::B, Variant::C] {
            let model = PnptModel::<f32>::new(cfg(v), &SHAPES, 1).unwrap();
            let r = model.reconstruct(&random_set(2), &random_set(3)).unwrap();
            assert!(r.prior.is_none());
            let l = model.eval_loss(&random_set(2), &random_set(3)).unwrap();
            assert!(l.is_finite());
        }
        let a = PnptModel::<f32>::new(cfg(Variant::A), &SHAPES, 1).unwrap();
        let r = a.reconstruct(&random_set(2), &random_set(3)).unwrap();
        assert_eq!(r.own.shapes(), vec![(16, 4, 4)]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = PnptModel::<f32>::new(cfg(Variant::Full), &SHAPES, 1).unwrap();
        let bad = MultiScaleFeatureSet::new(vec![Array3::zeros((4, 8, 8))], Provenance::Input);
        assert!(matches!(
            model.reconstruct(&bad, &bad),
            Err(Error::Shape(_))
        ));
    }
}
