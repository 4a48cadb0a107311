//! Dual-branch reconstruction trunk: semantic-token aggregation, second-order
//! cross-attention fusion and conditional decoding, repeated over `M` blocks.
//!
//! Branch order everywhere is `[prior, self]`; single-stream variants carry
//! only `[self]`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamSet, Real, Var};
use crate::nn::{add_norm, normal_table, Attention, FeedForward, LayerNorm};

pub const SEMANTIC_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub heads: usize,
    pub hidden_dim: usize,
    /// Number of aggregation/decoding block pairs `M`.
    pub blocks: usize,
    /// Number of semantic tokens `N`.
    pub semantic_tokens: usize,
    pub share_branch_weights: bool,
    pub ffn_expansion: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            hidden_dim: 760,
            blocks: 4,
            semantic_tokens: 40,
            share_branch_weights: true,
            ffn_expansion: 4,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.semantic_tokens == 0 {
            return Err(Error::config("semantic_tokens must be at least 1"));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::config("ffn_expansion must be positive"));
        }
        Ok(())
    }
}

/// Structural switches for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default)]
    pub disable_pool: bool,
    #[serde(default)]
    pub disable_semantic_tokens: bool,
    #[serde(default)]
    pub disable_cscd: bool,
    #[serde(default)]
    pub disable_hpe_multiscale: bool,
}

/// The ablation table's variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Plain single-stream transformer on the last backbone scale.
    A,
    /// `A` plus multi-scale patch embedding.
    B,
    /// Full model without the normality pool (single stream).
    C,
    /// Full model without semantic tokens.
    D,
    /// Full model without conditional decoding.
    E,
    Full,
}

impl Variant {
    pub fn ablation(self) -> Ablation {
        let none = Ablation::default();
        match self {
            Variant::A => Ablation {
                disable_pool: true,
                disable_semantic_tokens: true,
                disable_cscd: true,
                disable_hpe_multiscale: true,
            },
            Variant::B => Ablation {
                disable_pool: true,
                disable_semantic_tokens: true,
                disable_cscd: true,
                ..none
            },
            Variant::C => Ablation {
                disable_pool: true,
                ..none
            },
            Variant::D => Ablation {
                disable_semantic_tokens: true,
                ..none
            },
            Variant::E => Ablation {
                disable_cscd: true,
                ..none
            },
            Variant::Full => none,
        }
    }
}

/// `N × C` semantic token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTokens {
    pub tokens: Array2<f64>,
}

/// Draws the initial semantic tokens from `N(0, 0.02²)`.
pub fn init_semantic_tokens(n: usize, c: usize, seed: u64) -> SemanticTokens {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SemanticTokens {
        tokens: normal_table(&mut rng, n, c, SEMANTIC_INIT_STD),
    }
}

/// Attention sublayer and feed-forward sublayer, both post-norm.
#[derive(Debug, Clone, Copy)]
pub struct AttnFfn {
    pub attn: Attention,
    pub ln_attn: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl AttnFfn {
    fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: Attention::new(
                params,
                &format!("{name}.attn"),
                cfg.hidden_dim,
                cfg.heads,
                rng,
            ),
            ln_attn: LayerNorm::new(params, &format!("{name}.ln_attn"), cfg.hidden_dim),
            ffn: FeedForward::new(
                params,
                &format!("{name}.ffn"),
                cfg.hidden_dim,
                cfg.ffn_expansion,
                rng,
            ),
            ln_ffn: LayerNorm::new(params, &format!("{name}.ln_ffn"), cfg.hidden_dim),
        }
    }

    /// `Z = LN(Attn(q, kv) + q)`, `out = LN(FFN(Z) + Z)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, query: Var, context: Var) -> Var {
        let a = self.attn.forward(g, query, context);
        let z = add_norm(g, &self.ln_attn, a, query);
        let f = self.ffn.forward(g, z);
        add_norm(g, &self.ln_ffn, f, z)
    }
}

/// Second-order cross-attention fusion of the two branches' semantics.
#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    pub first: Attention,
    pub ln_first: LayerNorm,
    pub second: Attention,
    pub ln_second: LayerNorm,
    pub ffn: FeedForward,
    pub ln_ffn: LayerNorm,
}

impl Fusion {
    fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Self {
        let c = cfg.hidden_dim;
        Self {
            first: Attention::new(params, &format!("{name}.first"), c, cfg.heads, rng),
            ln_first: LayerNorm::new(params, &format!("{name}.ln_first"), c),
            second: Attention::new(params, &format!("{name}.second"), c, cfg.heads, rng),
            ln_second: LayerNorm::new(params, &format!("{name}.ln_second"), c),
            ffn: FeedForward::new(params, &format!("{name}.ffn"), c, cfg.ffn_expansion, rng),
            ln_ffn: LayerNorm::new(params, &format!("{name}.ln_ffn"), c),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    /// One entry when branch weights are shared, else `[prior, self]`.
    pub aggregate: Vec<AttnFfn>,
    pub fusion: Option<Fusion>,
    pub decode: Vec<AttnFfn>,
}

impl Block {
    fn branch(layers: &[AttnFfn], branch: usize) -> &AttnFfn {
        &layers[branch.min(layers.len() - 1)]
    }
}

#[derive(Debug, Clone)]
pub struct Trunk {
    pub config: AttentionConfig,
    pub ablation: Ablation,
    pub blocks: Vec<Block>,
    /// Learnable initial semantic tokens `E_S⁽⁰⁾`.
    pub semantic: Option<ParamId>,
}

impl Trunk {
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamSet<T>,
        cfg: &AttentionConfig,
        ablation: Ablation,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let dual = !ablation.disable_pool;
        let n_branch = if dual && !cfg.share_branch_weights {
            2
        } else {
            1
        };
        let semantic = (!ablation.disable_semantic_tokens).then(|| {
            params.add(
                "semantic.init",
                normal_table(rng, cfg.semantic_tokens, cfg.hidden_dim, SEMANTIC_INIT_STD),
            )
        });
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for l in 0..cfg.blocks {
            let names = |op: &str| -> Vec<String> {
                if n_branch == 1 {
                    vec![format!("block{l}.{op}")]
                } else {
                    vec![
                        format!("block{l}.{op}.prior"),
                        format!("block{l}.{op}.self"),
                    ]
                }
            };
            let aggregate = names("aggregate")
                .iter()
                .map(|n| AttnFfn::new(params, n, cfg, rng))
                .collect();
            let fusion = dual.then(|| Fusion::new(params, &format!("block{l}.fusion"), cfg, rng));
            let decode = if ablation.disable_cscd {
                Vec::new()
            } else {
                names("decode")
                    .iter()
                    .map(|n| AttnFfn::new(params, n, cfg, rng))
                    .collect()
            };
            blocks.push(Block {
                aggregate,
                fusion,
                decode,
            });
        }
        Ok(Self {
            config: cfg.clone(),
            ablation,
            blocks,
            semantic,
        })
    }

    pub fn is_dual(&self) -> bool {
        !self.ablation.disable_pool
    }
}

/// Loop state between blocks.
#[derive(Debug, Clone)]
pub struct BlockState {
    /// Patch-token sequences, `[prior, self]` or `[self]`.
    pub branches: Vec<Var>,
    pub semantic: Option<Var>,
    pub layer: usize,
}

/// Output of the aggregation step for every branch.
#[derive(Debug, Clone)]
pub struct Aggregated {
    /// `R_X`: encoded patch tokens per branch.
    pub patches: Vec<Var>,
    /// `R_S(X)`: encoded semantic tokens per branch (the patch tokens when
    /// semantic tokens are disabled).
    pub semantics: Vec<Var>,
}

fn check_finite<T: Real>(
    g: &Graph<'_, T>,
    vars: &[Var],
    site: &'static str,
    layer: usize,
) -> Result<()> {
    for &v in vars {
        if !g.value(v).iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric { site, layer });
        }
    }
    Ok(())
}

/// Joint self-attention over `[patch tokens; semantic tokens]` for each
/// branch, then the split back into the two sub-sequences.
pub fn sace_aggregate<T: Real>(
    g: &mut Graph<'_, T>,
    block: &Block,
    state: &BlockState,
) -> Result<Aggregated> {
    let mut patches = Vec::with_capacity(state.branches.len());
    let mut semantics = Vec::with_capacity(state.branches.len());
    let dual = state.branches.len() == 2;
    for (i, &tokens) in state.branches.iter().enumerate() {
        // weights index: prior = 0, self = 1 (or the only set when shared)
        let layers = Block::branch(&block.aggregate, if dual { i } else { 1 });
        let l = g.shape(tokens).0;
        match state.semantic {
            Some(sem) => {
                let n = g.shape(sem).0;
                let joint = g.concat_rows(&[tokens, sem]);
                let out = layers.forward(g, joint, joint);
                patches.push(g.slice_rows(out, 0, l));
                semantics.push(g.slice_rows(out, l, n));
            }
            None => {
                let out = layers.forward(g, tokens, tokens);
                patches.push(out);
                semantics.push(out);
            }
        }
    }
    check_finite(g, &patches, "aggregate", state.layer)?;
    Ok(Aggregated { patches, semantics })
}

/// First-order cross-attention (query prior, key/value self), then
/// second-order cross-attention (query self, key/value the coupled prior),
/// then the feed-forward sublayer.
pub fn semantic_alignment_fusion<T: Real>(
    g: &mut Graph<'_, T>,
    fusion: &Fusion,
    rs_prior: Var,
    rs_self: Var,
) -> Var {
    let a = fusion.first.forward(g, rs_prior, rs_self);
    let coupled = add_norm(g, &fusion.ln_first, a, rs_prior);
    let b = fusion.second.forward(g, rs_self, coupled);
    let z = add_norm(g, &fusion.ln_second, b, rs_self);
    let f = fusion.ffn.forward(g, z);
    add_norm(g, &fusion.ln_ffn, f, z)
}

/// Cross-attention decoding of each branch against the fused semantics.
/// Returns the next patch tokens; the semantics pass through unchanged.
pub fn cscd_decode<T: Real>(
    g: &mut Graph<'_, T>,
    block: &Block,
    patches: &[Var],
    fused: Var,
    layer: usize,
) -> Result<Vec<Var>> {
    let dual = patches.len() == 2;
    let out: Vec<Var> = patches
        .iter()
        .enumerate()
        .map(|(i, &r)| Block::branch(&block.decode, if dual { i } else { 1 }).forward(g, r, fused))
        .collect();
    check_finite(g, &out, "decode", layer)?;
    Ok(out)
}

/// One aggregation, fusion and decoding step.
pub fn block_forward<T: Real>(
    g: &mut Graph<'_, T>,
    trunk: &Trunk,
    block: &Block,
    state: BlockState,
) -> Result<BlockState> {
    let agg = sace_aggregate(g, block, &state)?;
    let fused = match (&block.fusion, agg.semantics.as_slice()) {
        (Some(fusion), [prior, own]) => {
            let f = semantic_alignment_fusion(g, fusion, *prior, *own);
            check_finite(g, &[f], "fusion", state.layer)?;
            f
        }
        // single stream: nothing to align, the branch's own semantics go on
        (_, [own]) => *own,
        _ => unreachable!("fusion requires two branches"),
    };
    let branches = if block.decode.is_empty() {
        agg.patches
    } else {
        cscd_decode(g, block, &agg.patches, fused, state.layer)?
    };
    let semantic = trunk.semantic.map(|_| fused);
    Ok(BlockState {
        branches,
        semantic,
        layer: state.layer + 1,
    })
}

/// Runs all `M` blocks; returns the final patch tokens per branch.
pub fn pnpt_forward<T: Real>(
    g: &mut Graph<'_, T>,
    trunk: &Trunk,
    branches: Vec<Var>,
) -> Result<Vec<Var>> {
    let semantic = trunk.semantic.map(|id| g.param(id));
    let mut state = BlockState {
        branches,
        semantic,
        layer: 0,
    };
    for block in &trunk.blocks {
        state = block_forward(g, trunk, block, state)?;
    }
    Ok(state.branches)
}
