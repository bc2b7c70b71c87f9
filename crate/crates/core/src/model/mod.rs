//! The frozen-backbone RUL network.
//!
//! Data flow for one `L×D` window:
//!
//! ```text
//! RIN ─► patch each channel (N×P) ─► token conv ⊕ sinusoid ⊕ rotary attention
//!     ─► dropout ─► B blocks ─► final LN ─► mean over channels ─► flatten N·d ─► linear ─► T
//! ```
//!
//! All `D` channels travel through the network as one `(D·N)×d` matrix, but
//! every attention op works on row groups of `N`, so channels never mix
//! until the channel mean just before the head.

mod archive;
mod block;
mod embed;
mod forward;
mod rin;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lspr::patch_count;
use crate::tensor::Matrix;

pub use archive::{
    checkpoint_archive, import_pretrained, read_checkpoint, state_from_checkpoint, write_backbone_archive,
    write_checkpoint, Archive, ArchiveTensor, BackboneMapping, Dtype, MappingEntry,
};
pub use block::{fplm_block_forward, pca_attention_output};
pub use embed::{positional_encoding, rotary_attention, rotary_scores, token_embed};
pub use forward::{forward_graph, predict, predict_traced, AttentionOverride, ForwardOptions, ForwardTrace, Mode};
pub use rin::{rin_denormalize, rin_normalize, RinStats};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden width `d`.
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    /// Lookback `L`.
    pub lookback: usize,
    /// Horizon `T`.
    pub horizon: usize,
    /// Feature channels `D`.
    pub feature_dim: usize,
    pub dropout: f64,
    /// RIN variance guard.
    pub epsilon: f64,
    /// Layer-norm variance guard.
    pub ln_epsilon: f64,
    /// Map outputs back through the inverse instance normalisation.
    pub denormalize_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 768,
            blocks: 6,
            heads: 12,
            patch_size: 6,
            patch_stride: 4,
            lookback: 75,
            horizon: 25,
            feature_dim: 64,
            dropout: 0.2,
            epsilon: 1e-5,
            ln_epsilon: 1e-5,
            denormalize_output: false,
        }
    }
}

impl ModelConfig {
    /// `d=8, B=2, H=2, P=3, S=2, L=7, D=2, T=4`, used for oracle tests.
    pub fn tiny() -> Self {
        Self {
            hidden: 8,
            blocks: 2,
            heads: 2,
            patch_size: 3,
            patch_stride: 2,
            lookback: 7,
            horizon: 4,
            feature_dim: 2,
            dropout: 0.0,
            ..Self::default()
        }
    }

    /// Patches per channel, `N`.
    pub fn n_patches(&self) -> usize {
        patch_count(self.lookback, self.patch_size, self.patch_stride)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return fail(format!("hidden size {} must be even and positive", self.hidden));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.blocks == 0 {
            return fail("at least one block is required".into());
        }
        if self.patch_stride == 0 || self.patch_size == 0 || self.patch_size > self.lookback {
            return fail(format!(
                "patch size {} / stride {} invalid for lookback {}",
                self.patch_size, self.patch_stride, self.lookback
            ));
        }
        if self.horizon == 0 || self.feature_dim == 0 {
            return fail("horizon and feature dimension must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.epsilon <= 0.0 || self.ln_epsilon <= 0.0 {
            return fail("epsilon values must be positive".into());
        }
        Ok(())
    }
}

/// Parameter families; the fine-tuning stages select by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    RinAffine,
    TokenConv,
    Rotary,
    LayerNorm,
    Attention,
    FeedForward,
    Head,
}

/// Training history recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Sft,
    Pt,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Sft => "sft",
            Stage::Pt => "pt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "initial" => Some(Stage::Initial),
            "sft" => Some(Stage::Sft),
            "pt" => Some(Stage::Pt),
            _ => None,
        }
    }
}

/// Per-channel affine of the instance normalisation, each `1×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct RinParams {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl RinParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, channels, 1.0),
            beta: Matrix::zeros(1, channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    /// Width-3 convolution as a `3P×d` matrix; row `k·P + p` is tap `k`
    /// (offsets −1, 0, +1) of input channel `p`.
    pub token_weight: Matrix,
    pub token_bias: Matrix,
    pub rotary_q: Matrix,
    pub rotary_k: Matrix,
    pub rotary_v: Matrix,
}

/// Fixed projector standing in for a block's attention: `(h − mean)·U·Uᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjector {
    pub mean: Matrix,
    /// `d×k`, orthonormal columns in descending-variance order.
    pub basis: Matrix,
    pub eigenvalues: Vec<f64>,
}

impl PcaProjector {
    /// `U·Uᵀ`.
    pub fn projection(&self) -> Matrix {
        self.basis.matmul_nt(&self.basis)
    }
}

/// One transformer block. Projections act on the right (`h·W`); heads
/// partition the columns of `wq`, `wk`, `wv`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    /// When set, replaces multi-head attention.
    pub pca: Option<PcaProjector>,
}

impl BlockParams {
    /// Zero projections and feed-forward, identity layer norms.
    pub fn zeroed(d: usize) -> Self {
        Self {
            wq: Matrix::zeros(d, d),
            bq: Matrix::zeros(1, d),
            wk: Matrix::zeros(d, d),
            bk: Matrix::zeros(1, d),
            wv: Matrix::zeros(d, d),
            bv: Matrix::zeros(1, d),
            wo: Matrix::zeros(d, d),
            bo: Matrix::zeros(1, d),
            ln1_gamma: Matrix::filled(1, d, 1.0),
            ln1_beta: Matrix::zeros(1, d),
            w1: Matrix::zeros(d, 4 * d),
            b1: Matrix::zeros(1, 4 * d),
            w2: Matrix::zeros(4 * d, d),
            b2: Matrix::zeros(1, d),
            ln2_gamma: Matrix::filled(1, d, 1.0),
            ln2_beta: Matrix::zeros(1, d),
            pca: None,
        }
    }
}

/// Name, group and value of one parameter tensor.
#[derive(Debug, Clone, Copy)]
pub struct TensorRef<'a> {
    pub name: &'a str,
    pub group: ParamGroup,
    pub value: &'a Matrix,
    pub frozen: bool,
}

/// Number of tensors before the first block and per block in canonical order.
pub(crate) const PRE_BLOCK_TENSORS: usize = 7;
pub(crate) const TENSORS_PER_BLOCK: usize = 16;

const BLOCK_SLOTS: [(&str, ParamGroup); TENSORS_PER_BLOCK] = [
    ("attn.wq", ParamGroup::Attention),
    ("attn.bq", ParamGroup::Attention),
    ("attn.wk", ParamGroup::Attention),
    ("attn.bk", ParamGroup::Attention),
    ("attn.wv", ParamGroup::Attention),
    ("attn.bv", ParamGroup::Attention),
    ("attn.wo", ParamGroup::Attention),
    ("attn.bo", ParamGroup::Attention),
    ("ln1.gamma", ParamGroup::LayerNorm),
    ("ln1.beta", ParamGroup::LayerNorm),
    ("ffn.w1", ParamGroup::FeedForward),
    ("ffn.b1", ParamGroup::FeedForward),
    ("ffn.w2", ParamGroup::FeedForward),
    ("ffn.b2", ParamGroup::FeedForward),
    ("ln2.gamma", ParamGroup::LayerNorm),
    ("ln2.beta", ParamGroup::LayerNorm),
];

/// Canonical tensor names and groups for `blocks` blocks.
pub fn tensor_layout(blocks: usize) -> Vec<(String, ParamGroup)> {
    let mut out: Vec<(String, ParamGroup)> = [
        ("rin.gamma", ParamGroup::RinAffine),
        ("rin.beta", ParamGroup::RinAffine),
        ("embed.token.weight", ParamGroup::TokenConv),
        ("embed.token.bias", ParamGroup::TokenConv),
        ("embed.rotary.wq", ParamGroup::Rotary),
        ("embed.rotary.wk", ParamGroup::Rotary),
        ("embed.rotary.wv", ParamGroup::Rotary),
    ]
    .into_iter()
    .map(|(n, g)| (n.to_string(), g))
    .collect();
    for b in 0..blocks {
        out.extend(BLOCK_SLOTS.iter().map(|(n, g)| (format!("block.{b}.{n}"), *g)));
    }
    out.push(("final_ln.gamma".into(), ParamGroup::LayerNorm));
    out.push(("final_ln.beta".into(), ParamGroup::LayerNorm));
    out.push(("head.weight".into(), ParamGroup::Head));
    out.push(("head.bias".into(), ParamGroup::Head));
    out
}

/// Groups the backbone supplies; frozen by default.
pub fn backbone_group(group: ParamGroup) -> bool {
    matches!(group, ParamGroup::Attention | ParamGroup::FeedForward)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub rin: RinParams,
    pub embed: EmbeddingParams,
    pub blocks: Vec<BlockParams>,
    pub final_ln_gamma: Matrix,
    pub final_ln_beta: Matrix,
    pub head_weight: Matrix,
    pub head_bias: Matrix,
    /// One flag per tensor in canonical order.
    pub freeze_mask: Vec<bool>,
    pub stage: Stage,
    names: Vec<(String, ParamGroup)>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

impl ModelState {
    /// Fresh state: Gaussian(0, 0.02) weights, zero biases, unit layer-norm
    /// and RIN scales. Attention and feed-forward tensors start frozen.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, p, t) = (config.hidden, config.patch_size, config.horizon);
        let n = config.n_patches();
        let embed = EmbeddingParams {
            token_weight: gaussian(&mut rng, 3 * p, d, INIT_STD),
            token_bias: Matrix::zeros(1, d),
            rotary_q: gaussian(&mut rng, p, d, INIT_STD),
            rotary_k: gaussian(&mut rng, p, d, INIT_STD),
            rotary_v: gaussian(&mut rng, p, d, INIT_STD),
        };
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                wq: gaussian(&mut rng, d, d, INIT_STD),
                wk: gaussian(&mut rng, d, d, INIT_STD),
                wv: gaussian(&mut rng, d, d, INIT_STD),
                wo: gaussian(&mut rng, d, d, INIT_STD),
                w1: gaussian(&mut rng, d, 4 * d, INIT_STD),
                w2: gaussian(&mut rng, 4 * d, d, INIT_STD),
                ..BlockParams::zeroed(d)
            })
            .collect();
        let head_weight = gaussian(&mut rng, n * d, t, INIT_STD);
        Ok(Self::from_parts(
            config.clone(),
            RinParams::identity(config.feature_dim),
            embed,
            blocks,
            head_weight,
        ))
    }

    fn from_parts(
        config: ModelConfig,
        rin: RinParams,
        embed: EmbeddingParams,
        blocks: Vec<BlockParams>,
        head_weight: Matrix,
    ) -> Self {
        let names = tensor_layout(config.blocks);
        let freeze_mask = names.iter().map(|(_, g)| backbone_group(*g)).collect();
        let d = config.hidden;
        let t = config.horizon;
        Self {
            rin,
            embed,
            blocks,
            final_ln_gamma: Matrix::filled(1, d, 1.0),
            final_ln_beta: Matrix::zeros(1, d),
            head_weight,
            head_bias: Matrix::zeros(1, t),
            freeze_mask,
            stage: Stage::Initial,
            names,
            config,
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[(String, ParamGroup)] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|(n, _)| n == name)
    }

    /// Values in canonical order.
    pub fn values(&self) -> Vec<&Matrix> {
        let mut v = vec![
            &self.rin.gamma,
            &self.rin.beta,
            &self.embed.token_weight,
            &self.embed.token_bias,
            &self.embed.rotary_q,
            &self.embed.rotary_k,
            &self.embed.rotary_v,
        ];
        for b in &self.blocks {
            v.extend([
                &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln1_gamma, &b.ln1_beta, &b.w1, &b.b1,
                &b.w2, &b.b2, &b.ln2_gamma, &b.ln2_beta,
            ]);
        }
        v.extend([&self.final_ln_gamma, &self.final_ln_beta, &self.head_weight, &self.head_bias]);
        v
    }

    /// Mutable values in canonical order.
    pub fn values_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![
            &mut self.rin.gamma,
            &mut self.rin.beta,
            &mut self.embed.token_weight,
            &mut self.embed.token_bias,
            &mut self.embed.rotary_q,
            &mut self.embed.rotary_k,
            &mut self.embed.rotary_v,
        ];
        for b in &mut self.blocks {
            v.extend([
                &mut b.wq,
                &mut b.bq,
                &mut b.wk,
                &mut b.bk,
                &mut b.wv,
                &mut b.bv,
                &mut b.wo,
                &mut b.bo,
                &mut b.ln1_gamma,
                &mut b.ln1_beta,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
                &mut b.ln2_gamma,
                &mut b.ln2_beta,
            ]);
        }
        v.extend([
            &mut self.final_ln_gamma,
            &mut self.final_ln_beta,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        v
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        self.values()
            .into_iter()
            .zip(&self.names)
            .zip(&self.freeze_mask)
            .map(|((value, (name, group)), &frozen)| TensorRef {
                name,
                group: *group,
                value,
                frozen,
            })
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| self.values()[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        let i = self.index_of(name)?;
        self.values_mut().into_iter().nth(i)
    }

    /// Expected shape of every tensor for this config.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
        let (d, p, t, dd) = (config.hidden, config.patch_size, config.horizon, config.feature_dim);
        let n = config.n_patches();
        let mut v = vec![(1, dd), (1, dd), (3 * p, d), (1, d), (p, d), (p, d), (p, d)];
        for _ in 0..config.blocks {
            v.extend([
                (d, d),
                (1, d),
                (d, d),
                (1, d),
                (d, d),
                (1, d),
                (d, d),
                (1, d),
                (1, d),
                (1, d),
                (d, 4 * d),
                (1, 4 * d),
                (4 * d, d),
                (1, d),
                (1, d),
                (1, d),
            ]);
        }
        v.extend([(1, d), (1, d), (n * d, t), (1, t)]);
        v
    }

    /// Zero-valued state of the right shapes, used when loading.
    pub(crate) fn zeroed(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, p, t) = (config.hidden, config.patch_size, config.horizon);
        let embed = EmbeddingParams {
            token_weight: Matrix::zeros(3 * p, d),
            token_bias: Matrix::zeros(1, d),
            rotary_q: Matrix::zeros(p, d),
            rotary_k: Matrix::zeros(p, d),
            rotary_v: Matrix::zeros(p, d),
        };
        let blocks = (0..config.blocks).map(|_| BlockParams::zeroed(d)).collect();
        let head = Matrix::zeros(config.n_patches() * d, t);
        Ok(Self::from_parts(
            config.clone(),
            RinParams::identity(config.feature_dim),
            embed,
            blocks,
            head,
        ))
    }

    pub fn parameter_count(&self) -> usize {
        self.values().iter().map(|m| m.len()).sum()
    }

    pub fn has_pca(&self) -> bool {
        self.blocks.iter().any(|b| b.pca.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_values_agree() {
        let s = ModelState::new(ModelConfig::tiny(), 1).unwrap();
        let shapes = ModelState::expected_shapes(&s.config);
        assert_eq!(s.values().len(), s.tensor_count());
        assert_eq!(shapes.len(), s.tensor_count());
        for (v, shape) in s.values().iter().zip(&shapes) {
            assert_eq!(v.shape(), *shape);
        }
        assert_eq!(s.tensor_count(), PRE_BLOCK_TENSORS + 2 * TENSORS_PER_BLOCK + 4);
        assert_eq!(s.tensor("block.1.ffn.w2").unwrap().shape(), (32, 8));
    }

    #[test]
    fn backbone_starts_frozen() {
        let s = ModelState::new(ModelConfig::tiny(), 1).unwrap();
        for t in s.tensors() {
            assert_eq!(t.frozen, backbone_group(t.group), "{}", t.name);
        }
        assert_eq!(s.tensors().iter().filter(|t| t.frozen).count(), 24);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert_eq!(ModelConfig::default().n_patches(), 19);
        let bad = ModelConfig {
            heads: 5,
            ..ModelConfig::tiny()
        };
        assert!(bad.validate().is_err());
        let odd = ModelConfig {
            hidden: 9,
            heads: 1,
            ..ModelConfig::tiny()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = ModelState::new(ModelConfig::tiny(), 5).unwrap();
        let b = ModelState::new(ModelConfig::tiny(), 5).unwrap();
        let c = ModelState::new(ModelConfig::tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
