//! Forward pass on the autograd tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::embed::positional_encoding;
use super::rin::{standardize, RinStats};
use super::{BlockParams, ModelState, PcaProjector, PRE_BLOCK_TENSORS, TENSORS_PER_BLOCK};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::lspr::patch_indices;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, driven by the seed.
    Train,
    /// Dropout off; the seed is ignored.
    Eval,
}

/// Replaces every block's attention sub-layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionOverride {
    #[default]
    None,
    /// Attention contributes nothing; only the residual path remains.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub seed: u64,
    pub attention: AttentionOverride,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            seed: 0,
            attention: AttentionOverride::None,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            seed,
            attention: AttentionOverride::None,
        }
    }
}

/// Intermediate activations, each `(D·N)×d` with channel `c` in rows
/// `c·N..(c+1)·N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub embedding: Matrix,
    pub block_inputs: Vec<Matrix>,
    pub block_outputs: Vec<Matrix>,
}

pub(crate) struct Dropout {
    rng: Option<ChaCha8Rng>,
    rate: f64,
}

impl Dropout {
    pub(crate) fn new(mode: Mode, rate: f64, seed: u64) -> Self {
        let rng = (mode == Mode::Train && rate > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed));
        Self { rng, rate }
    }

    pub(crate) fn off() -> Self {
        Self { rng: None, rate: 0.0 }
    }

    fn apply(&mut self, tape: &mut Tape<'_>, v: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return v;
        };
        let (r, c) = tape.value(v).shape();
        let keep = 1.0 / (1.0 - self.rate);
        let mask = (0..r * c)
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        tape.mul_const(v, Matrix::from_vec(r, c, mask))
    }
}

pub(crate) struct EmbedVars {
    pub token_weight: Var,
    pub token_bias: Var,
    pub rotary_q: Var,
    pub rotary_k: Var,
    pub rotary_v: Var,
}

pub(crate) struct BlockVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
}

impl BlockVars {
    pub(crate) fn from_slice(v: &[Var]) -> Self {
        Self {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
            ln1_gamma: v[8],
            ln1_beta: v[9],
            w1: v[10],
            b1: v[11],
            w2: v[12],
            b2: v[13],
            ln2_gamma: v[14],
            ln2_beta: v[15],
        }
    }

    pub(crate) fn constants<'a>(tape: &mut Tape<'a>, b: &'a BlockParams) -> Self {
        let vars: Vec<Var> = [
            &b.wq,
            &b.bq,
            &b.wk,
            &b.bk,
            &b.wv,
            &b.bv,
            &b.wo,
            &b.bo,
            &b.ln1_gamma,
            &b.ln1_beta,
            &b.w1,
            &b.b1,
            &b.w2,
            &b.b2,
            &b.ln2_gamma,
            &b.ln2_beta,
        ]
        .into_iter()
        .map(|m| tape.leaf_ref(m, false))
        .collect();
        Self::from_slice(&vars)
    }
}

/// Width-3 convolution along the patch axis with replicate padding, for
/// `groups` stacked blocks of `n` patches.
pub(crate) fn token_graph(tape: &mut Tape<'_>, patches: Var, n: usize, weight: Var, bias: Var) -> Var {
    let (rows, p) = tape.value(patches).shape();
    let mut idx = Vec::with_capacity(rows * 3 * p);
    for r in 0..rows {
        let (base, i) = (r - r % n, r % n);
        for k in 0..3 {
            let src = (i + k).saturating_sub(1).min(n - 1);
            idx.extend((0..p).map(|c| (base + src) * p + c));
        }
    }
    let cols = tape.gather(patches, idx, rows, 3 * p);
    let out = tape.matmul(cols, weight);
    tape.add_row(out, bias)
}

/// Single-head attention over rotary-encoded projections of the patches.
pub(crate) fn rotary_graph(tape: &mut Tape<'_>, patches: Var, n: usize, wq: Var, wk: Var, wv: Var) -> Var {
    let d = tape.value(wq).cols();
    let q = tape.matmul(patches, wq);
    let k = tape.matmul(patches, wk);
    let v = tape.matmul(patches, wv);
    let qr = tape.rotary(q, n);
    let kr = tape.rotary(k, n);
    tape.attention(qr, kr, v, n, 1, 1.0 / (d as f64).sqrt())
}

/// `e_token + e_pos + e_r` for stacked patches.
pub(crate) fn embed_graph(tape: &mut Tape<'_>, patches: Var, n: usize, vars: &EmbedVars) -> Result<Var> {
    let rows = tape.value(patches).rows();
    let d = tape.value(vars.token_weight).cols();
    let token = token_graph(tape, patches, n, vars.token_weight, vars.token_bias);
    let pe = positional_encoding(n, d)?;
    let mut tiled = Matrix::zeros(rows, d);
    for r in 0..rows {
        tiled.row_mut(r).copy_from_slice(pe.row(r % n));
    }
    let with_pos = tape.add_const(token, &tiled);
    let rot = rotary_graph(tape, patches, n, vars.rotary_q, vars.rotary_k, vars.rotary_v);
    Ok(tape.add(with_pos, rot))
}

pub(crate) struct BlockSpec<'s> {
    pub n: usize,
    pub heads: usize,
    pub ln_eps: f64,
    pub pca: Option<&'s PcaProjector>,
    pub attention: AttentionOverride,
}

/// `a = h + Attn(h)`, `h1 = LN1(a)`, `out = LN2(h1 + FFN(h1))`.
pub(crate) fn block_graph(
    tape: &mut Tape<'_>,
    h: Var,
    v: &BlockVars,
    spec: &BlockSpec<'_>,
    dropout: &mut Dropout,
) -> Var {
    let attn = match (spec.attention, spec.pca) {
        (AttentionOverride::Zero, _) => None,
        (AttentionOverride::None, Some(pca)) => {
            let neg_mean = tape.constant(pca.mean.scale(-1.0));
            let centred = tape.add_row(h, neg_mean);
            let proj = tape.constant(pca.projection());
            Some(tape.matmul(centred, proj))
        }
        (AttentionOverride::None, None) => {
            let d = tape.value(v.wq).cols();
            let q = tape.matmul(h, v.wq);
            let q = tape.add_row(q, v.bq);
            let k = tape.matmul(h, v.wk);
            let k = tape.add_row(k, v.bk);
            let val = tape.matmul(h, v.wv);
            let val = tape.add_row(val, v.bv);
            let scale = 1.0 / ((d / spec.heads) as f64).sqrt();
            let o = tape.attention(q, k, val, spec.n, spec.heads, scale);
            let o = tape.matmul(o, v.wo);
            Some(tape.add_row(o, v.bo))
        }
    };
    let a = match attn {
        Some(o) => tape.add(h, o),
        None => h,
    };
    let h1 = tape.layer_norm(a, v.ln1_gamma, v.ln1_beta, spec.ln_eps);
    let f = tape.matmul(h1, v.w1);
    let f = tape.add_row(f, v.b1);
    let f = tape.gelu(f);
    let f = tape.matmul(f, v.w2);
    let f = tape.add_row(f, v.b2);
    let f = dropout.apply(tape, f);
    let s = tape.add(h1, f);
    tape.layer_norm(s, v.ln2_gamma, v.ln2_beta, spec.ln_eps)
}

/// A recorded forward pass.
pub struct Graph<'a> {
    pub tape: Tape<'a>,
    /// One leaf per state tensor, canonical order.
    pub params: Vec<Var>,
    pub output: Var,
    pub embedding: Var,
    pub block_inputs: Vec<Var>,
    pub block_outputs: Vec<Var>,
}

/// Builds the full forward graph. `trainable[i]` marks which tensors get
/// adjoints; pass an empty slice for inference.
pub fn forward_graph<'a>(
    state: &'a ModelState,
    window: &Matrix,
    trainable: &[bool],
    opts: &ForwardOptions,
) -> Result<Graph<'a>> {
    let cfg = &state.config;
    if window.shape() != (cfg.lookback, cfg.feature_dim) {
        return Err(Error::Shape(format!(
            "window is {}x{}, model expects {}x{}",
            window.rows(),
            window.cols(),
            cfg.lookback,
            cfg.feature_dim
        )));
    }
    let (l, dd, p, n) = (cfg.lookback, cfg.feature_dim, cfg.patch_size, cfg.n_patches());
    let mut tape = Tape::new();
    let params: Vec<Var> = state
        .values()
        .into_iter()
        .enumerate()
        .map(|(i, m)| tape.leaf_ref(m, trainable.get(i).copied().unwrap_or(false)))
        .collect();
    let mut dropout = Dropout::new(opts.mode, cfg.dropout, opts.seed);

    // Instance normalisation: statistics are data, the affine is learnable.
    let stats = RinStats::of(window);
    let z = tape.constant(standardize(window, &stats, cfg.epsilon));
    let scaled = tape.mul_row(z, params[0]);
    let x_hat = tape.add_row(scaled, params[1]);

    // Channel-independent patching: row c·N + i holds patch i of channel c.
    let pidx = patch_indices(l, p, cfg.patch_stride)?;
    let mut idx = Vec::with_capacity(dd * n * p);
    for c in 0..dd {
        idx.extend(pidx.iter().map(|&t| t * dd + c));
    }
    let patches = tape.gather(x_hat, idx, dd * n, p);

    let embed_vars = EmbedVars {
        token_weight: params[2],
        token_bias: params[3],
        rotary_q: params[4],
        rotary_k: params[5],
        rotary_v: params[6],
    };
    let emb = embed_graph(&mut tape, patches, n, &embed_vars)?;
    let mut h = dropout.apply(&mut tape, emb);
    let embedding = h;

    let mut block_inputs = Vec::with_capacity(cfg.blocks);
    let mut block_outputs = Vec::with_capacity(cfg.blocks);
    for (b, block) in state.blocks.iter().enumerate() {
        let base = PRE_BLOCK_TENSORS + b * TENSORS_PER_BLOCK;
        let vars = BlockVars::from_slice(&params[base..base + TENSORS_PER_BLOCK]);
        let spec = BlockSpec {
            n,
            heads: cfg.heads,
            ln_eps: cfg.ln_epsilon,
            pca: block.pca.as_ref(),
            attention: opts.attention,
        };
        block_inputs.push(h);
        h = block_graph(&mut tape, h, &vars, &spec, &mut dropout);
        block_outputs.push(h);
    }

    let tail = PRE_BLOCK_TENSORS + cfg.blocks * TENSORS_PER_BLOCK;
    let h = tape.layer_norm(h, params[tail], params[tail + 1], cfg.ln_epsilon);
    let pooled = tape.group_mean(h, dd);
    let flat = tape.reshape(pooled, 1, n * cfg.hidden);
    let y = tape.matmul(flat, params[tail + 2]);
    let mut output = tape.add_row(y, params[tail + 3]);
    if cfg.denormalize_output {
        let std_mean = stats.std(cfg.epsilon).iter().sum::<f64>() / dd as f64;
        let mean_mean = stats.mean.iter().sum::<f64>() / dd as f64;
        output = tape.denormalize(output, params[0], params[1], std_mean, mean_mean);
    }
    Ok(Graph {
        tape,
        params,
        output,
        embedding,
        block_inputs,
        block_outputs,
    })
}

fn finite_output(values: &Matrix) -> Result<Vec<f64>> {
    if let Some(i) = values.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("prediction step {i} is not finite")));
    }
    Ok(values.as_slice().to_vec())
}

/// `T` predicted RUL fractions for one `L×D` window.
pub fn predict(state: &ModelState, window: &Matrix, opts: &ForwardOptions) -> Result<Vec<f64>> {
    let g = forward_graph(state, window, &[], opts)?;
    finite_output(g.tape.value(g.output))
}

/// Like [`predict`], also returning block activations.
pub fn predict_traced(state: &ModelState, window: &Matrix, opts: &ForwardOptions) -> Result<(Vec<f64>, ForwardTrace)> {
    let g = forward_graph(state, window, &[], opts)?;
    let trace = ForwardTrace {
        embedding: g.tape.value(g.embedding).clone(),
        block_inputs: g.block_inputs.iter().map(|v| g.tape.value(*v).clone()).collect(),
        block_outputs: g.block_outputs.iter().map(|v| g.tape.value(*v).clone()).collect(),
    };
    Ok((finite_output(g.tape.value(g.output))?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn window(cfg: &ModelConfig) -> Matrix {
        Matrix::from_vec(
            cfg.lookback,
            cfg.feature_dim,
            (0..cfg.lookback * cfg.feature_dim).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
    }

    fn state() -> ModelState {
        let mut cfg = ModelConfig::tiny();
        cfg.dropout = 0.3;
        ModelState::new(cfg, 11).unwrap()
    }

    #[test]
    fn train_mode_is_seed_deterministic() {
        let s = state();
        let w = window(&s.config);
        let a = predict(&s, &w, &ForwardOptions::train(4)).unwrap();
        let b = predict(&s, &w, &ForwardOptions::train(4)).unwrap();
        let c = predict(&s, &w, &ForwardOptions::train(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn eval_mode_ignores_seed() {
        let s = state();
        let w = window(&s.config);
        let mut o = ForwardOptions::eval();
        let a = predict(&s, &w, &o).unwrap();
        o.seed = 99;
        assert_eq!(a, predict(&s, &w, &o).unwrap());
    }

    #[test]
    fn wrong_window_shape_is_rejected() {
        let s = state();
        assert!(matches!(
            predict(&s, &Matrix::zeros(3, 2), &ForwardOptions::eval()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn nan_weights_are_reported() {
        let mut s = state();
        s.head_bias[(0, 1)] = f64::NAN;
        let w = window(&s.config);
        assert!(matches!(predict(&s, &w, &ForwardOptions::eval()), Err(Error::Numerical(_))));
    }

    #[test]
    fn channels_do_not_interact_before_pooling() {
        let s = state();
        let w = window(&s.config);
        let (_, t1) = predict_traced(&s, &w, &ForwardOptions::eval()).unwrap();
        let mut w2 = w.clone();
        for r in 0..w2.rows() {
            w2[(r, 1)] = (r as f64).cos() * 7.0;
        }
        let (_, t2) = predict_traced(&s, &w2, &ForwardOptions::eval()).unwrap();
        let n = s.config.n_patches();
        let last = t1.block_outputs.len() - 1;
        for r in 0..n {
            assert_eq!(t1.block_outputs[last].row(r), t2.block_outputs[last].row(r));
        }
    }
}
