//! One transformer block as a standalone function.

use super::forward::{block_graph, BlockSpec, BlockVars, Dropout};
use super::{AttentionOverride, BlockParams, ModelConfig, PcaProjector};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Applies `block` to the `N×d` hidden states of one channel (inference).
pub fn fplm_block_forward(h: &Matrix, block: &BlockParams, cfg: &ModelConfig) -> Result<Matrix> {
    let d = cfg.hidden;
    if h.cols() != d || h.rows() == 0 || block.wq.shape() != (d, d) || block.w1.shape() != (d, 4 * d) {
        return Err(Error::Shape(format!(
            "block input {}x{} with hidden size {d}",
            h.rows(),
            h.cols()
        )));
    }
    if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
        return Err(Error::Config(format!("{} heads do not divide {d}", cfg.heads)));
    }
    let mut tape = Tape::new();
    let x = tape.leaf_ref(h, false);
    let vars = BlockVars::constants(&mut tape, block);
    let spec = BlockSpec {
        n: h.rows(),
        heads: cfg.heads,
        ln_eps: cfg.ln_epsilon,
        pca: block.pca.as_ref(),
        attention: AttentionOverride::None,
    };
    let out = block_graph(&mut tape, x, &vars, &spec, &mut Dropout::off());
    Ok(tape.value(out).clone())
}

/// What the PCA stand-in contributes in place of attention.
pub fn pca_attention_output(h: &Matrix, projector: &PcaProjector) -> Matrix {
    let mut centred = h.clone();
    for r in 0..centred.rows() {
        for (v, m) in centred.row_mut(r).iter_mut().zip(projector.mean.as_slice()) {
            *v -= m;
        }
    }
    centred.matmul(&projector.projection())
}
