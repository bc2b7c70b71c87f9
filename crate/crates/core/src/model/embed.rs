//! The three input embeddings as standalone functions on a single channel.

use super::forward::{rotary_graph, token_graph};
use crate::autograd::{rotary_thetas, rotate_in_place, Tape};
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

/// Sinusoidal table: `E(n, 2j) = sin(n / 10000^(2j/d))`, `E(n, 2j+1) = cos(..)`.
pub fn positional_encoding(n: usize, d: usize) -> Result<Matrix> {
    if !d.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("positional encoding needs an even width, got {d}")));
    }
    let mut out = Matrix::zeros(n, d);
    for pos in 0..n {
        for j in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * j as f64 / d as f64);
            out[(pos, 2 * j)] = angle.sin();
            out[(pos, 2 * j + 1)] = angle.cos();
        }
    }
    Ok(out)
}

/// Width-3 convolution over the `N` patches of one channel, replicate
/// padded. `weight` is `3P×d`, `bias` is `1×d`.
pub fn token_embed(patches: &Matrix, weight: &Matrix, bias: &Matrix) -> Result<Matrix> {
    let p = patches.cols();
    if weight.rows() != 3 * p || bias.shape() != (1, weight.cols()) || patches.rows() == 0 {
        return Err(Error::Shape(format!(
            "token conv: patches {}x{p}, kernel {}x{}, bias {}x{}",
            patches.rows(),
            weight.rows(),
            weight.cols(),
            bias.rows(),
            bias.cols()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf_ref(patches, false);
    let w = tape.leaf_ref(weight, false);
    let b = tape.leaf_ref(bias, false);
    let out = token_graph(&mut tape, x, patches.rows(), w, b);
    Ok(tape.value(out).clone())
}

/// `softmax((R q)(R k)ᵀ / √d) · V` with `Q, K, V = patches · W`.
pub fn rotary_attention(patches: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Matrix> {
    let p = patches.cols();
    let d = wq.cols();
    if [wq, wk, wv].iter().any(|w| w.shape() != (p, d)) || !d.is_multiple_of(2) || patches.rows() == 0 {
        return Err(Error::Shape(format!(
            "rotary attention: patches {}x{p}, projections must be {p}x(even d)",
            patches.rows()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf_ref(patches, false);
    let (q, k, v) = (tape.leaf_ref(wq, false), tape.leaf_ref(wk, false), tape.leaf_ref(wv, false));
    let out = rotary_graph(&mut tape, x, patches.rows(), q, k, v);
    Ok(tape.value(out).clone())
}

/// Pre-softmax score `(R_m q)·(R_n k)` (no scaling).
pub fn rotary_scores(q: &[f64], m: usize, k: &[f64], n: usize) -> f64 {
    let thetas = rotary_thetas(q.len());
    let (mut a, mut b) = (q.to_vec(), k.to_vec());
    rotate_in_place(&mut a, m, &thetas, false);
    rotate_in_place(&mut b, n, &thetas, false);
    dot(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_examples() {
        let pe = positional_encoding(3, 6).unwrap();
        for j in 0..3 {
            assert_eq!(pe[(0, 2 * j)], 0.0);
            assert_eq!(pe[(0, 2 * j + 1)], 1.0);
        }
        assert!((pe[(1, 0)] - 1f64.sin()).abs() < 1e-15);
        for r in 0..3 {
            let sq: f64 = pe.row(r).iter().map(|v| v * v).sum();
            assert!((sq - 3.0).abs() < 1e-12);
        }
        assert!(positional_encoding(2, 5).is_err());
    }

    #[test]
    fn single_patch_sees_replicated_padding() {
        let patches = Matrix::from_vec(1, 2, vec![0.5, -1.0]);
        let weight = Matrix::from_vec(6, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bias = Matrix::from_vec(1, 1, vec![0.25]);
        let out = token_embed(&patches, &weight, &bias).unwrap();
        // All three taps read the only patch.
        let expected = 0.5 * (1.0 + 3.0 + 5.0) - (2.0 + 4.0 + 6.0) + 0.25;
        assert!((out[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn centre_tap_kernel_is_pointwise() {
        let patches = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut weight = Matrix::zeros(6, 2);
        weight[(2, 0)] = 1.0;
        weight[(3, 1)] = 2.0;
        let out = token_embed(&patches, &weight, &Matrix::zeros(1, 2)).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[patches[(r, 0)], 2.0 * patches[(r, 1)]]);
        }
        let zero = token_embed(&Matrix::zeros(3, 2), &weight, &Matrix::zeros(1, 2)).unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotary_scores_depend_on_offset_only() {
        let q = [0.3, -1.2, 0.7, 0.1];
        let k = [1.1, 0.4, -0.5, 0.9];
        assert!((rotary_scores(&q, 5, &k, 5) - dot(&q, &k)).abs() < 1e-12);
        let base = rotary_scores(&q, 2, &k, 7);
        assert!((rotary_scores(&q, 12, &k, 17) - base).abs() < 1e-12);
    }

    #[test]
    fn single_patch_attention_returns_value_row() {
        let patches = Matrix::from_vec(1, 2, vec![0.4, -0.6]);
        let wq = Matrix::from_vec(2, 4, vec![1.0; 8]);
        let wv = Matrix::from_vec(2, 4, (0..8).map(f64::from).collect());
        let out = rotary_attention(&patches, &wq, &wq, &wv).unwrap();
        assert!(out.max_abs_diff(&patches.matmul(&wv)) < 1e-15);
    }
}
