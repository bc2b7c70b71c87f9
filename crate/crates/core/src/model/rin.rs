//! Reversible instance normalisation as a standalone layer.

use super::RinParams;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-channel statistics of one window (population variance).
#[derive(Debug, Clone, PartialEq)]
pub struct RinStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl RinStats {
    pub fn of(x: &Matrix) -> Self {
        let (l, d) = x.shape();
        let mut mean = vec![0.0; d];
        for r in 0..l {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= l as f64);
        let mut variance = vec![0.0; d];
        for r in 0..l {
            for ((s, v), m) in variance.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        variance.iter_mut().for_each(|s| *s /= l as f64);
        Self { mean, variance }
    }

    pub fn std(&self, eps: f64) -> Vec<f64> {
        self.variance.iter().map(|v| (v + eps).sqrt()).collect()
    }
}

/// `(x − mean)/sqrt(var + eps)` per channel, without the affine.
pub(crate) fn standardize(x: &Matrix, stats: &RinStats, eps: f64) -> Matrix {
    let std = stats.std(eps);
    let mut z = x.clone();
    for r in 0..z.rows() {
        for ((v, m), s) in z.row_mut(r).iter_mut().zip(&stats.mean).zip(&std) {
            *v = (*v - m) / s;
        }
    }
    z
}

fn check_channels(x: &Matrix, params: &RinParams) -> Result<()> {
    if params.gamma.cols() != x.cols() || params.beta.cols() != x.cols() {
        return Err(Error::Shape(format!(
            "window has {} channels, RIN parameters cover {}",
            x.cols(),
            params.gamma.cols()
        )));
    }
    Ok(())
}

/// `x̂ = γ·(x − mean)/sqrt(var + eps) + β`, per channel.
pub fn rin_normalize(x: &Matrix, params: &RinParams, eps: f64) -> Result<(Matrix, RinStats)> {
    if x.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "instance normalisation needs at least 2 time steps, got {}",
            x.rows()
        )));
    }
    check_channels(x, params)?;
    let stats = RinStats::of(x);
    let mut out = standardize(x, &stats, eps);
    for r in 0..out.rows() {
        for ((v, g), b) in out
            .row_mut(r)
            .iter_mut()
            .zip(params.gamma.as_slice())
            .zip(params.beta.as_slice())
        {
            *v = *v * g + b;
        }
    }
    Ok((out, stats))
}

/// `ŷ = sqrt(var + eps)·(ỹ − β)/γ + mean`, per channel of `y`.
pub fn rin_denormalize(y: &Matrix, params: &RinParams, stats: &RinStats, eps: f64) -> Result<Matrix> {
    check_channels(y, params)?;
    if let Some(c) = params.gamma.as_slice().iter().position(|&g| g == 0.0) {
        return Err(Error::Numerical(format!("RIN gamma of channel {c} is zero")));
    }
    let std = stats.std(eps);
    let mut out = y.clone();
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = std[c] * (*v - params.beta.as_slice()[c]) / params.gamma.as_slice()[c] + stats.mean[c];
        }
    }
    Ok(out)
}
