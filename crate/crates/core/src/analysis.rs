//! Probes of a trained model: PCA in place of attention, layer-wise feature
//! similarity, random re-initialisation of the frozen attention, and
//! hyperparameter sweeps. Everything here writes plain CSV plot data.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::{build_task, BearingRef, RulSeries, TaskSpec};
use crate::lspr::FeatureMap;
use crate::metrics::{evaluate_with, MapeDenominator, MetricsReport};
use crate::model::{predict_traced, ForwardOptions, ModelConfig, ModelState, ParamGroup, PcaProjector};
use crate::tensor::Matrix;
use crate::training::{derive_seed, flat_predictions, two_stage, StagePlan};

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape(format!("eigen-decomposition needs a square matrix, got {}x{}", n, a.cols())));
    }
    if !a.is_finite() {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        // Sign convention: the largest-magnitude component is positive.
        let col = v.column(i);
        let pivot = col.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (r, x) in col.iter().enumerate() {
            vectors[(r, c)] = sign * x;
        }
    }
    Ok((values, vectors))
}

/// Sample covariance (denominator `n − 1`) and column means of the rows.
pub fn covariance(rows: &Matrix) -> (Matrix, Matrix) {
    let (n, d) = rows.shape();
    let mut mean = Matrix::zeros(1, d);
    for r in 0..n {
        mean.add_assign(&Matrix::row_vector(rows.row(r).to_vec()));
    }
    let mean = mean.scale(1.0 / n as f64);
    let mut centred = rows.clone();
    for r in 0..n {
        centred.row_mut(r).iter_mut().zip(mean.as_slice()).for_each(|(x, m)| *x -= m);
    }
    let cov = centred.matmul_tn(&centred).scale(1.0 / (n.max(2) - 1) as f64);
    (cov, mean)
}

/// Top-`k` principal directions of the rows.
pub fn fit_pca(rows: &Matrix, k: usize) -> Result<PcaProjector> {
    let (n, d) = rows.shape();
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("cannot keep {k} of {d} principal components")));
    }
    if n < k.max(2) {
        return Err(Error::InvalidArgument(format!(
            "rank-deficient calibration: {n} samples for {k} components"
        )));
    }
    let (cov, mean) = covariance(rows);
    let (values, vectors) = symmetric_eigen(&cov)?;
    let mut basis = Matrix::zeros(d, k);
    for r in 0..d {
        basis.row_mut(r).copy_from_slice(&vectors.row(r)[..k]);
    }
    Ok(PcaProjector {
        mean,
        basis,
        eigenvalues: values[..k].to_vec(),
    })
}

/// Projects rows onto their first two principal directions (`n×2`).
pub fn project_2d(rows: &Matrix) -> Result<Matrix> {
    let pca = fit_pca(rows, 2)?;
    let mut centred = rows.clone();
    for r in 0..centred.rows() {
        centred.row_mut(r).iter_mut().zip(pca.mean.as_slice()).for_each(|(x, m)| *x -= m);
    }
    Ok(centred.matmul(&pca.basis))
}

/// Replaces every block's attention with a projector fitted on that block's
/// inputs over the calibration windows. Inputs are traced through the
/// original model. `components` defaults to the per-head width.
pub fn pca_substitute(state: &ModelState, calibration: &[Matrix], components: Option<usize>) -> Result<ModelState> {
    let k = components.unwrap_or_else(|| state.config.head_dim());
    let traces = calibration
        .par_iter()
        .map(|w| predict_traced(state, w, &ForwardOptions::eval()).map(|(_, t)| t))
        .collect::<Result<Vec<_>>>()?;
    let mut out = state.clone();
    for (b, block) in out.blocks.iter_mut().enumerate() {
        let inputs: Vec<&Matrix> = traces.iter().map(|t| &t.block_inputs[b]).collect();
        let d = state.config.hidden;
        let total: usize = inputs.iter().map(|m| m.rows()).sum();
        let mut data = Vec::with_capacity(total * d);
        inputs.iter().for_each(|m| data.extend_from_slice(m.as_slice()));
        let rows = Matrix::from_vec(total, d, data);
        block.pca = Some(fit_pca(&rows, k)?);
    }
    Ok(out)
}

/// Cosine of two equal-length vectors; two zero vectors count as identical.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (crate::tensor::dot(a, a).sqrt(), crate::tensor::dot(b, b).sqrt());
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (crate::tensor::dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityHistogram {
    /// 1-based block index.
    pub layer_index: usize,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub comparison_label: String,
    pub values: Vec<f64>,
}

impl SimilarityHistogram {
    /// Bins cosine values uniformly over `[−1, 1]`; 1.0 lands in the last bin.
    pub fn new(layer_index: usize, values: Vec<f64>, bins: usize, label: impl Into<String>) -> Self {
        let bins = bins.max(1);
        let width = 2.0 / bins as f64;
        let bin_edges = (0..=bins).map(|i| -1.0 + i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for v in &values {
            let i = (((v + 1.0) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
            counts[i] += 1;
        }
        Self {
            layer_index,
            bin_edges,
            counts,
            comparison_label: label.into(),
            values,
        }
    }

    /// Fraction of pairs with similarity at least `threshold`.
    pub fn mass_at_least(&self, threshold: f64) -> f64 {
        self.values.iter().filter(|&&v| v >= threshold).count() as f64 / self.values.len().max(1) as f64
    }
}

pub const DEFAULT_SIMILARITY_BINS: usize = 20;

/// For each requested block (1-based), the cosine similarity between the
/// flattened block outputs of the two models on each window.
pub fn feature_similarity(
    a: &ModelState,
    b: &ModelState,
    data: &[Matrix],
    layers: &[usize],
    bins: usize,
    label: &str,
) -> Result<Vec<SimilarityHistogram>> {
    if a.config != b.config {
        return Err(Error::Config("compared models have different configurations".into()));
    }
    if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > a.config.blocks) {
        return Err(Error::InvalidArgument(format!("layer {l} is outside 1..={}", a.config.blocks)));
    }
    let pairs = data
        .par_iter()
        .map(|w| {
            let (_, ta) = predict_traced(a, w, &ForwardOptions::eval())?;
            let (_, tb) = predict_traced(b, w, &ForwardOptions::eval())?;
            Ok(layers
                .iter()
                .map(|&l| cosine(ta.block_outputs[l - 1].as_slice(), tb.block_outputs[l - 1].as_slice()))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(layers
        .iter()
        .enumerate()
        .map(|(j, &l)| SimilarityHistogram::new(l, pairs.iter().map(|p| p[j]).collect(), bins, label))
        .collect())
}

/// Which pair of models a similarity study compares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimilarityMode {
    /// Two independent re-initialisations of the attention with different spreads.
    ReinitPair { std_a: f64, std_b: f64 },
    /// The given model against a copy with re-initialised attention.
    FrozenVsRandom { std: f64 },
}

pub fn similarity_study(
    state: &ModelState,
    data: &[Matrix],
    layers: &[usize],
    mode: SimilarityMode,
    seed: u64,
) -> Result<Vec<SimilarityHistogram>> {
    let (a, b, label) = match mode {
        SimilarityMode::ReinitPair { std_a, std_b } => (
            reinitialize_attention(state, 1.0, std_a, derive_seed(&[seed, 1]))?,
            reinitialize_attention(state, 1.0, std_b, derive_seed(&[seed, 2]))?,
            format!("reinit std {std_a} vs {std_b}"),
        ),
        SimilarityMode::FrozenVsRandom { std } => (
            state.clone(),
            reinitialize_attention(state, 1.0, std, derive_seed(&[seed, 1]))?,
            format!("frozen vs reinit std {std}"),
        ),
    };
    feature_similarity(&a, &b, data, layers, DEFAULT_SIMILARITY_BINS, &label)
}

/// Standard deviation used for freshly initialised weights.
pub const REINIT_STD: f64 = 0.02;

/// Redraws a seeded `ratio` fraction of all attention scalars (weights and
/// biases of every block) from `N(0, std²)`.
pub fn reinitialize_attention(state: &ModelState, ratio: f64, std: f64, seed: u64) -> Result<ModelState> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} is outside [0, 1]")));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(format!("std {std}: {e}")))?;
    let mut out = state.clone();
    let attention: Vec<usize> = out
        .names()
        .iter()
        .enumerate()
        .filter(|(_, (_, g))| *g == ParamGroup::Attention)
        .map(|(i, _)| i)
        .collect();
    let sizes: Vec<usize> = attention.iter().map(|&i| state.values()[i].len()).collect();
    let total: usize = sizes.iter().sum();
    let count = (ratio * total as f64).round() as usize;
    if count == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, total, count).into_vec();
    picked.sort_unstable();
    let mut values = out.values_mut();
    let (mut t, mut base) = (0, 0);
    for flat in picked {
        while flat >= base + sizes[t] {
            base += sizes[t];
            t += 1;
        }
        values[attention[t]].as_mut_slice()[flat - base] = normal.sample(&mut rng);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_values: Vec<f64>,
    pub metrics: MetricsReport,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedCell {
    pub axis_values: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: String,
    pub axis_columns: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<SkippedCell>,
}

impl SweepResult {
    fn new(axis: &str, columns: &[&str]) -> Self {
        Self {
            axis: axis.into(),
            axis_columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn mae_column(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.metrics.mae).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},mae,rmse,mape,score,wall_time_s\n", self.axis_columns.join(","));
        for r in &self.rows {
            let axis: Vec<String> = r.axis_values.iter().map(|v| v.to_string()).collect();
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                axis.join(","),
                m.mae,
                m.rmse,
                m.mape,
                m.score,
                r.wall_time_secs
            );
        }
        s
    }
}

/// Score units used by sweeps: RUL percent.
pub const SWEEP_SCORE_UNITS: f64 = 100.0;

fn test_metrics(state: &ModelState, samples: &[crate::ingest::Sample]) -> Result<MetricsReport> {
    let (pred, actual) = flat_predictions(state, samples)?;
    evaluate_with(&pred, &actual, MapeDenominator::Predicted, SWEEP_SCORE_UNITS)
}

/// Two-stage training after re-initialising a `ρ` fraction of the attention,
/// one row per ratio. Every ratio trains with the same seed; only the
/// re-initialisation draw depends on the ratio's position.
pub fn freeze_ratio_sweep(
    state: &ModelState,
    task: &crate::ingest::TaskData,
    ratios: &[f64],
    sft_plan: &StagePlan,
    pt_plan: &StagePlan,
    seed: u64,
) -> Result<SweepResult> {
    let mut result = SweepResult::new("freeze_ratio", &["ratio"]);
    for (i, &ratio) in ratios.iter().enumerate() {
        let started = Instant::now();
        let perturbed = reinitialize_attention(state, ratio, REINIT_STD, derive_seed(&[seed, i as u64]))?;
        let trained = two_stage(&perturbed, task, sft_plan, pt_plan, seed)?;
        let metrics = test_metrics(&trained.after_pt, &task.test_samples)?;
        log::info!("freeze ratio {ratio}: mae {:.5}", metrics.mae);
        result.rows.push(SweepRow {
            axis_values: vec![ratio],
            metrics,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok(result)
}

/// Everything needed to rebuild a task when lookback or horizon change.
#[derive(Debug, Clone)]
pub struct TaskInputs {
    pub spec: TaskSpec,
    pub features: HashMap<BearingRef, FeatureMap>,
    pub labels: HashMap<BearingRef, RulSeries>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AblationGrid {
    BlockCount(Vec<usize>),
    /// `(patch size, stride)` cells.
    PatchGrid(Vec<(usize, usize)>),
    Horizon(Vec<usize>),
}

impl AblationGrid {
    fn cells(&self, base: &ModelConfig) -> Vec<(Vec<f64>, ModelConfig)> {
        match self {
            AblationGrid::BlockCount(v) => v
                .iter()
                .map(|&b| (vec![b as f64], ModelConfig { blocks: b, ..base.clone() }))
                .collect(),
            AblationGrid::PatchGrid(v) => v
                .iter()
                .map(|&(p, s)| {
                    (
                        vec![p as f64, s as f64],
                        ModelConfig {
                            patch_size: p,
                            patch_stride: s,
                            ..base.clone()
                        },
                    )
                })
                .collect(),
            AblationGrid::Horizon(v) => v
                .iter()
                .map(|&t| (vec![t as f64], ModelConfig { horizon: t, ..base.clone() }))
                .collect(),
        }
    }

    fn names(&self) -> (&'static str, &'static [&'static str]) {
        match self {
            AblationGrid::BlockCount(_) => ("block_count", &["blocks"]),
            AblationGrid::PatchGrid(_) => ("patch_grid", &["patch_size", "patch_stride"]),
            AblationGrid::Horizon(_) => ("horizon", &["horizon"]),
        }
    }
}

/// Trains and evaluates one configuration per grid cell, all with `seed`.
/// Cells that cannot be built (patch longer than the lookback, bearings too
/// short for the horizon) are skipped and logged.
pub fn ablate(
    base: &ModelConfig,
    factory: &dyn Fn(&ModelConfig) -> Result<ModelState>,
    inputs: &TaskInputs,
    grid: &AblationGrid,
    sft_plan: &StagePlan,
    pt_plan: &StagePlan,
    seed: u64,
) -> Result<SweepResult> {
    let (axis, columns) = grid.names();
    let mut result = SweepResult::new(axis, columns);
    for (axis_values, cfg) in grid.cells(base) {
        let skip = |reason: String, result: &mut SweepResult| {
            log::warn!("{axis} cell {axis_values:?} skipped: {reason}");
            result.skipped.push(SkippedCell {
                axis_values: axis_values.clone(),
                reason,
            });
        };
        if cfg.patch_size > cfg.lookback {
            skip(format!("patch size {} exceeds lookback {}", cfg.patch_size, cfg.lookback), &mut result);
            continue;
        }
        if let Err(e) = cfg.validate() {
            skip(e.to_string(), &mut result);
            continue;
        }
        let spec = TaskSpec {
            lookback: cfg.lookback,
            horizon: cfg.horizon,
            ..inputs.spec.clone()
        };
        let task = match build_task(&spec, &inputs.features, &inputs.labels) {
            Ok(t) => t,
            Err(e @ (Error::Config(_) | Error::InvalidArgument(_))) => {
                skip(e.to_string(), &mut result);
                continue;
            }
            Err(e) => return Err(e),
        };
        let started = Instant::now();
        let state = factory(&cfg)?;
        let trained = two_stage(&state, &task, sft_plan, pt_plan, seed)?;
        let metrics = test_metrics(&trained.after_pt, &task.test_samples)?;
        log::info!("{axis} {axis_values:?}: score {:.3}, mae {:.5}", metrics.score, metrics.mae);
        result.rows.push(SweepRow {
            axis_values,
            metrics,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok(result)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            idx[i..=j].iter().for_each(|&k| r[k] = avg);
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

pub fn histograms_csv(hists: &[SimilarityHistogram]) -> String {
    let mut s = String::from("layer,comparison,bin_lo,bin_hi,count\n");
    for h in hists {
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                h.layer_index,
                h.comparison_label,
                h.bin_edges[i],
                h.bin_edges[i + 1],
                c
            );
        }
    }
    s
}

pub fn projection_csv(labels: &[String], points: &Matrix) -> String {
    let mut s = String::from("label,pc1,pc2\n");
    for (r, l) in labels.iter().enumerate() {
        let _ = writeln!(s, "{l},{},{}", points[(r, 0)], points[(r, 1)]);
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
