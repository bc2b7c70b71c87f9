//! Acceptance criteria. Runs without the libtest harness so every criterion
//! prints its own PASS/FAIL line; the process fails if any criterion fails.
//!
//! Criterion 12 needs real recordings and is skipped unless
//! `RUL_FEMTO_ROOT` and/or `RUL_XJTU_ROOT` point at them.

mod common;

use std::f64::consts::{E, PI};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rul_core::analysis::{fit_pca, pca_substitute};
use rul_core::lspr::{detect_fpt, patch, patch_count, RmsSeries, StftConfig, Stft};
use rul_core::metrics::{mae, mape, phm_score, phm_term, rmse, MapeDenominator};
use rul_core::model::{rin_denormalize, rin_normalize, RinStats};
use rul_core::model::{
    pca_attention_output, predict_traced, rotary_scores, ForwardOptions, ModelConfig, ModelState, RinParams, Stage,
};
use rul_core::pipeline::{self, RunConfig};
use rul_core::synth::SynthConfig;
use rul_core::tensor::Matrix;
use rul_core::training::{
    flat_predictions, gradient_check, partition_parameters, partition_with, prompt_tune, sft, tensor_digest,
    two_stage, PT_GROUPS, SFT_GROUPS,
};

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ------------------------------------------------------------------ 1

fn rotary_invariance() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for d in [4usize, 16, 64] {
        for _ in 0..1000 {
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (m, n, shift) = (rng.random_range(0..512), rng.random_range(0..512), rng.random_range(0..512));
            let diff = (rotary_scores(&q, m, &k, n) - rotary_scores(&q, m + shift, &k, n + shift)).abs();
            worst = worst.max(diff);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-9 && elapsed < Duration::from_secs(5),
        format!("max |Δscore| {worst:.2e} (tol 1e-9), {:.2} s (limit 5 s)", elapsed.as_secs_f64()),
    )
}

// ------------------------------------------------------------------ 2

fn rin_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = ModelConfig::default().epsilon;
    let (mut round, mut shift, mut affine) = (0.0f64, 0.0f64, 0.0f64);
    let mut windows = 0;
    while windows < 1000 {
        let (l, d) = (rng.random_range(2..80), rng.random_range(1..8));
        let mut x = Matrix::zeros(l, d);
        for c in 0..d {
            let (mu, sd) = (rng.random_range(-10.0..10.0), 10f64.powf(rng.random_range(-3.0..1.0)));
            for r in 0..l {
                x[(r, c)] = mu + sd * rng.random_range(-1.7..1.7);
            }
        }
        let stats = RinStats::of(&x);
        if stats.variance.iter().any(|&v| v < 1e-6) {
            continue;
        }
        windows += 1;
        let params = RinParams {
            gamma: Matrix::from_vec(1, d, (0..d).map(|_| rng.random_range(0.5..2.0)).collect()),
            beta: Matrix::from_vec(1, d, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()),
        };
        let (y, stats) = rin_normalize(&x, &params, eps).unwrap();
        let back = rin_denormalize(&y, &params, &stats, eps).unwrap();
        round = round.max(back.max_abs_diff(&x));
        let offsets: Vec<f64> = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect();
        let scales: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.random_range(-1.0..1.0))).collect();
        let (mut shifted, mut rescaled) = (x.clone(), x.clone());
        for r in 0..l {
            for c in 0..d {
                shifted[(r, c)] += offsets[c];
                rescaled[(r, c)] = scales[c] * x[(r, c)] + offsets[c];
            }
        }
        let (ys, _) = rin_normalize(&shifted, &params, eps).unwrap();
        shift = shift.max(ys.max_abs_diff(&y));
        // Rescaling is exact only without the variance guard, which does not
        // scale with the data.
        let (y0, _) = rin_normalize(&x, &params, 0.0).unwrap();
        let (ya, _) = rin_normalize(&rescaled, &params, 0.0).unwrap();
        affine = affine.max(ya.max_abs_diff(&y0));
    }
    outcome(
        round <= 1e-9 && shift <= 1e-9 && affine <= 1e-9,
        format!(
            "round trip {round:.2e}, shift invariance {shift:.2e}, affine invariance (eps 0) {affine:.2e} over {windows} windows (tol 1e-9)"
        ),
    )
}

// ------------------------------------------------------------------ 3

fn gradient_verification() -> Outcome {
    let start = Instant::now();
    let config = ModelConfig {
        lookback: 9,
        ..ModelConfig::tiny()
    };
    let shape = (config.hidden, config.blocks, config.heads, config.n_patches(), config.patch_size, config.feature_dim, config.horizon);
    if shape != (8, 2, 2, 5, 3, 2, 4) {
        return outcome(false, format!("tiny config resolved to {shape:?}"));
    }
    let state = perturbed_state(config.clone(), 3);
    let batch = random_samples(&config, 2, 3);
    let report = gradient_check(&state, &batch, 1e-5).unwrap();
    let elapsed = start.elapsed();
    outcome(
        report.max_rel_error < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "max rel error {:.2e} over {} tunable scalars (tol 1e-4), {:.1} s (limit 60 s)",
            report.max_rel_error,
            report.checked_scalars,
            elapsed.as_secs_f64()
        ),
    )
}

// ------------------------------------------------------------------ 4

fn freeze_enforcement() -> Outcome {
    let task = synth_task(&quick_synth(4));
    let initial = ModelState::new(small_model(), 4).unwrap();
    let (sft_plan, pt_plan) = plans(5);
    let (after_sft, _) = sft(&initial, &task.sft_samples, &sft_plan, 4).unwrap();
    let (after_pt, _) = prompt_tune(&after_sft, &task.prompt_samples, &pt_plan, 4).unwrap();

    let frozen = partition_parameters(&initial, Stage::Sft).frozen;
    let frozen_kept = tensor_digest(&initial, &frozen) == tensor_digest(&after_sft, &frozen)
        && tensor_digest(&initial, &frozen) == tensor_digest(&after_pt, &frozen);
    // Byte comparison as a second route, independent of the digest.
    let bytes = |s: &ModelState, idx: &[usize]| -> Vec<u64> {
        idx.iter()
            .flat_map(|&i| s.values()[i].as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let frozen_bytes = bytes(&initial, &frozen) == bytes(&after_pt, &frozen);

    let sft_only: Vec<_> = SFT_GROUPS.iter().filter(|g| !PT_GROUPS.contains(g)).copied().collect();
    let exclusive = partition_with(&initial, &sft_only).tunable;
    let exclusive_kept = bytes(&after_sft, &exclusive) == bytes(&after_pt, &exclusive);
    let sft_moved = bytes(&initial, &exclusive) != bytes(&after_sft, &exclusive);
    outcome(
        frozen_kept && frozen_bytes && exclusive_kept && sft_moved,
        format!(
            "{} frozen tensors unchanged: {}; {} SFT-only tensors unchanged by PT: {}",
            frozen.len(),
            frozen_kept && frozen_bytes,
            exclusive.len(),
            exclusive_kept
        ),
    )
}

// ------------------------------------------------------------------ 5

fn patching_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0;
    for _ in 0..100 {
        let l = rng.random_range(1..=200);
        let p = rng.random_range(1..=l);
        let s = rng.random_range(1..=l);
        let x: Vec<f64> = (0..l).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut padded = x.clone();
        padded.extend(std::iter::repeat_n(x[l - 1], s));
        let mut brute = Vec::new();
        let mut start = 0;
        while start + p <= padded.len() {
            brute.push(padded[start..start + p].to_vec());
            start += s;
        }
        let got = patch(&x, p, s).unwrap();
        let formula = (l - p) / s + 2;
        let rows: Vec<Vec<f64>> = (0..got.rows()).map(|r| got.row(r).to_vec()).collect();
        if patch_count(l, p, s) != formula || got.rows() != formula || rows != brute {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{failures} of 100 random (L, P, S) mismatched"))
}

// ------------------------------------------------------------------ 6

fn brute_force_fpt(x: &[f64]) -> Option<usize> {
    // Population statistics of everything before t, at least three points.
    (3..x.len().saturating_sub(2)).find(|&t| {
        let hist = &x[..t];
        let mu = hist.iter().sum::<f64>() / t as f64;
        let sigma = (hist.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / t as f64).sqrt();
        let cv = mu + 3.0 * sigma;
        x[t] > cv && x[t + 1] > cv && x[t + 2] > cv
    })
}

fn fpt_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut mismatches, mut spike_triggers) = (0, 0);
    for _ in 0..50 {
        let n = rng.random_range(30..200);
        let step_at = rng.random_range(10..n - 5);
        let step = rng.random_range(0.5..3.0);
        let x: Vec<f64> = (0..n)
            .map(|i| 1.0 + rng.random_range(-0.05..0.05) + if i >= step_at { step } else { 0.0 })
            .collect();
        if detect_fpt(&RmsSeries(x.clone())).unwrap().fpt_index != brute_force_fpt(&x) {
            mismatches += 1;
        }
        let mut spiky: Vec<f64> = (0..n).map(|_| 1.0 + rng.random_range(-0.05..0.05)).collect();
        spiky[step_at] += 5.0;
        if detect_fpt(&RmsSeries(spiky)).unwrap().fpt_index == Some(step_at) {
            spike_triggers += 1;
        }
    }
    outcome(
        mismatches == 0 && spike_triggers == 0,
        format!("{mismatches} of 50 step series mismatched the brute-force scan; {spike_triggers} spikes triggered"),
    )
}

// ------------------------------------------------------------------ 7

fn naive_energy(signal: &[f64], frame: usize, stride: usize) -> Vec<Vec<f64>> {
    let n_frames = signal.len() / stride + 1;
    let half = frame / 2;
    (0..n_frames)
        .map(|f| {
            let seg: Vec<f64> = (0..frame)
                .map(|i| {
                    let idx = (f * stride + i) as isize - half as isize;
                    let w = 0.5 * (1.0 - (2.0 * PI * i as f64 / frame as f64).cos());
                    signal[idx.clamp(0, signal.len() as isize - 1) as usize] * w
                })
                .collect();
            (1..=frame / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (t, v) in seg.iter().enumerate() {
                        // Reduce the phase index first to keep the angle exact.
                        let angle = -2.0 * PI * ((k * t) % frame) as f64 / frame as f64;
                        re += v * angle.cos();
                        im += v * angle.sin();
                    }
                    re * re + im * im
                })
                .collect()
        })
        .collect()
}

fn stft_oracle() -> Outcome {
    let cfg = StftConfig::default();
    let stft = Stft::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut shape = (0, 0);
    for _ in 0..3 {
        let signal: Vec<f64> = (0..2560).map(|_| rng.random_range(-1.0..1.0)).collect();
        let spec = stft.energy(&signal).unwrap();
        shape = (spec.n_frames(), spec.n_bins());
        let oracle = naive_energy(&signal, cfg.frame_len(), cfg.stride_len());
        for (f, row) in oracle.iter().enumerate() {
            for (b, &o) in row.iter().enumerate() {
                worst = worst.max((spec.energies[(f, b)] - o).abs() / o.abs().max(1e-300));
            }
        }
    }
    outcome(
        shape == (11, 256) && worst <= 1e-8,
        format!("shape {}x{} (expected 11x256), max relative deviation from naive DFT {worst:.2e} (tol 1e-8)", shape.0, shape.1),
    )
}

// ------------------------------------------------------------------ 8

fn oracle_metrics(p: &[f64], a: &[f64]) -> (f64, f64, f64, f64) {
    let n = p.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut pct = 0.0;
    let mut score = 0.0;
    for i in 0..p.len() {
        let d = p[i] - a[i];
        abs_sum += d.abs();
        sq_sum += d * d;
        pct += (d / p[i]).abs();
        score += if d < 0.0 { (-d / 13.0).exp() - 1.0 } else { (d / 10.0).exp() - 1.0 };
    }
    (abs_sum / n, (sq_sum / n).sqrt(), 100.0 * pct / n, score)
}

fn metrics_dual() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1.0);
    for _ in 0..1000 {
        let n = rng.random_range(1..50);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..30.0)).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..30.0)).collect();
        let (m1, r1, p1, s1) = oracle_metrics(&p, &a);
        worst = worst
            .max(rel(mae(&p, &a).unwrap(), m1))
            .max(rel(rmse(&p, &a).unwrap(), r1))
            .max(rel(mape(&p, &a, MapeDenominator::Predicted).unwrap(), p1))
            .max(rel(phm_score(&p, &a).unwrap(), s1));
    }
    let late = (phm_score(&[10.0], &[0.0]).unwrap() - (E - 1.0)).abs();
    let early = (phm_score(&[0.0], &[13.0]).unwrap() - (E - 1.0)).abs();
    let asym_fail = (0..100)
        .filter(|_| {
            let x = rng.random_range(1e-3..100.0);
            phm_term(x) <= phm_term(-x)
        })
        .count();
    outcome(
        worst <= 1e-12 && late <= 1e-12 && early <= 1e-12 && asym_fail == 0,
        format!(
            "dual-implementation deviation {worst:.2e} (tol 1e-12); |score(+10) − (e−1)| {late:.1e}, |score(−13) − (e−1)| {early:.1e}; asymmetry violations {asym_fail}/100"
        ),
    )
}

// ------------------------------------------------------------------ 9

/// Top-`k` eigenvectors and the full descending spectrum of the sample
/// covariance, computed with nalgebra.
fn oracle_basis(rows: &[Vec<f64>], k: usize) -> (Vec<f64>, DMatrix<f64>, Vec<f64>) {
    let (n, d) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1) as f64;
            }
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = DMatrix::<f64>::zeros(d, k);
    for (c, &o) in order.iter().take(k).enumerate() {
        basis.set_column(c, &eig.eigenvectors.column(o));
    }
    let values = order.iter().map(|&o| eig.eigenvalues[o]).collect();
    (mean, basis, values)
}

/// Largest deviation of `basis` from `oracle`, each column compared up to
/// sign. Columns whose eigenvalue is not separated from its neighbours are
/// only defined up to rotation and are skipped; `all_values` is the full
/// descending spectrum.
fn basis_deviation(basis: &Matrix, oracle: &DMatrix<f64>, all_values: &[f64]) -> (f64, usize) {
    let gap = 1e-6 * all_values[0].abs().max(1e-300);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for c in 0..oracle.ncols() {
        let isolated = (c == 0 || all_values[c - 1] - all_values[c] > gap)
            && all_values.get(c + 1).is_none_or(|next| all_values[c] - next > gap);
        if !isolated {
            continue;
        }
        compared += 1;
        let col = basis.column(c);
        let same: f64 = col.iter().enumerate().map(|(i, v)| (v - oracle[(i, c)]).abs()).fold(0.0, f64::max);
        let flip: f64 = col.iter().enumerate().map(|(i, v)| (v + oracle[(i, c)]).abs()).fold(0.0, f64::max);
        worst = worst.max(same.min(flip));
    }
    (worst, compared)
}

fn pca_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_basis: f64 = 0.0;
    let mut worst_proj: f64 = 0.0;
    let mut compared = 0;
    // Raw calibration sets with well separated variances.
    for d in [2usize, 5, 8, 16, 32] {
        let k = rng.random_range(1..=d);
        let scales: Vec<f64> = (0..d).map(|j| 3.0 * 0.8f64.powi(j as i32)).collect();
        let mixing = gaussian_matrix(&mut rng, d, d, 1.0);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let z: Vec<f64> = scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect();
                (0..d).map(|j| (0..d).map(|i| z[i] * mixing[(i, j)]).sum()).collect()
            })
            .collect();
        let fitted = fit_pca(&Matrix::from_rows(&rows), k).unwrap();
        let (_, basis, values) = oracle_basis(&rows, k);
        let (dev, n) = basis_deviation(&fitted.basis, &basis, &values);
        worst_basis = worst_basis.max(dev);
        compared += n;
        for (a, b) in fitted.eigenvalues.iter().zip(&values) {
            worst_basis = worst_basis.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    // Substitution inside a model: block inputs traced from the original.
    for hidden in [8usize, 16, 32] {
        let config = ModelConfig {
            hidden,
            heads: 2,
            ..ModelConfig::tiny()
        };
        let state = perturbed_state(config.clone(), hidden as u64);
        let calibration: Vec<Matrix> = random_samples(&config, 12, hidden as u64).into_iter().map(|s| s.input).collect();
        let substituted = pca_substitute(&state, &calibration, None).unwrap();
        let traces: Vec<_> = calibration
            .iter()
            .map(|w| predict_traced(&state, w, &ForwardOptions::eval()).unwrap().1)
            .collect();
        for b in 0..config.blocks {
            let rows: Vec<Vec<f64>> = traces
                .iter()
                .flat_map(|t| (0..t.block_inputs[b].rows()).map(|r| t.block_inputs[b].row(r).to_vec()).collect::<Vec<_>>())
                .collect();
            let k = config.head_dim();
            let (mean, basis, values) = oracle_basis(&rows, k);
            let proj = substituted.blocks[b].pca.as_ref().expect("substituted");
            let (dev, n) = basis_deviation(&proj.basis, &basis, &values);
            worst_basis = worst_basis.max(dev);
            compared += n;
            let h = &traces[0].block_inputs[b];
            let got = pca_attention_output(h, proj);
            let uut = &basis * basis.transpose();
            for r in 0..h.rows() {
                for c in 0..hidden {
                    let want: f64 = (0..hidden).map(|i| (h[(r, i)] - mean[i]) * uut[(i, c)]).sum();
                    worst_proj = worst_proj.max((got[(r, c)] - want).abs());
                }
            }
        }
    }
    outcome(
        worst_basis <= 1e-6 && worst_proj <= 1e-8,
        format!("basis/eigenvalue deviation up to sign {worst_basis:.2e} over {compared} separated components (tol 1e-6), substituted projection deviation {worst_proj:.2e} (tol 1e-8)"),
    )
}

// ----------------------------------------------------------------- 10

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let (sft_plan, pt_plan) = plans(8);
    let mut wins = 0;
    let (mut untrained_sum, mut trained_sum) = (0.0, 0.0);
    let mut min_reduction = f64::INFINITY;
    for seed in 0..10u64 {
        let synth = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let task = synth_task(&synth);
        let initial = ModelState::new(small_model(), seed).unwrap();
        let out = two_stage(&initial, &task, &sft_plan, &pt_plan, seed).unwrap();
        let test_mae = |s: &ModelState| {
            let (p, a) = flat_predictions(s, &task.test_samples).unwrap();
            mae(&p, &a).unwrap()
        };
        let (u, s, p) = (test_mae(&initial), test_mae(&out.after_sft), test_mae(&out.after_pt));
        untrained_sum += u;
        trained_sum += p;
        min_reduction = min_reduction.min(1.0 - p / u);
        if p < s {
            wins += 1;
        }
    }
    let reduction = 1.0 - trained_sum / untrained_sum;
    let elapsed = start.elapsed();
    outcome(
        reduction >= 0.30 && wins >= 8 && elapsed < Duration::from_secs(600),
        format!(
            "mean test MAE reduction {:.1}% (min per seed {:.1}%, need ≥30%); SFT+PT beat SFT-only in {wins}/10 (need ≥8); {:.0} s (limit 600 s)",
            100.0 * reduction,
            100.0 * min_reduction,
            elapsed.as_secs_f64()
        ),
    )
}

// ----------------------------------------------------------------- 11

fn run_pipeline(dir: &Path, out: &str) -> Vec<(String, Vec<u8>)> {
    let cfg_path = dir.join("run.toml");
    let overrides = vec![
        ("out_dir".to_string(), format!("\"{out}\"")),
        ("sft.epochs".to_string(), "3".to_string()),
        ("pt.epochs".to_string(), "3".to_string()),
    ];
    let cfg = RunConfig::load(&cfg_path, &overrides).unwrap();
    pipeline::featurize(&cfg).unwrap();
    pipeline::train(&cfg).unwrap();
    let mut files: Vec<_> = pipeline::predict(&cfg, Stage::Pt)
        .unwrap()
        .into_iter()
        .chain(pipeline::predict(&cfg, Stage::Sft).unwrap())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        samples_per_snapshot: 1024,
        min_snapshots: 40,
        max_snapshots: 60,
        ..SynthConfig::default()
    };
    pipeline::synth(dir.path(), &synth).unwrap();
    let a = run_pipeline(dir.path(), "run-a");
    let b = run_pipeline(dir.path(), "run-b");
    let bytes: usize = a.iter().map(|(_, v)| v.len()).sum();
    outcome(
        !a.is_empty() && a == b,
        format!("{} prediction files ({bytes} bytes) byte-identical across two runs: {}", a.len(), a == b),
    )
}

// ----------------------------------------------------------------- 12

fn real_data() -> Option<Outcome> {
    let roots: Vec<(&str, String)> = [("femto", "RUL_FEMTO_ROOT"), ("xjtu", "RUL_XJTU_ROOT")]
        .into_iter()
        .filter_map(|(ds, var)| std::env::var(var).ok().map(|r| (ds, r)))
        .collect();
    if roots.is_empty() {
        return None;
    }
    // Full-size training is opt-in; by default one epoch per stage proves
    // the tasks run end to end.
    let full = std::env::var("RUL_ACCEPT_FULL").is_ok_and(|v| v == "1");
    let mut lines = Vec::new();
    let mut pass = true;
    for (dataset, root) in &roots {
        let dir_template = std::env::var(format!("RUL_{}_DIR", dataset.to_uppercase())).unwrap_or_else(|_| "{bearing}".into());
        for task in rul_core::ingest::TaskSpec::PRESETS.iter().filter(|t| t.starts_with(dataset)) {
            let out = tempfile::tempdir().unwrap();
            let text = format!(
                "seed = 0\nout_dir = {out:?}\n[datasets.{dataset}]\nroot = {root:?}\nschema = \"{dataset}\"\nbearing_dir = {dir_template:?}\n[task]\npreset = \"{task}\"\n",
                out = out.path().to_string_lossy()
            );
            let mut overrides = Vec::new();
            if !full {
                overrides.push(("sft.epochs".to_string(), "1".to_string()));
                overrides.push(("pt.epochs".to_string(), "1".to_string()));
            }
            let result = RunConfig::from_toml(&text, Path::new("."), &overrides).and_then(|cfg| {
                pipeline::featurize(&cfg)?;
                pipeline::train(&cfg)?;
                pipeline::predict(&cfg, Stage::Pt)?;
                pipeline::evaluate(&cfg, Stage::Pt)
            });
            match result {
                Ok(reports) => {
                    let overall = &reports.last().expect("overall report").1;
                    lines.push(format!("{task}: RMSE {:.4}, score {:.2}", overall.rmse, overall.score));
                }
                Err(e) => {
                    pass = false;
                    lines.push(format!("{task}: {e}"));
                }
            }
        }
    }
    Some(outcome(pass, lines.join("; ")))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("rotary relative-position invariance", rotary_invariance),
        ("instance normalisation round trip", rin_round_trip),
        ("analytic vs finite-difference gradients", gradient_verification),
        ("frozen tensors untouched by both stages", freeze_enforcement),
        ("patching against brute force", patching_oracle),
        ("FPT against brute-force scan", fpt_oracle),
        ("STFT shape and naive DFT", stft_oracle),
        ("metrics dual implementation", metrics_dual),
        ("PCA substitution against eigendecomposition", pca_oracle),
        ("scaled cross-condition transfer", end_to_end),
        ("pipeline determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        failed += usize::from(!o.pass);
        println!("criterion {:>2} {}: {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    match real_data() {
        Some(o) => {
            failed += usize::from(!o.pass);
            println!("criterion 12 {}: real-data task presets: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        }
        None => println!("criterion 12 SKIP: real-data task presets: set RUL_FEMTO_ROOT and/or RUL_XJTU_ROOT to run"),
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
