//! Two-stage fine-tuning: SFT on source-condition windows, then prompt
//! tuning on the few target-condition windows.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::{Sample, TaskData};
use crate::model::{forward_graph, ForwardOptions, ModelState, ParamGroup, Stage};
use crate::tensor::Matrix;

/// Groups updated in SFT.
pub const SFT_GROUPS: [ParamGroup; 5] = [
    ParamGroup::RinAffine,
    ParamGroup::TokenConv,
    ParamGroup::Rotary,
    ParamGroup::LayerNorm,
    ParamGroup::Head,
];

/// Groups updated in prompt tuning.
pub const PT_GROUPS: [ParamGroup; 2] = [ParamGroup::LayerNorm, ParamGroup::Head];

pub fn default_groups(stage: Stage) -> Vec<ParamGroup> {
    match stage {
        Stage::Sft => SFT_GROUPS.to_vec(),
        Stage::Pt => PT_GROUPS.to_vec(),
        Stage::Initial => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: Stage,
    pub tunable_groups: Vec<ParamGroup>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl StagePlan {
    /// 64 epochs, lr 1e-5, batch 50.
    pub fn sft() -> Self {
        Self {
            stage: Stage::Sft,
            tunable_groups: SFT_GROUPS.to_vec(),
            epochs: 64,
            learning_rate: 1e-5,
            batch_size: 50,
        }
    }

    /// 16 epochs, lr 1e-5, batch 50.
    pub fn pt() -> Self {
        Self {
            stage: Stage::Pt,
            tunable_groups: PT_GROUPS.to_vec(),
            epochs: 16,
            learning_rate: 1e-5,
            batch_size: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::Initial {
            return Err(Error::Config("a stage plan must be sft or pt".into()));
        }
        let allowed = default_groups(self.stage);
        if let Some(g) = self.tunable_groups.iter().find(|g| !allowed.contains(g)) {
            return Err(Error::Config(format!(
                "group {g:?} is not tunable in the {} stage",
                self.stage.name()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.learning_rate)));
        }
        Ok(())
    }
}

/// Tensor indices (canonical order) split into frozen and tunable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub frozen: Vec<usize>,
    pub tunable: Vec<usize>,
}

impl Partition {
    pub fn tunable_mask(&self, len: usize) -> Vec<bool> {
        let mut m = vec![false; len];
        self.tunable.iter().for_each(|&i| m[i] = true);
        m
    }
}

/// A tensor is tunable when its group is selected and its freeze flag is off.
pub fn partition_with(state: &ModelState, groups: &[ParamGroup]) -> Partition {
    let (mut frozen, mut tunable) = (Vec::new(), Vec::new());
    for (i, t) in state.tensors().iter().enumerate() {
        if groups.contains(&t.group) && !t.frozen {
            tunable.push(i);
        } else {
            frozen.push(i);
        }
    }
    Partition { frozen, tunable }
}

pub fn partition_parameters(state: &ModelState, stage: Stage) -> Partition {
    partition_with(state, &default_groups(stage))
}

/// SHA-256 over name, shape and little-endian values of the given tensors.
pub fn tensor_digest(state: &ModelState, indices: &[usize]) -> String {
    let values = state.values();
    let mut h = Sha256::new();
    for &i in indices {
        let m = values[i];
        h.update(state.names()[i].0.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn state_digest(state: &ModelState) -> String {
    tensor_digest(state, &(0..state.tensor_count()).collect::<Vec<_>>())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[(usize, usize)]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update of `params` given `grads` (same order as construction).
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let ps = p.as_mut_slice();
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            for i in 0..ps.len() {
                let gi = g.as_slice()[i];
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gi;
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gi * gi;
                if self.learning_rate != 0.0 {
                    let mhat = ms[i] / c1;
                    let vhat = vs[i] / c2;
                    ps[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub stage: Stage,
    /// Mean per-sample MSE of each epoch.
    pub epoch_losses: Vec<f64>,
    pub samples: usize,
    pub updated_digest: String,
    pub frozen_digest_before: String,
    pub frozen_digest: String,
    pub tunable_tensors: Vec<String>,
    pub wall_time_secs: f64,
}

/// Mixes seed components into one 64-bit value (splitmix64 finaliser).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut x: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

/// Loss and tunable-tensor gradients for one sample.
pub fn sample_gradient(
    state: &ModelState,
    sample: &Sample,
    mask: &[bool],
    tunable: &[usize],
    opts: &ForwardOptions,
) -> Result<(f64, Vec<Matrix>)> {
    if sample.label.len() != state.config.horizon {
        return Err(Error::Shape(format!(
            "label has {} steps, model predicts {}",
            sample.label.len(),
            state.config.horizon
        )));
    }
    let g = forward_graph(state, &sample.input, mask, opts)?;
    let mut tape = g.tape;
    let target = Matrix::row_vector(sample.label.clone());
    let loss = tape.mse(g.output, &target);
    let value = tape.value(loss)[(0, 0)];
    if tunable.is_empty() {
        return Ok((value, Vec::new()));
    }
    let mut grads = tape.backward(loss);
    let values = state.values();
    let out = tunable
        .iter()
        .map(|&i| {
            grads
                .take(g.params[i])
                .unwrap_or_else(|| Matrix::zeros(values[i].rows(), values[i].cols()))
        })
        .collect();
    Ok((value, out))
}

/// Mean loss and mean gradient over `batch`. Samples run in parallel; the
/// reduction is a sequential sum in sample order.
fn batch_gradient(
    state: &ModelState,
    batch: &[(usize, &Sample)],
    mask: &[bool],
    tunable: &[usize],
    seed_of: impl Fn(usize) -> u64 + Sync,
) -> Result<(f64, Vec<f64>, Vec<Matrix>)> {
    let results: Vec<(f64, Vec<Matrix>)> = batch
        .par_iter()
        .map(|&(i, s)| sample_gradient(state, s, mask, tunable, &ForwardOptions::train(seed_of(i))))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut losses = Vec::with_capacity(batch.len());
    let mut sum: Option<Vec<Matrix>> = None;
    for (loss, grads) in results {
        losses.push(loss);
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let grads = sum.unwrap_or_default().into_iter().map(|g| g.scale(1.0 / n)).collect();
    Ok((losses.iter().sum::<f64>() / n, losses, grads))
}

fn run_stage(state: &ModelState, data: &[Sample], plan: &StagePlan, seed: u64) -> Result<(ModelState, TrainReport)> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("{} stage has no training samples", plan.stage.name())));
    }
    let started = Instant::now();
    let part = partition_with(state, &plan.tunable_groups);
    let mask = part.tunable_mask(state.tensor_count());
    let frozen_before = tensor_digest(state, &part.frozen);
    let mut state = state.clone();
    let shapes: Vec<(usize, usize)> = part.tunable.iter().map(|&i| state.values()[i].shape()).collect();
    let mut adam = Adam::new(plan.learning_rate, &shapes);
    let stage_salt = plan.stage as u64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(plan.epochs);

    for epoch in 0..plan.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, stage_salt, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(plan.batch_size).enumerate() {
            let batch: Vec<(usize, &Sample)> = chunk.iter().map(|&i| (i, &data[i])).collect();
            let seed_of = |i: usize| derive_seed(&[seed, stage_salt, epoch as u64, i as u64]);
            let (loss, losses, grads) = batch_gradient(&state, &batch, &mask, &part.tunable, seed_of)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "{} epoch {epoch} batch {b}: loss {loss} is not finite",
                    plan.stage.name()
                )));
            }
            total += losses.iter().sum::<f64>();
            if !part.tunable.is_empty() {
                let mut params: Vec<&mut Matrix> = state
                    .values_mut()
                    .into_iter()
                    .zip(&mask)
                    .filter_map(|(v, &t)| t.then_some(v))
                    .collect();
                adam.step(&mut params, &grads);
            }
        }
        let mean = total / data.len() as f64;
        log::info!("{} epoch {}/{}: loss {mean:.6e}", plan.stage.name(), epoch + 1, plan.epochs);
        epoch_losses.push(mean);
    }

    let frozen_after = tensor_digest(&state, &part.frozen);
    if frozen_after != frozen_before {
        return Err(Error::Numerical("frozen parameters changed during training".into()));
    }
    state.stage = plan.stage;
    let report = TrainReport {
        stage: plan.stage,
        epoch_losses,
        samples: data.len(),
        updated_digest: tensor_digest(&state, &part.tunable),
        frozen_digest_before: frozen_before,
        frozen_digest: frozen_after,
        tunable_tensors: part.tunable.iter().map(|&i| state.names()[i].0.clone()).collect(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}

/// Supervised fine-tuning on source-condition samples.
pub fn sft(state: &ModelState, data: &[Sample], plan: &StagePlan, seed: u64) -> Result<(ModelState, TrainReport)> {
    if plan.stage != Stage::Sft {
        return Err(Error::Config("sft needs an sft stage plan".into()));
    }
    run_stage(state, data, plan, seed)
}

/// Prompt tuning on target-condition samples; requires a fine-tuned state.
pub fn prompt_tune(state: &ModelState, data: &[Sample], plan: &StagePlan, seed: u64) -> Result<(ModelState, TrainReport)> {
    if plan.stage != Stage::Pt {
        return Err(Error::Config("prompt tuning needs a pt stage plan".into()));
    }
    if state.stage == Stage::Initial {
        return Err(Error::StageOrder("prompt tuning requires a state produced by sft".into()));
    }
    run_stage(state, data, plan, seed)
}

/// Mean per-sample MSE in inference mode.
pub fn mean_loss(state: &ModelState, data: &[Sample]) -> Result<f64> {
    let losses: Vec<f64> = data
        .par_iter()
        .map(|s| sample_gradient(state, s, &[], &[], &ForwardOptions::eval()).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / data.len().max(1) as f64)
}

/// Inference-mode predictions for every sample, in sample order.
pub fn predict_samples(state: &ModelState, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|s| crate::model::predict(state, &s.input, &ForwardOptions::eval()))
        .collect()
}

/// Predictions and labels of `samples`, flattened sample by sample.
pub fn flat_predictions(state: &ModelState, samples: &[Sample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let preds = predict_samples(state, samples)?;
    let pred = preds.into_iter().flatten().collect();
    let actual = samples.iter().flat_map(|s| s.label.iter().copied()).collect();
    Ok((pred, actual))
}

/// Outcome of SFT followed by prompt tuning.
#[derive(Debug, Clone)]
pub struct TwoStage {
    pub after_sft: ModelState,
    pub after_pt: ModelState,
    pub sft_report: TrainReport,
    pub pt_report: TrainReport,
}

/// Runs both stages with one seed.
pub fn two_stage(
    state: &ModelState,
    task: &TaskData,
    sft_plan: &StagePlan,
    pt_plan: &StagePlan,
    seed: u64,
) -> Result<TwoStage> {
    let (after_sft, sft_report) = sft(state, &task.sft_samples, sft_plan, seed)?;
    let (after_pt, pt_report) = prompt_tune(&after_sft, &task.prompt_samples, pt_plan, seed)?;
    Ok(TwoStage {
        after_sft,
        after_pt,
        sft_report,
        pt_report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub frozen: bool,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Largest analytic component; exactly 0 for frozen tensors.
    pub max_abs_analytic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub checked_scalars: usize,
}

/// Denominator floor of the relative error, so components that are zero
/// up to round-off do not blow up the ratio.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central finite differences `(f(x+h) − f(x−h)) / 2h` against the analytic
/// gradient of the batch loss, for every scalar of the SFT-tunable tensors.
/// Dropout is off.
pub fn gradient_check(state: &ModelState, batch: &[Sample], h: f64) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("gradient check needs at least one sample".into()));
    }
    let part = partition_parameters(state, Stage::Sft);
    let mask = part.tunable_mask(state.tensor_count());
    let indexed: Vec<(usize, &Sample)> = batch.iter().enumerate().collect();
    let eval_grads = |s: &ModelState| -> Result<(f64, Vec<Matrix>)> {
        let results: Vec<(f64, Vec<Matrix>)> = indexed
            .iter()
            .map(|(_, smp)| sample_gradient(s, smp, &mask, &part.tunable, &ForwardOptions::eval()))
            .collect::<Result<_>>()?;
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut acc: Option<Vec<Matrix>> = None;
        for (l, g) in results {
            loss += l;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| x.add_assign(y)),
            }
        }
        Ok((loss / n, acc.unwrap_or_default().into_iter().map(|g| g.scale(1.0 / n)).collect()))
    };
    let loss_of = |s: &ModelState| -> Result<f64> {
        let mut total = 0.0;
        for smp in batch {
            total += sample_gradient(s, smp, &[], &[], &ForwardOptions::eval())?.0;
        }
        Ok(total / batch.len() as f64)
    };
    let (_, analytic) = eval_grads(state)?;
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("analytic gradient is not finite".into()));
    }

    let mut entries = Vec::new();
    let mut all = Vec::new();
    for (k, &ti) in part.tunable.iter().enumerate() {
        let len = state.values()[ti].len();
        let mut probe = state.clone();
        let mut errs = Vec::with_capacity(len);
        for j in 0..len {
            let orig = state.values()[ti].as_slice()[j];
            probe.values_mut()[ti].as_mut_slice()[j] = orig + h;
            let up = loss_of(&probe)?;
            probe.values_mut()[ti].as_mut_slice()[j] = orig - h;
            let down = loss_of(&probe)?;
            probe.values_mut()[ti].as_mut_slice()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::Numerical(format!("finite difference of {} is not finite", state.names()[ti].0)));
            }
            errs.push(relative_error(analytic[k].as_slice()[j], numeric));
        }
        all.extend_from_slice(&errs);
        entries.push(GradCheckEntry {
            name: state.names()[ti].0.clone(),
            frozen: false,
            max_rel_error: errs.iter().copied().fold(0.0, f64::max),
            mean_rel_error: errs.iter().sum::<f64>() / len as f64,
            max_abs_analytic: analytic[k].as_slice().iter().map(|v| v.abs()).fold(0.0, f64::max),
        });
    }
    for &fi in &part.frozen {
        entries.push(GradCheckEntry {
            name: state.names()[fi].0.clone(),
            frozen: true,
            max_rel_error: 0.0,
            mean_rel_error: 0.0,
            max_abs_analytic: 0.0,
        });
    }
    Ok(GradCheckReport {
        max_rel_error: all.iter().copied().fold(0.0, f64::max),
        mean_rel_error: all.iter().sum::<f64>() / all.len().max(1) as f64,
        checked_scalars: all.len(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::ingest::BearingRef;
    use crate::model::ModelConfig;

    fn samples(cfg: &ModelConfig, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|k| Sample {
                bearing: BearingRef::new("t", "1"),
                start: k,
                input: Matrix::from_vec(
                    cfg.lookback,
                    cfg.feature_dim,
                    (0..cfg.lookback * cfg.feature_dim)
                        .map(|i| ((i + 3 * k) as f64 * 0.31).sin() + 0.1 * i as f64)
                        .collect(),
                ),
                label: (0..cfg.horizon).map(|t| 0.8 - 0.05 * (k + t) as f64).collect(),
            })
            .collect()
    }

    #[test]
    fn partition_covers_everything_once() {
        let s = ModelState::new(ModelConfig::tiny(), 1).unwrap();
        for stage in [Stage::Sft, Stage::Pt] {
            let p = partition_parameters(&s, stage);
            let mut all: Vec<usize> = p.frozen.iter().chain(&p.tunable).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..s.tensor_count()).collect::<Vec<_>>());
        }
        let sft = partition_parameters(&s, Stage::Sft).tunable;
        let pt = partition_parameters(&s, Stage::Pt).tunable;
        assert!(pt.iter().all(|i| sft.contains(i)));
        assert!(pt.len() < sft.len());
    }

    #[test]
    fn default_config_is_mostly_frozen() {
        let cfg = ModelConfig::default();
        let shapes = ModelState::expected_shapes(&cfg);
        let layout = crate::model::tensor_layout(cfg.blocks);
        let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
        let frozen: usize = shapes
            .iter()
            .zip(&layout)
            .filter(|(_, (_, g))| !SFT_GROUPS.contains(g))
            .map(|((r, c), _)| r * c)
            .sum();
        assert!(frozen as f64 / total as f64 >= 0.9, "{frozen}/{total}");
    }

    #[test]
    fn adam_first_step_matches_formula() {
        let mut p = Matrix::row_vector(vec![1.0, -2.0]);
        let g = Matrix::row_vector(vec![0.5, -0.25]);
        let mut adam = Adam::new(0.1, &[(1, 2)]);
        adam.step(&mut [&mut p], std::slice::from_ref(&g));
        // After one step m̂ = g and v̂ = g², so the move is lr·g/(|g|+ε).
        for (i, start) in [1.0, -2.0].iter().enumerate() {
            let gi = g.as_slice()[i];
            let expected = start - 0.1 * gi / (gi.abs() + 1e-8);
            assert!((p.as_slice()[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let cfg = ModelConfig::tiny();
        let s = ModelState::new(cfg.clone(), 2).unwrap();
        let plan = StagePlan {
            epochs: 3,
            learning_rate: 0.0,
            batch_size: 2,
            ..StagePlan::sft()
        };
        let (after, report) = sft(&s, &samples(&cfg, 5), &plan, 9).unwrap();
        assert_eq!(state_digest(&after), state_digest(&s));
        assert_eq!(report.epoch_losses.len(), 3);
        // lr 0 and no dropout: every epoch reports the same loss, equal to
        // an inference-mode evaluation.
        let eval = mean_loss(&s, &samples(&cfg, 5)).unwrap();
        for l in &report.epoch_losses {
            assert!((l - eval).abs() < 1e-10);
        }
    }

    #[test]
    fn training_is_deterministic_and_respects_freeze() {
        let mut cfg = ModelConfig::tiny();
        cfg.dropout = 0.2;
        let s = ModelState::new(cfg.clone(), 3).unwrap();
        let data = samples(&cfg, 7);
        let plan = StagePlan {
            epochs: 2,
            learning_rate: 1e-2,
            batch_size: 3,
            ..StagePlan::sft()
        };
        let (a, ra) = sft(&s, &data, &plan, 4).unwrap();
        let (b, rb) = sft(&s, &data, &plan, 4).unwrap();
        assert_eq!(state_digest(&a), state_digest(&b));
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
        assert_eq!(ra.frozen_digest, ra.frozen_digest_before);
        assert_ne!(state_digest(&a), state_digest(&s));

        let pt_plan = StagePlan {
            epochs: 2,
            learning_rate: 1e-2,
            batch_size: 3,
            ..StagePlan::pt()
        };
        let (c, _) = prompt_tune(&a, &data, &pt_plan, 4).unwrap();
        let sft_only: Vec<usize> = partition_parameters(&a, Stage::Sft)
            .tunable
            .into_iter()
            .filter(|i| !partition_parameters(&a, Stage::Pt).tunable.contains(i))
            .collect();
        assert_eq!(tensor_digest(&a, &sft_only), tensor_digest(&c, &sft_only));
        assert_eq!(c.stage, Stage::Pt);
    }

    #[test]
    fn stage_order_is_enforced() {
        let cfg = ModelConfig::tiny();
        let s = ModelState::new(cfg.clone(), 3).unwrap();
        let err = prompt_tune(&s, &samples(&cfg, 2), &StagePlan::pt(), 1).unwrap_err();
        assert!(matches!(err, Error::StageOrder(_)));
        assert!(sft(&s, &[], &StagePlan::sft(), 1).is_err());
    }

    #[test]
    fn empty_pt_group_is_a_no_op() {
        let cfg = ModelConfig::tiny();
        let mut s = ModelState::new(cfg.clone(), 3).unwrap();
        s.stage = Stage::Sft;
        let plan = StagePlan {
            tunable_groups: vec![],
            epochs: 2,
            learning_rate: 0.1,
            ..StagePlan::pt()
        };
        let (after, _) = prompt_tune(&s, &samples(&cfg, 3), &plan, 1).unwrap();
        assert_eq!(state_digest(&after), state_digest(&s));
    }

    #[test]
    fn quadratic_toy_gradient_is_exact() {
        // y = x·W on linear data; MSE is quadratic in W, so central
        // differences are exact up to round-off.
        let x = Matrix::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.1 - 0.4).collect());
        let target = x.matmul(&Matrix::from_vec(3, 1, vec![0.5, -1.0, 2.0]));
        let w = Matrix::from_vec(3, 1, vec![0.1, 0.2, -0.3]);
        let loss = |w: &Matrix| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.matmul(xv, wv);
            let l = t.mse(y, &target);
            t.value(l)[(0, 0)]
        };
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.param(w.clone());
        let y = t.matmul(xv, wv);
        let l = t.mse(y, &target);
        let g = t.backward(l);
        let h = 1e-5;
        for j in 0..3 {
            let mut up = w.clone();
            up.as_mut_slice()[j] += h;
            let mut down = w.clone();
            down.as_mut_slice()[j] -= h;
            let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
            assert!(relative_error(g.get(wv).unwrap().as_slice()[j], numeric) < 1e-8);
        }
    }

    #[test]
    fn gradient_check_reports_frozen_as_zero() {
        let cfg = ModelConfig::tiny();
        let s = ModelState::new(cfg.clone(), 5).unwrap();
        let report = gradient_check(&s, &samples(&cfg, 1), 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.entries.iter().filter(|e| e.frozen).all(|e| e.max_abs_analytic == 0.0));
    }
}
