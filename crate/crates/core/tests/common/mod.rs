#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rul_core::analysis::TaskInputs;
use rul_core::ingest::{build_task, BearingRef, Sample, TaskData};
use rul_core::model::{ModelConfig, ModelState};
use rul_core::pipeline::{featurize_series, LsprConfig};
use rul_core::synth::{generate, SynthConfig};
use rul_core::tensor::Matrix;
use rul_core::training::StagePlan;

pub const D_OUT: usize = 16;
pub const LOOKBACK: usize = 12;
pub const HORIZON: usize = 4;

/// The small transformer used for end-to-end experiments.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        blocks: 2,
        heads: 2,
        patch_size: 4,
        patch_stride: 2,
        lookback: LOOKBACK,
        horizon: HORIZON,
        feature_dim: D_OUT,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn plans(epochs: usize) -> (StagePlan, StagePlan) {
    let sft = StagePlan {
        epochs,
        learning_rate: 1e-3,
        batch_size: 16,
        ..StagePlan::sft()
    };
    let pt = StagePlan {
        epochs,
        learning_rate: 1e-3,
        batch_size: 16,
        ..StagePlan::pt()
    };
    (sft, pt)
}

/// Synthetic transfer task built in memory.
pub fn synth_inputs(cfg: &SynthConfig) -> TaskInputs {
    let lspr = LsprConfig {
        d_out: D_OUT,
        ..LsprConfig::default()
    };
    let mut features = HashMap::new();
    let mut labels = HashMap::new();
    for b in generate(cfg).unwrap() {
        let f = featurize_series(&b.series, &lspr).unwrap();
        features.insert(b.bearing.clone(), f.features);
        labels.insert(b.bearing, f.labels);
    }
    TaskInputs {
        spec: cfg.task_spec(LOOKBACK, HORIZON),
        features,
        labels,
    }
}

pub fn synth_task(cfg: &SynthConfig) -> TaskData {
    let inputs = synth_inputs(cfg);
    build_task(&inputs.spec, &inputs.features, &inputs.labels).unwrap()
}

/// A fixture small enough for quick tests.
pub fn quick_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        source_bearings: 3,
        min_snapshots: 70,
        max_snapshots: 90,
        samples_per_snapshot: 1024,
        ..SynthConfig::default()
    }
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let normal = rand_distr::Normal::new(0.0, scale).unwrap();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(normal)).collect())
}

/// Random state whose every tensor (biases, norms and RIN affine included)
/// is perturbed away from its initial value.
pub fn perturbed_state(config: ModelConfig, seed: u64) -> ModelState {
    let mut state = ModelState::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for m in state.values_mut() {
        for v in m.as_mut_slice() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    state
}

pub fn random_samples(config: &ModelConfig, count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| Sample {
            bearing: BearingRef::new("rand", format!("1-{i}")),
            start: 0,
            input: gaussian_matrix(&mut rng, config.lookback, config.feature_dim, 1.0),
            label: (0..config.horizon).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect()
}
