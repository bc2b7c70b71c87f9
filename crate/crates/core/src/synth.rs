//! Synthetic run-to-failure recordings for tests and demos.
//!
//! Each bearing is quiet until a degradation onset, after which broadband
//! noise grows and periodic fault impulses ring a structural resonance. The
//! target operating condition differs from the source condition in onset
//! timing, resonance frequency, shaft speed and noise floor, so its feature
//! statistics are shifted.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{BearingRef, ColumnSchema, Snapshot, SnapshotSeries, TaskSpec};
use crate::training::derive_seed;

pub const DATASET: &str = "synth";
pub const SOURCE_CONDITION: &str = "1";
pub const TARGET_CONDITION: &str = "2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub source_bearings: usize,
    pub prompt_bearings: usize,
    pub test_bearings: usize,
    pub min_snapshots: usize,
    pub max_snapshots: usize,
    pub samples_per_snapshot: usize,
    pub sampling_rate: f64,
    /// Seconds between snapshot starts.
    pub snapshot_interval: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            source_bearings: 6,
            prompt_bearings: 1,
            test_bearings: 1,
            min_snapshots: 60,
            max_snapshots: 120,
            samples_per_snapshot: 2560,
            sampling_rate: 25_600.0,
            snapshot_interval: 10.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source_bearings == 0 || self.test_bearings == 0 {
            return Err(Error::Config("synthetic fixture needs source and test bearings".into()));
        }
        if self.min_snapshots < 20 || self.max_snapshots < self.min_snapshots {
            return Err(Error::Config(format!(
                "snapshot range {}..={} is invalid (minimum 20)",
                self.min_snapshots, self.max_snapshots
            )));
        }
        if self.samples_per_snapshot == 0 || self.sampling_rate <= 0.0 {
            return Err(Error::Config("snapshot length and sampling rate must be positive".into()));
        }
        Ok(())
    }

    /// FEMTO-style layout with this fixture's snapshot length.
    pub fn schema(&self) -> ColumnSchema {
        ColumnSchema {
            expected_samples: Some(self.samples_per_snapshot),
            ..ColumnSchema::femto()
        }
    }

    pub fn source_refs(&self) -> Vec<BearingRef> {
        (1..=self.source_bearings)
            .map(|i| BearingRef::new(DATASET, format!("{SOURCE_CONDITION}-{i}")))
            .collect()
    }

    pub fn prompt_refs(&self) -> Vec<BearingRef> {
        (1..=self.prompt_bearings)
            .map(|i| BearingRef::new(DATASET, format!("{TARGET_CONDITION}-{i}")))
            .collect()
    }

    pub fn test_refs(&self) -> Vec<BearingRef> {
        (self.prompt_bearings + 1..=self.prompt_bearings + self.test_bearings)
            .map(|i| BearingRef::new(DATASET, format!("{TARGET_CONDITION}-{i}")))
            .collect()
    }

    /// Source bearings for SFT, target bearings split into prompt and test.
    pub fn task_spec(&self, lookback: usize, horizon: usize) -> TaskSpec {
        TaskSpec {
            name: "synth-transfer".into(),
            sft_bearings: self.source_refs(),
            prompt_bearings: self.prompt_refs(),
            test_bearings: self.test_refs(),
            lookback,
            horizon,
        }
    }
}

/// Operating-condition constants.
#[derive(Debug, Clone, Copy)]
struct Condition {
    onset_range: (f64, f64),
    resonance_hz: f64,
    shaft_hz: f64,
    fault_hz: f64,
    noise: f64,
    growth: f64,
}

fn condition(id: &str) -> Condition {
    if id == SOURCE_CONDITION {
        Condition {
            onset_range: (0.55, 0.7),
            resonance_hz: 3000.0,
            shaft_hz: 30.0,
            fault_hz: 107.0,
            noise: 0.1,
            growth: 12.0,
        }
    } else {
        Condition {
            onset_range: (0.3, 0.4),
            resonance_hz: 4800.0,
            shaft_hz: 35.0,
            fault_hz: 125.0,
            noise: 0.15,
            growth: 16.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBearing {
    pub bearing: BearingRef,
    /// First degraded snapshot.
    pub onset: usize,
    pub series: SnapshotSeries,
}

/// Degradation level of snapshot `i`: 0 before onset, then a jump to 0.3
/// growing to 1 at failure.
pub fn health(i: usize, onset: usize, life: usize) -> f64 {
    if i < onset {
        return 0.0;
    }
    let span = (life - 1 - onset).max(1) as f64;
    0.3 + 0.7 * ((i - onset) as f64 / span).powf(1.5)
}

fn snapshot(cfg: &SynthConfig, cond: &Condition, h: f64, seed: u64, index: usize) -> Snapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.samples_per_snapshot;
    let fs = cfg.sampling_rate;
    let noise = Normal::new(0.0, cond.noise * (1.0 + 0.5 * h)).expect("positive std");
    let phase: f64 = rng.random_range(0.0..TAU);
    let period = fs / cond.fault_hz;
    let offset: f64 = rng.random_range(0.0..period);
    let decay = 2e-3 * fs;
    let amplitude = cond.growth * h * cond.noise;
    let mut channels = BTreeMap::new();
    for (name, gain) in [("horizontal", 1.0), ("vertical", 0.7)] {
        let signal = (0..n)
            .map(|t| {
                let shaft = 0.05 * (TAU * cond.shaft_hz * t as f64 / fs + phase).sin();
                // Time since the most recent fault impulse.
                let since = (t as f64 - offset).rem_euclid(period);
                let ring = amplitude * (-since / decay).exp() * (TAU * cond.resonance_hz * since / fs).sin();
                let v = gain * (shaft + ring) + noise.sample(&mut rng);
                // Six decimals is what the text files hold.
                (v * 1e6).round() / 1e6
            })
            .collect();
        channels.insert(name.to_string(), signal);
    }
    Snapshot { channels, index }
}

fn bearing(cfg: &SynthConfig, bearing: BearingRef, cond_id: &str, ordinal: u64) -> SynthBearing {
    let cond = condition(cond_id);
    let seed = derive_seed(&[cfg.seed, ordinal]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let life = rng.random_range(cfg.min_snapshots..=cfg.max_snapshots);
    let onset_frac: f64 = rng.random_range(cond.onset_range.0..cond.onset_range.1);
    let onset = ((life as f64 * onset_frac) as usize).clamp(5, life - 10);
    let snapshots = (0..life)
        .into_par_iter()
        .map(|i| snapshot(cfg, &cond, health(i, onset, life), derive_seed(&[seed, i as u64]), i))
        .collect();
    SynthBearing {
        series: SnapshotSeries {
            bearing_id: bearing.bearing.clone(),
            snapshots,
            sampling_rate: cfg.sampling_rate,
            snapshot_interval: cfg.snapshot_interval,
            condition_id: cond_id.to_string(),
        },
        bearing,
        onset,
    }
}

/// Generates every bearing of the fixture in memory.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthBearing>> {
    cfg.validate()?;
    let source = cfg.source_refs().into_iter().map(|b| (b, SOURCE_CONDITION));
    let target = cfg
        .prompt_refs()
        .into_iter()
        .chain(cfg.test_refs())
        .map(|b| (b, TARGET_CONDITION));
    Ok(source
        .chain(target)
        .enumerate()
        .map(|(i, (b, c))| bearing(cfg, b, c, i as u64))
        .collect())
}

/// Writes `root/<bearing>/acc_NNNNN.csv` in the FEMTO column layout and
/// returns the generated bearings.
pub fn write_fixture(root: &Path, cfg: &SynthConfig) -> Result<Vec<SynthBearing>> {
    let bearings = generate(cfg)?;
    for b in &bearings {
        let dir = root.join(&b.bearing.bearing);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        b.series
            .snapshots
            .par_iter()
            .map(|s| {
                let path = dir.join(format!("acc_{:05}.csv", s.index + 1));
                fs::write(&path, snapshot_csv(s, cfg.sampling_rate)).map_err(|e| Error::io(&path, e))
            })
            .collect::<Result<()>>()?;
    }
    Ok(bearings)
}

fn snapshot_csv(s: &Snapshot, fs: f64) -> String {
    let h = s.channel("horizontal").unwrap_or_default();
    let v = s.channel("vertical").unwrap_or_default();
    let mut out = String::with_capacity(h.len() * 40);
    for (t, (a, b)) in h.iter().zip(v).enumerate() {
        let micros = (t as f64 / fs * 1e6).round() as u64;
        let _ = writeln!(out, "0,0,{},{},{a:.6},{b:.6}", micros / 1_000_000, micros % 1_000_000);
    }
    out
}
