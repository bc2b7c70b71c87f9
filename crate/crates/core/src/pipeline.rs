//! Declarative runs. One TOML file drives featurize, train, predict,
//! evaluate and ablate; every artifact records the config digest and seed.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! raw/<dataset>_<bearing>.bin|.txt        parsed snapshots
//! features/<dataset>_<bearing>.bin|.txt   feature map + labels manifest
//! checkpoints/sft.ckpt, checkpoints/pt.ckpt
//! train_manifest.txt
//! predictions/<stage>/<dataset>_<bearing>.csv
//! reports/<dataset>_<bearing>.txt, reports/overall.txt
//! plots/*.csv
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    self, ablate as run_ablation, freeze_ratio_sweep, histograms_csv, pca_substitute, project_2d, projection_csv,
    similarity_study, AblationGrid, SimilarityMode, SweepResult, TaskInputs,
};
use crate::cache::{self, sha256_hex, Manifest};
use crate::error::{Error, Result};
use crate::ingest::{
    build_task, list_snapshot_files, load_snapshot_dir, read_series_cache, write_series_cache, BearingRef,
    ColumnSchema, RulSeries, Sample, SeriesInfo, SnapshotSeries, TaskData, TaskSpec, DEFAULT_LOOKBACK,
    FEMTO_HORIZON,
};
use crate::lspr::{
    assemble_feature_map, compress_features, detect_fpt, FeatureMap, FptResult, RmsSeries, Stft, StftConfig,
    WindowFn,
};
use crate::metrics::{evaluate_with, MapeDenominator, MetricsReport};
use crate::model::{
    import_pretrained, write_checkpoint, Archive, BackboneMapping, ModelConfig, ModelState,
    ParamGroup, Stage,
};
use crate::tensor::Matrix;
use crate::training::{flat_predictions, predict_samples, two_stage, StagePlan, TrainReport};

/// Snapshot layout: a named preset or an inline table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSpec {
    Preset(String),
    Inline(ColumnSchema),
}

impl SchemaSpec {
    pub fn resolve(&self) -> Result<ColumnSchema> {
        match self {
            SchemaSpec::Preset(name) => ColumnSchema::preset(name)
                .ok_or_else(|| Error::Config(format!("unknown column schema preset `{name}` (femto, xjtu)"))),
            SchemaSpec::Inline(s) => Ok(s.clone()),
        }
    }
}

fn default_sampling_rate() -> f64 {
    25_600.0
}

fn default_interval() -> f64 {
    10.0
}

fn default_bearing_dir() -> String {
    "{bearing}".into()
}

/// One dataset: bearing `c-i` lives in `root/<bearing_dir>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub schema: SchemaSpec,
    /// Directory of one bearing below `root`. `{bearing}` expands to the id
    /// (`1-3`), `{condition}` and `{index}` to its two halves, so the FEMTO
    /// layout is `"Bearing{condition}_{index}"`.
    #[serde(default = "default_bearing_dir")]
    pub bearing_dir: String,
    #[serde(default = "default_sampling_rate")]
    pub sampling_rate: f64,
    #[serde(default = "default_interval")]
    pub snapshot_interval: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// One of [`TaskSpec::PRESETS`]; explicit lists below override it.
    pub preset: Option<String>,
    pub name: Option<String>,
    pub sft: Option<Vec<BearingRef>>,
    pub prompt: Option<Vec<BearingRef>>,
    pub test: Option<Vec<BearingRef>>,
    pub lookback: Option<usize>,
    pub horizon: Option<usize>,
}

impl DatasetConfig {
    pub fn bearing_path(&self, bearing: &str) -> PathBuf {
        let (cond, idx) = bearing.split_once('-').unwrap_or((bearing, ""));
        self.root.join(
            self.bearing_dir
                .replace("{bearing}", bearing)
                .replace("{condition}", cond)
                .replace("{index}", idx),
        )
    }
}

impl TaskConfig {
    pub fn resolve(&self) -> Result<TaskSpec> {
        let mut spec = match &self.preset {
            Some(p) => TaskSpec::preset(p).ok_or_else(|| {
                Error::Config(format!("task.preset: unknown task `{p}` (known: {})", TaskSpec::PRESETS.join(", ")))
            })?,
            None => TaskSpec {
                name: "custom".into(),
                sft_bearings: Vec::new(),
                prompt_bearings: Vec::new(),
                test_bearings: Vec::new(),
                lookback: DEFAULT_LOOKBACK,
                horizon: FEMTO_HORIZON,
            },
        };
        if let Some(n) = &self.name {
            spec.name = n.clone();
        }
        if let Some(v) = &self.sft {
            spec.sft_bearings = v.clone();
        }
        if let Some(v) = &self.prompt {
            spec.prompt_bearings = v.clone();
        }
        if let Some(v) = &self.test {
            spec.test_bearings = v.clone();
        }
        if let Some(l) = self.lookback {
            spec.lookback = l;
        }
        if let Some(t) = self.horizon {
            spec.horizon = t;
        }
        if spec.sft_bearings.is_empty() || spec.test_bearings.is_empty() {
            return Err(Error::Config("task: sft and test bearing lists must not be empty".into()));
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsprConfig {
    /// Cut each life at the detected first prediction time.
    pub fpt: bool,
    /// Seconds.
    pub frame_width: f64,
    /// Seconds.
    pub frame_stride: f64,
    pub window: WindowFn,
    /// Feature vector length `D`.
    pub d_out: usize,
    /// Long snapshots are split into segments of this many samples whose
    /// feature vectors are averaged.
    pub segment_samples: usize,
    /// Channels to use; empty means every channel of the schema. Their
    /// feature vectors are averaged.
    pub channels: Vec<String>,
}

impl Default for LsprConfig {
    fn default() -> Self {
        Self {
            fpt: true,
            frame_width: 0.020,
            frame_stride: 0.010,
            window: WindowFn::Hann,
            d_out: 64,
            segment_samples: 2560,
            channels: Vec::new(),
        }
    }
}

impl LsprConfig {
    pub fn stft(&self, sampling_rate: f64) -> StftConfig {
        StftConfig {
            sampling_rate,
            frame_width: self.frame_width,
            frame_stride: self.frame_stride,
            window: self.window,
        }
    }
}

/// Optional overrides of a stage's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub tunable_groups: Option<Vec<ParamGroup>>,
}

impl StageConfig {
    fn apply(&self, mut plan: StagePlan) -> Result<StagePlan> {
        if let Some(e) = self.epochs {
            plan.epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            plan.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            plan.batch_size = b;
        }
        if let Some(g) = &self.tunable_groups {
            plan.tunable_groups = g.clone();
        }
        plan.validate().map_err(|e| Error::Config(format!("{}: {e}", plan.stage.name())))?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub mape_denominator: MapeDenominator,
    /// The PHM score sees `score_units × fraction`; 100 means RUL percent.
    pub score_units: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            mape_denominator: MapeDenominator::Predicted,
            score_units: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Weight archive (native format or safetensors).
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    FrozenVsRandom,
    ReinitPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub blocks: Vec<usize>,
    pub patch_grid: Vec<(usize, usize)>,
    pub horizons: Vec<usize>,
    pub freeze_ratios: Vec<f64>,
    pub similarity_layers: Vec<usize>,
    pub similarity: SimilarityKind,
    pub similarity_std: f64,
    pub similarity_std_b: f64,
    /// Windows compared per similarity histogram.
    pub similarity_windows: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            blocks: (1..=6).collect(),
            patch_grid: vec![(4, 2), (6, 2), (6, 4), (8, 4), (12, 6)],
            horizons: vec![5, 10, 15, 20, 25],
            freeze_ratios: (0..=10).map(|i| i as f64 / 10.0).collect(),
            similarity_layers: vec![1, 2, 4, 6],
            similarity: SimilarityKind::FrozenVsRandom,
            similarity_std: 0.02,
            similarity_std_b: 0.2,
            similarity_windows: 64,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default)]
    seed: u64,
    out_dir: Option<PathBuf>,
    #[serde(default)]
    datasets: BTreeMap<String, DatasetConfig>,
    task: TaskConfig,
    #[serde(default)]
    lspr: LsprConfig,
    #[serde(default)]
    model: toml::Table,
    #[serde(default)]
    sft: StageConfig,
    #[serde(default)]
    pt: StageConfig,
    #[serde(default)]
    metrics: MetricsConfig,
    backbone: Option<BackboneConfig>,
    #[serde(default)]
    ablate: AblateConfig,
}

/// A fully resolved run configuration.
///
/// `[model]` may not set `lookback`, `horizon` or `feature_dim`: the first
/// two come from `[task]` and the last is `lspr.d_out`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Not part of the digest.
    #[serde(skip)]
    pub out_dir: PathBuf,
    pub datasets: BTreeMap<String, DatasetConfig>,
    pub task: TaskSpec,
    pub lspr: LsprConfig,
    pub model: ModelConfig,
    pub sft: StagePlan,
    pub pt: StagePlan,
    pub metrics: MetricsConfig,
    pub backbone: Option<BackboneConfig>,
    pub ablate: AblateConfig,
}

pub const DEFAULT_OUT_DIR: &str = "rul-run";

/// Sets `a.b.c = value` in a TOML table; `value` is parsed as TOML and
/// falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

impl RunConfig {
    /// Parses TOML; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let raw: RawRunConfig = RawRunConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::Config(e.to_string()))?;
        Self::resolve(raw, base_dir)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read run configuration {}: {e}", path.display())))?;
        let base = std::path::absolute(path.parent().unwrap_or(Path::new("")))
            .map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &base, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn resolve(raw: RawRunConfig, base: &Path) -> Result<Self> {
        let absolute = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let task = raw.task.resolve()?;
        let mut model = raw.model;
        for key in ["lookback", "horizon", "feature_dim"] {
            if model.contains_key(key) {
                return Err(Error::Config(format!(
                    "model.{key} is derived; set task.lookback, task.horizon or lspr.d_out instead"
                )));
            }
        }
        model.insert("lookback".into(), toml::Value::Integer(task.lookback as i64));
        model.insert("horizon".into(), toml::Value::Integer(task.horizon as i64));
        model.insert("feature_dim".into(), toml::Value::Integer(raw.lspr.d_out as i64));
        let model = ModelConfig::deserialize(toml::Value::Table(model))
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        model.validate()?;
        if raw.lspr.d_out == 0 || raw.lspr.segment_samples == 0 {
            return Err(Error::Config("lspr.d_out and lspr.segment_samples must be positive".into()));
        }
        let mut datasets = raw.datasets;
        for (name, d) in datasets.iter_mut() {
            d.root = absolute(&d.root);
            d.schema.resolve().map_err(|e| Error::Config(format!("datasets.{name}: {e}")))?;
            if d.sampling_rate <= 0.0 {
                return Err(Error::Config(format!("datasets.{name}.sampling_rate must be positive")));
            }
        }
        for b in task.all_bearings() {
            if !datasets.contains_key(&b.dataset) {
                return Err(Error::Config(format!(
                    "task bearing {b} refers to dataset `{}`, which has no [datasets.{}] entry",
                    b.dataset, b.dataset
                )));
            }
        }
        Ok(Self {
            seed: raw.seed,
            out_dir: absolute(raw.out_dir.as_deref().unwrap_or(Path::new(DEFAULT_OUT_DIR))),
            datasets,
            task,
            lspr: raw.lspr,
            model,
            sft: raw.sft.apply(StagePlan::sft())?,
            pt: raw.pt.apply(StagePlan::pt())?,
            metrics: raw.metrics,
            backbone: raw.backbone.map(|b| BackboneConfig { path: absolute(&b.path) }),
            ablate: raw.ablate,
        })
    }

    /// Canonical TOML of everything except the output directory.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// SHA-256 of [`RunConfig::canonical_toml`].
    pub fn digest(&self) -> String {
        sha256_hex(self.canonical_toml().as_bytes())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.out_dir.clone(),
        }
    }

    fn provenance(&self) -> Vec<(String, String)> {
        vec![
            ("config_digest".into(), self.digest()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

/// Paths of every artifact in a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn raw(&self, b: &BearingRef) -> PathBuf {
        self.root.join("raw").join(format!("{}.bin", b.slug()))
    }
    pub fn features(&self, b: &BearingRef) -> PathBuf {
        self.root.join("features").join(format!("{}.bin", b.slug()))
    }
    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", stage.name()))
    }
    pub fn train_manifest(&self) -> PathBuf {
        self.root.join("train_manifest.txt")
    }
    pub fn predictions(&self, stage: Stage, b: &BearingRef) -> PathBuf {
        self.root
            .join("predictions")
            .join(stage.name())
            .join(format!("{}.csv", b.slug()))
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.txt"))
    }
    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(format!("{name}.csv"))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn header_lines(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

// ---------------------------------------------------------------- featurize

/// Feature map, truncated labels and FPT of one bearing.
#[derive(Debug, Clone)]
pub struct BearingFeatures {
    pub features: FeatureMap,
    pub labels: RulSeries,
    pub fpt: FptResult,
}

/// Per-snapshot feature vector: the compressed STFT energy of each segment,
/// averaged over segments and channels.
pub fn snapshot_features(
    channels: &[&[f64]],
    stft: &Stft,
    d_out: usize,
    segment_samples: usize,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; d_out];
    let mut count = 0usize;
    for ch in channels {
        let segments: Vec<&[f64]> = if ch.len() <= segment_samples {
            vec![ch]
        } else {
            ch.chunks_exact(segment_samples).collect()
        };
        for seg in segments {
            let v = compress_features(&stft.energy(seg)?, d_out)?;
            acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
            count += 1;
        }
    }
    Ok(acc.into_iter().map(|a| a / count.max(1) as f64).collect())
}

/// Features and labels of one loaded bearing. Labels are life fractions of
/// the full life, truncated together with the features at the FPT.
pub fn featurize_series(series: &SnapshotSeries, lspr: &LsprConfig) -> Result<BearingFeatures> {
    let names: Vec<String> = if lspr.channels.is_empty() {
        series.channel_names()
    } else {
        lspr.channels.clone()
    };
    if let Some(missing) = names.iter().find(|n| series.snapshots[0].channel(n).is_none()) {
        return Err(Error::Config(format!(
            "lspr.channels: bearing {} has no channel `{missing}`",
            series.bearing_id
        )));
    }
    let stft = Stft::new(lspr.stft(series.sampling_rate))?;
    let per_snapshot: Vec<(Vec<f64>, f64)> = series
        .snapshots
        .par_iter()
        .map(|s| {
            let chans: Vec<&[f64]> = names.iter().map(|n| s.channel(n).unwrap_or_default()).collect();
            let v = snapshot_features(&chans, &stft, lspr.d_out, lspr.segment_samples)?;
            let (sq, n) = chans
                .iter()
                .fold((0.0, 0usize), |(sq, n), c| (sq + c.iter().map(|x| x * x).sum::<f64>(), n + c.len()));
            Ok((v, (sq / n as f64).sqrt()))
        })
        .collect::<Result<_>>()?;
    let (vectors, rms): (Vec<Vec<f64>>, Vec<f64>) = per_snapshot.into_iter().unzip();
    let fpt = if lspr.fpt && rms.len() >= 4 {
        detect_fpt(&RmsSeries(rms))?
    } else {
        if lspr.fpt {
            log::warn!("bearing {}: too few snapshots for FPT detection; using the whole life", series.bearing_id);
        }
        FptResult::disabled()
    };
    let features = assemble_feature_map(&vectors, &fpt)?;
    let labels = RulSeries::linear(series.len())?.truncated(features.fpt_offset);
    Ok(BearingFeatures { features, labels, fpt })
}

/// SHA-256 over the schema and every snapshot file's name and content.
fn raw_input_digest(files: &[PathBuf], schema: &ColumnSchema) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(schema).expect("schema serialises"));
    for f in files {
        h.update(f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default().as_bytes());
        h.update(fs::read(f).map_err(|e| Error::io(f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Computed,
    Cached,
}

#[derive(Debug, Clone)]
pub struct FeaturizeEntry {
    pub bearing: BearingRef,
    pub status: CacheStatus,
    pub rows: usize,
    pub fpt_index: Option<usize>,
    pub total_life: usize,
}

fn series_info(cfg: &RunConfig, b: &BearingRef) -> SeriesInfo {
    let d = &cfg.datasets[&b.dataset];
    SeriesInfo {
        bearing_id: b.bearing.clone(),
        condition_id: b.bearing.split('-').next().unwrap_or_default().to_string(),
        sampling_rate: d.sampling_rate,
        snapshot_interval: d.snapshot_interval,
    }
}

/// Loads and featurizes every task bearing, skipping bearings whose cached
/// features were built from identical inputs and settings.
pub fn featurize(cfg: &RunConfig) -> Result<Vec<FeaturizeEntry>> {
    let layout = cfg.layout();
    let settings = serde_json::to_string(&cfg.lspr).expect("lspr config serialises");
    let mut out = Vec::new();
    let mut bearings: Vec<&BearingRef> = cfg.task.all_bearings().collect();
    bearings.sort();
    bearings.dedup();
    for b in bearings {
        let d = &cfg.datasets[&b.dataset];
        let schema = d.schema.resolve()?;
        let dir = d.bearing_path(&b.bearing);
        let files = list_snapshot_files(&dir, &schema)?;
        if files.is_empty() {
            return Err(Error::NoSnapshots(dir));
        }
        let raw_digest = raw_input_digest(&files, &schema)?;
        let feature_digest = sha256_hex(format!("{raw_digest}\n{settings}\n{}", d.sampling_rate).as_bytes());
        let fpath = layout.features(b);
        let mpath = fpath.with_extension("txt");
        let previous = Manifest::read(&mpath).ok();
        let up_to_date = fpath.exists()
            && previous.as_ref().and_then(|m| m.get("input_digest")) == Some(feature_digest.as_str());

        let (status, rows, fpt_index, total_life) = if up_to_date {
            let m = previous.expect("checked above");
            let (fpt_index, total_life) = manifest_life(&m, &mpath)?;
            let rows = total_life - fpt_index.unwrap_or(0);
            log::info!("{b}: features up to date");
            (CacheStatus::Cached, rows, fpt_index, total_life)
        } else {
            let rpath = layout.raw(b);
            let raw_ok = Manifest::read(&rpath.with_extension("digest.txt"))
                .ok()
                .is_some_and(|m| m.get("raw_digest") == Some(raw_digest.as_str()));
            let series = if raw_ok && rpath.exists() {
                read_series_cache(&rpath)?
            } else {
                let s = load_snapshot_dir(&dir, &schema, &series_info(cfg, b))?;
                ensure_parent(&rpath)?;
                write_series_cache(&rpath, &s)?;
                Manifest::new()
                    .set("raw_digest", &raw_digest)
                    .write(&rpath.with_extension("digest.txt"))?;
                s
            };
            let bf = featurize_series(&series, &cfg.lspr)?;
            ensure_parent(&fpath)?;
            cache::write_matrix(&fpath, &bf.features.rows)?;
            log::info!(
                "{b}: {} snapshots, FPT {:?}, {} feature rows",
                series.len(),
                bf.fpt.fpt_index,
                bf.features.len()
            );
            (CacheStatus::Computed, bf.features.len(), bf.fpt.fpt_index, series.len())
        };
        let mut m = Manifest::new();
        m.set("kind", "features")
            .set("bearing", b)
            .set("input_digest", &feature_digest)
            .set("total_life", total_life)
            .set("fpt_index", fpt_index.map_or("none".to_string(), |i| i.to_string()))
            .set("rows", rows)
            .set("cols", cfg.lspr.d_out)
            .set("window", cfg.lspr.window.name())
            .set("frame_width", cfg.lspr.frame_width)
            .set("frame_stride", cfg.lspr.frame_stride);
        for (k, v) in cfg.provenance() {
            m.set(k, v);
        }
        m.write(&mpath)?;
        out.push(FeaturizeEntry {
            bearing: b.clone(),
            status,
            rows,
            fpt_index,
            total_life,
        });
    }
    Ok(out)
}

fn manifest_life(m: &Manifest, path: &Path) -> Result<(Option<usize>, usize)> {
    let bad = |k: &str| Error::Data {
        path: path.to_path_buf(),
        message: format!("missing or malformed `{k}`"),
    };
    let total_life: usize = m.get("total_life").and_then(|v| v.parse().ok()).ok_or_else(|| bad("total_life"))?;
    let fpt = match m.get("fpt_index").ok_or_else(|| bad("fpt_index"))? {
        "none" => None,
        v => Some(v.parse().map_err(|_| bad("fpt_index"))?),
    };
    Ok((fpt, total_life))
}

/// Reads cached features of every task bearing.
pub fn load_task_inputs(cfg: &RunConfig) -> Result<TaskInputs> {
    let layout = cfg.layout();
    let mut features = HashMap::new();
    let mut labels = HashMap::new();
    for b in cfg.task.all_bearings() {
        let fpath = layout.features(b);
        let mpath = fpath.with_extension("txt");
        if !fpath.exists() || !mpath.exists() {
            return Err(Error::MissingArtifact(format!(
                "features for {b} ({}); run `rul featurize` first",
                fpath.display()
            )));
        }
        let m = Manifest::read(&mpath)?;
        let (fpt, total_life) = manifest_life(&m, &mpath)?;
        let rows = cache::read_matrix(&fpath)?;
        if rows.cols() != cfg.lspr.d_out {
            return Err(Error::MissingArtifact(format!(
                "features for {b} have {} columns but lspr.d_out is {}; rerun `rul featurize`",
                rows.cols(),
                cfg.lspr.d_out
            )));
        }
        let offset = fpt.unwrap_or(0);
        let label = RulSeries::linear(total_life)?.truncated(offset);
        features.insert(b.clone(), FeatureMap { rows, fpt_offset: offset });
        labels.insert(b.clone(), label);
    }
    Ok(TaskInputs {
        spec: cfg.task.clone(),
        features,
        labels,
    })
}

pub fn load_task(cfg: &RunConfig) -> Result<(TaskInputs, TaskData)> {
    let inputs = load_task_inputs(cfg)?;
    let data = build_task(&inputs.spec, &inputs.features, &inputs.labels)?;
    Ok((inputs, data))
}

// -------------------------------------------------------------------- train

/// Fresh model for `config`, with the backbone imported when configured.
pub fn initial_state(cfg: &RunConfig, config: &ModelConfig) -> Result<ModelState> {
    let state = ModelState::new(config.clone(), cfg.seed)?;
    match &cfg.backbone {
        Some(b) => {
            let archive = Archive::read(&b.path)?;
            import_pretrained(&archive, &state, &BackboneMapping::detect(&archive))
        }
        None => Ok(state),
    }
}

/// SHA-256 over sample inputs and labels.
pub fn samples_digest(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.bearing.to_string().as_bytes());
        h.update((s.start as u64).to_le_bytes());
        s.input.as_slice().iter().for_each(|v| h.update(v.to_le_bytes()));
        s.label.iter().for_each(|v| h.update(v.to_le_bytes()));
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub sft: TrainReport,
    pub pt: TrainReport,
    pub sft_samples: usize,
    pub prompt_samples: usize,
    pub wall_time_secs: f64,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",")
}

/// SFT then PT; writes both checkpoints and the run manifest.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let started = Instant::now();
    let (_, task) = load_task(cfg)?;
    if task.prompt_samples.is_empty() {
        return Err(Error::Config("task has no prompt samples for the PT stage".into()));
    }
    let state = initial_state(cfg, &cfg.model)?;
    let out = two_stage(&state, &task, &cfg.sft, &cfg.pt, cfg.seed)?;
    let layout = cfg.layout();
    let header = cfg.provenance();
    for (stage, s) in [(Stage::Sft, &out.after_sft), (Stage::Pt, &out.after_pt)] {
        let path = layout.checkpoint(stage);
        ensure_parent(&path)?;
        write_checkpoint(&path, s, &header)?;
    }
    let wall = started.elapsed().as_secs_f64();
    let mut m = Manifest::new();
    for (k, v) in &header {
        m.set(k, v);
    }
    m.set("task", &cfg.task.name)
        .set("sft_samples", task.sft_samples.len())
        .set("prompt_samples", task.prompt_samples.len())
        .set("sft_data_digest", samples_digest(&task.sft_samples))
        .set("prompt_data_digest", samples_digest(&task.prompt_samples));
    for (name, plan, report) in [("sft", &cfg.sft, &out.sft_report), ("pt", &cfg.pt, &out.pt_report)] {
        m.set(format!("{name}.plan"), serde_json::to_string(plan).expect("plan serialises"))
            .set(format!("{name}.epoch_losses"), join(&report.epoch_losses))
            .set(format!("{name}.updated_digest"), &report.updated_digest)
            .set(format!("{name}.frozen_digest_before"), &report.frozen_digest_before)
            .set(format!("{name}.frozen_digest_after"), &report.frozen_digest)
            .set(format!("{name}.tunable_tensors"), report.tunable_tensors.join(","))
            .set(format!("{name}.wall_time_s"), report.wall_time_secs);
    }
    m.set("wall_time_s", wall);
    m.write(&layout.train_manifest())?;
    Ok(TrainSummary {
        sft_samples: task.sft_samples.len(),
        prompt_samples: task.prompt_samples.len(),
        sft: out.sft_report,
        pt: out.pt_report,
        wall_time_secs: wall,
    })
}

/// Reads a stage checkpoint and checks it came from this configuration.
pub fn load_checkpoint(cfg: &RunConfig, stage: Stage) -> Result<ModelState> {
    let path = cfg.layout().checkpoint(stage);
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} checkpoint ({}); run `rul train` first",
            stage.name(),
            path.display()
        )));
    }
    let archive = Archive::read(&path)?;
    let digest = cfg.digest();
    if archive.header_value("config_digest") != Some(digest.as_str()) {
        return Err(Error::Config(format!(
            "{} was produced by a different configuration; retrain",
            path.display()
        )));
    }
    crate::model::state_from_checkpoint(&archive)
}

// ------------------------------------------------------------------ predict

/// One row per predicted step; `index = sample · T + k`.
pub fn prediction_csv(cfg: &RunConfig, stage: Stage, bearing: &BearingRef, preds: &[Vec<f64>], samples: &[Sample]) -> String {
    let mut header = cfg.provenance();
    header.push(("stage".into(), stage.name().into()));
    header.push(("bearing".into(), bearing.to_string()));
    header.push(("horizon".into(), cfg.task.horizon.to_string()));
    let mut s = header_lines(&header);
    s.push_str("index,predicted,label\n");
    let t = cfg.task.horizon;
    for (i, (p, smp)) in preds.iter().zip(samples).enumerate() {
        for (k, (pv, lv)) in p.iter().zip(&smp.label).enumerate() {
            let _ = writeln!(s, "{},{pv},{lv}", i * t + k);
        }
    }
    s
}

/// Writes one prediction file per test bearing.
pub fn predict(cfg: &RunConfig, stage: Stage) -> Result<Vec<PathBuf>> {
    if stage == Stage::Initial {
        return Err(Error::InvalidArgument("predict uses the sft or pt checkpoint".into()));
    }
    let state = load_checkpoint(cfg, stage)?;
    let (_, task) = load_task(cfg)?;
    let layout = cfg.layout();
    let mut written = Vec::new();
    for b in &cfg.task.test_bearings {
        let samples: Vec<Sample> = task.test_samples.iter().filter(|s| &s.bearing == b).cloned().collect();
        let preds = predict_samples(&state, &samples)?;
        let path = layout.predictions(stage, b);
        ensure_parent(&path)?;
        fs::write(&path, prediction_csv(cfg, stage, b, &preds, &samples)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionFile {
    pub header: BTreeMap<String, String>,
    pub predicted: Vec<f64>,
    pub label: Vec<f64>,
}

pub fn read_prediction_file(path: &Path) -> Result<PredictionFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut header = BTreeMap::new();
    let (mut predicted, mut label) = (Vec::new(), Vec::new());
    let mut seen_columns = false;
    for (n, line) in text.lines().enumerate() {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !seen_columns {
            if line.trim() != "index,predicted,label" {
                return Err(parse_err(format!("expected column header `index,predicted,label`, found `{line}`")));
            }
            seen_columns = true;
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(parse_err(format!("expected 3 cells, found {}", cells.len())));
        }
        let num = |c: &str| -> Result<f64> {
            let v: f64 = c.trim().parse().map_err(|_| parse_err(format!("`{c}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("`{c}` is not finite")));
            }
            Ok(v)
        };
        predicted.push(num(cells[1])?);
        label.push(num(cells[2])?);
    }
    Ok(PredictionFile {
        header,
        predicted,
        label,
    })
}

// ----------------------------------------------------------------- evaluate

/// Metrics of one prediction file, after checking its provenance header.
pub fn evaluate_file(cfg: &RunConfig, path: &Path) -> Result<MetricsReport> {
    let file = read_prediction_file(path)?;
    let digest = cfg.digest();
    match file.header.get("config_digest") {
        Some(d) if *d == digest => {}
        Some(_) => {
            return Err(Error::Config(format!(
                "{}: header digest does not match the current configuration",
                path.display()
            )))
        }
        None => {
            return Err(Error::Data {
                path: path.to_path_buf(),
                message: "missing config_digest header".into(),
            })
        }
    }
    if file.predicted.is_empty() {
        return Err(Error::Data {
            path: path.to_path_buf(),
            message: "no prediction rows".into(),
        });
    }
    evaluate_with(&file.predicted, &file.label, cfg.metrics.mape_denominator, cfg.metrics.score_units)
}

/// Reports per test bearing plus the pooled `overall` report.
pub fn evaluate(cfg: &RunConfig, stage: Stage) -> Result<Vec<(String, MetricsReport)>> {
    let layout = cfg.layout();
    let mut out = Vec::new();
    let (mut all_p, mut all_l) = (Vec::new(), Vec::new());
    for b in &cfg.task.test_bearings {
        let path = layout.predictions(stage, b);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "predictions for {b} ({}); run `rul predict` first",
                path.display()
            )));
        }
        let report = evaluate_file(cfg, &path)?;
        let file = read_prediction_file(&path)?;
        all_p.extend(file.predicted);
        all_l.extend(file.label);
        out.push((b.slug(), report));
    }
    let overall = evaluate_with(&all_p, &all_l, cfg.metrics.mape_denominator, cfg.metrics.score_units)?;
    out.push(("overall".into(), overall));
    for (name, report) in &out {
        let mut m = Manifest::new();
        for (k, v) in cfg.provenance() {
            m.set(k, v);
        }
        m.set("stage", stage.name()).set("name", name);
        for (k, v) in report.to_manifest().entries() {
            m.set(k, v);
        }
        let path = layout.report(name);
        ensure_parent(&path)?;
        m.write(&path)?;
    }
    Ok(out)
}

// ------------------------------------------------------------------- ablate

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateAxis {
    Blocks,
    Patch,
    Horizon,
    Freeze,
    Similarity,
    Pca,
    Projection,
}

impl AblateAxis {
    pub const ALL: [AblateAxis; 7] = [
        AblateAxis::Blocks,
        AblateAxis::Patch,
        AblateAxis::Horizon,
        AblateAxis::Freeze,
        AblateAxis::Similarity,
        AblateAxis::Pca,
        AblateAxis::Projection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblateAxis::Blocks => "blocks",
            AblateAxis::Patch => "patch",
            AblateAxis::Horizon => "horizon",
            AblateAxis::Freeze => "freeze",
            AblateAxis::Similarity => "similarity",
            AblateAxis::Pca => "pca",
            AblateAxis::Projection => "projection",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Plot-data file written for this axis.
    pub fn file_name(self) -> &'static str {
        match self {
            AblateAxis::Blocks => "block_count",
            AblateAxis::Patch => "patch_grid",
            AblateAxis::Horizon => "horizon",
            AblateAxis::Freeze => "freeze_ratio",
            AblateAxis::Similarity => "similarity",
            AblateAxis::Pca => "pca_substitution",
            AblateAxis::Projection => "feature_projection",
        }
    }
}

fn write_plot(cfg: &RunConfig, axis: AblateAxis, body: &str) -> Result<PathBuf> {
    let mut header = cfg.provenance();
    header.push(("axis".into(), axis.name().into()));
    let path = cfg.layout().plot(axis.file_name());
    analysis::write_text(&path, &(header_lines(&header) + body))?;
    Ok(path)
}

fn sweep_body(r: &SweepResult) -> String {
    let mut s = r.to_csv();
    for skip in &r.skipped {
        let _ = writeln!(s, "# skipped {:?}: {}", skip.axis_values, skip.reason);
    }
    s
}

/// Runs one analysis and writes its plot data.
pub fn ablate(cfg: &RunConfig, axis: AblateAxis) -> Result<PathBuf> {
    let (inputs, task) = load_task(cfg)?;
    let factory = |c: &ModelConfig| initial_state(cfg, c);
    let a = &cfg.ablate;
    let body = match axis {
        AblateAxis::Blocks | AblateAxis::Patch | AblateAxis::Horizon => {
            let grid = match axis {
                AblateAxis::Blocks => AblationGrid::BlockCount(a.blocks.clone()),
                AblateAxis::Patch => AblationGrid::PatchGrid(a.patch_grid.clone()),
                _ => AblationGrid::Horizon(a.horizons.clone()),
            };
            sweep_body(&run_ablation(&cfg.model, &factory, &inputs, &grid, &cfg.sft, &cfg.pt, cfg.seed)?)
        }
        AblateAxis::Freeze => {
            let state = initial_state(cfg, &cfg.model)?;
            sweep_body(&freeze_ratio_sweep(&state, &task, &a.freeze_ratios, &cfg.sft, &cfg.pt, cfg.seed)?)
        }
        AblateAxis::Similarity => {
            let state = initial_state(cfg, &cfg.model)?;
            let layers: Vec<usize> = a.similarity_layers.iter().copied().filter(|&l| l >= 1 && l <= cfg.model.blocks).collect();
            if layers.len() < a.similarity_layers.len() {
                log::warn!("similarity layers beyond {} blocks dropped", cfg.model.blocks);
            }
            let windows: Vec<Matrix> = task
                .test_samples
                .iter()
                .chain(&task.prompt_samples)
                .take(a.similarity_windows)
                .map(|s| s.input.clone())
                .collect();
            let mode = match a.similarity {
                SimilarityKind::FrozenVsRandom => SimilarityMode::FrozenVsRandom { std: a.similarity_std },
                SimilarityKind::ReinitPair => SimilarityMode::ReinitPair {
                    std_a: a.similarity_std,
                    std_b: a.similarity_std_b,
                },
            };
            histograms_csv(&similarity_study(&state, &windows, &layers, mode, cfg.seed)?)
        }
        AblateAxis::Pca => {
            let state = initial_state(cfg, &cfg.model)?;
            let calibration: Vec<Matrix> = task.sft_samples.iter().map(|s| s.input.clone()).collect();
            let substituted = pca_substitute(&state, &calibration, None)?;
            let mut s = String::from("variant,mae,rmse,mape,score\n");
            for (name, st) in [("attention", &state), ("pca", &substituted)] {
                let trained = two_stage(st, &task, &cfg.sft, &cfg.pt, cfg.seed)?;
                let (p, l) = flat_predictions(&trained.after_pt, &task.test_samples)?;
                let m = evaluate_with(&p, &l, cfg.metrics.mape_denominator, cfg.metrics.score_units)?;
                let _ = writeln!(s, "{name},{},{},{},{}", m.mae, m.rmse, m.mape, m.score);
            }
            s
        }
        AblateAxis::Projection => {
            let mut labels = Vec::new();
            let mut data = Vec::new();
            let mut bearings: Vec<&BearingRef> = inputs.features.keys().collect();
            bearings.sort();
            for b in bearings {
                let fm = &inputs.features[b];
                for _ in 0..fm.len() {
                    labels.push(b.to_string());
                }
                data.extend_from_slice(fm.rows.as_slice());
            }
            let rows = Matrix::from_vec(labels.len(), cfg.lspr.d_out, data);
            projection_csv(&labels, &project_2d(&rows)?)
        }
    };
    write_plot(cfg, axis, &body)
}

// -------------------------------------------------------------------- synth

/// Writes the synthetic fixture under `dir/data` and a ready-to-run config
/// `dir/run.toml` with a small model.
pub fn synth(dir: &Path, synth_cfg: &crate::synth::SynthConfig) -> Result<PathBuf> {
    let data = dir.join("data");
    crate::synth::write_fixture(&data, synth_cfg)?;
    let quote = |v: Vec<BearingRef>| v.iter().map(|b| format!("\"{b}\"")).collect::<Vec<_>>().join(", ");
    let text = format!(
        r#"# Synthetic two-condition transfer task.
seed = {seed}
out_dir = "run"

[datasets.synth]
root = "data"
sampling_rate = {fs}
snapshot_interval = {interval}

[datasets.synth.schema]
delimiter = ","
expected_samples = {samples}
file_prefix = "acc"
extension = "csv"
channels = [{{ name = "horizontal", column = 4 }}, {{ name = "vertical", column = 5 }}]

[task]
name = "synth-transfer"
sft = [{sft}]
prompt = [{prompt}]
test = [{test}]
lookback = 12
horizon = 4

[lspr]
d_out = 16

[model]
hidden = 16
blocks = 2
heads = 2
patch_size = 4
patch_stride = 2
dropout = 0.0

[sft]
epochs = 8
learning_rate = 1e-3
batch_size = 16

[pt]
epochs = 8
learning_rate = 1e-3
batch_size = 16

[ablate]
blocks = [1, 2, 3]
patch_grid = [[3, 2], [4, 2], [6, 4], [16, 4]]
horizons = [2, 4, 6]
freeze_ratios = [0.0, 0.5, 1.0]
similarity_layers = [1, 2]
"#,
        seed = synth_cfg.seed,
        fs = synth_cfg.sampling_rate,
        interval = synth_cfg.snapshot_interval,
        samples = synth_cfg.samples_per_snapshot,
        sft = quote(synth_cfg.source_refs()),
        prompt = quote(synth_cfg.prompt_refs()),
        test = quote(synth_cfg.test_refs()),
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
