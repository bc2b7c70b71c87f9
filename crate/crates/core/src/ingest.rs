//! Run-to-failure data: snapshot loading, life-fraction labels and
//! transfer-task sample windows.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{self, Manifest};
use crate::error::{Error, Result};
use crate::lspr::FeatureMap;
use crate::tensor::Matrix;

/// One acquisition: every channel has the same, non-zero length.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub channels: BTreeMap<String, Vec<f64>>,
    pub index: usize,
}

impl Snapshot {
    pub fn samples(&self) -> usize {
        self.channels.values().next().map_or(0, Vec::len)
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels.get(name).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSeries {
    pub bearing_id: String,
    pub snapshots: Vec<Snapshot>,
    /// Samples per second.
    pub sampling_rate: f64,
    /// Seconds between snapshot starts.
    pub snapshot_interval: f64,
    pub condition_id: String,
}

impl SnapshotSeries {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn channel_names(&self) -> Vec<String> {
        self.snapshots
            .first()
            .map(|s| s.channels.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Row per snapshot; channels (in name order) concatenated along columns.
    pub fn to_matrix(&self) -> Matrix {
        let rows: Vec<Vec<f64>> = self
            .snapshots
            .iter()
            .map(|s| s.channels.values().flatten().copied().collect())
            .collect();
        Matrix::from_rows(&rows)
    }
}

/// Where a channel lives inside a snapshot file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelColumn {
    pub name: String,
    /// Zero-based column index.
    pub column: usize,
}

/// Layout of delimiter-separated snapshot files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    pub delimiter: char,
    #[serde(default)]
    pub skip_rows: usize,
    pub channels: Vec<ChannelColumn>,
    /// When set, every snapshot must have exactly this many samples.
    #[serde(default)]
    pub expected_samples: Option<usize>,
    /// Only files whose name starts with this prefix are snapshots.
    #[serde(default)]
    pub file_prefix: Option<String>,
    /// Only files with this extension (without dot) are snapshots.
    #[serde(default)]
    pub extension: Option<String>,
}

impl ColumnSchema {
    /// `acc_NNNNN.csv`: h, m, s, µs, horizontal, vertical; 0.1 s at 25.6 kHz.
    pub fn femto() -> Self {
        Self {
            delimiter: ',',
            skip_rows: 0,
            channels: vec![
                ChannelColumn {
                    name: "horizontal".into(),
                    column: 4,
                },
                ChannelColumn {
                    name: "vertical".into(),
                    column: 5,
                },
            ],
            expected_samples: Some(2560),
            file_prefix: Some("acc".into()),
            extension: Some("csv".into()),
        }
    }

    /// `N.csv` with a header row and horizontal/vertical columns; 1.28 s at 25.6 kHz.
    pub fn xjtu() -> Self {
        Self {
            delimiter: ',',
            skip_rows: 1,
            channels: vec![
                ChannelColumn {
                    name: "horizontal".into(),
                    column: 0,
                },
                ChannelColumn {
                    name: "vertical".into(),
                    column: 1,
                },
            ],
            expected_samples: Some(32_768),
            file_prefix: None,
            extension: Some("csv".into()),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "femto" => Some(Self::femto()),
            "xjtu" => Some(Self::xjtu()),
            _ => None,
        }
    }

    fn accepts(&self, name: &str) -> bool {
        if let Some(prefix) = &self.file_prefix {
            if !name.starts_with(prefix.as_str()) {
                return false;
            }
        }
        if let Some(ext) = &self.extension {
            return Path::new(name)
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case(ext));
        }
        true
    }
}

/// Bearing-level metadata not contained in the snapshot files.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesInfo {
    pub bearing_id: String,
    pub condition_id: String,
    pub sampling_rate: f64,
    pub snapshot_interval: f64,
}

/// Natural ordering: digit runs compare numerically, everything else
/// byte-wise, so `acc_2` sorts before `acc_10` and padded names still work.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut a, mut b) = (a.as_bytes(), b.as_bytes());
    loop {
        match (a.first(), b.first()) {
            (None, None) => return Ordering::Equal,
            (None, _) => return Ordering::Less,
            (_, None) => return Ordering::Greater,
            (Some(x), Some(y)) if x.is_ascii_digit() && y.is_ascii_digit() => {
                let na = a.iter().take_while(|c| c.is_ascii_digit()).count();
                let nb = b.iter().take_while(|c| c.is_ascii_digit()).count();
                let (da, db) = (trim_zeros(&a[..na]), trim_zeros(&b[..nb]));
                let ord = da.len().cmp(&db.len()).then_with(|| da.cmp(db));
                if ord != Ordering::Equal {
                    return ord;
                }
                // Equal value: fewer leading zeros first, for a total order.
                if na != nb {
                    return na.cmp(&nb);
                }
                a = &a[na..];
                b = &b[nb..];
            }
            (Some(x), Some(y)) => {
                if x != y {
                    return x.cmp(y);
                }
                a = &a[1..];
                b = &b[1..];
            }
        }
    }
}

fn trim_zeros(digits: &[u8]) -> &[u8] {
    let first = digits.iter().position(|&c| c != b'0').unwrap_or(digits.len());
    &digits[first..]
}

/// Snapshot files of a directory in natural filename order.
pub fn list_snapshot_files(dir: &Path, schema: &ColumnSchema) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if schema.accepts(name) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| {
        let (na, nb) = (file_name(a), file_name(b));
        natural_cmp(&na, &nb)
    });
    Ok(files)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn parse_snapshot(path: &Path, schema: &ColumnSchema, index: usize) -> Result<Snapshot> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); schema.channels.len()];
    for (lineno, line) in text.lines().enumerate().skip(schema.skip_rows) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(schema.delimiter).map(str::trim).collect();
        for (ch, out) in schema.channels.iter().zip(columns.iter_mut()) {
            let cell = cells.get(ch.column).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!(
                    "row has {} cells, channel `{}` reads column {}",
                    cells.len(),
                    ch.name,
                    ch.column
                ),
            })?;
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("non-numeric cell `{cell}` in column {}", ch.column),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("non-finite sample `{cell}` in column {}", ch.column),
                });
            }
            out.push(value);
        }
    }
    let samples = columns.first().map_or(0, Vec::len);
    if samples == 0 {
        return Err(Error::Data {
            path: path.to_path_buf(),
            message: "snapshot contains no samples".into(),
        });
    }
    if let Some(expected) = schema.expected_samples {
        if samples != expected {
            return Err(Error::Data {
                path: path.to_path_buf(),
                message: format!("snapshot has {samples} samples, schema expects {expected}"),
            });
        }
    }
    let channels = schema
        .channels
        .iter()
        .map(|c| c.name.clone())
        .zip(columns)
        .collect();
    Ok(Snapshot { channels, index })
}

/// Loads every snapshot file in `dir`. Files are parsed in parallel and
/// assembled in natural filename order.
pub fn load_snapshot_dir(dir: &Path, schema: &ColumnSchema, info: &SeriesInfo) -> Result<SnapshotSeries> {
    if info.sampling_rate <= 0.0 {
        return Err(Error::Config("sampling rate must be positive".into()));
    }
    if schema.channels.is_empty() {
        return Err(Error::Config("column schema lists no channels".into()));
    }
    let files = list_snapshot_files(dir, schema)?;
    if files.is_empty() {
        return Err(Error::NoSnapshots(dir.to_path_buf()));
    }
    let snapshots = files
        .par_iter()
        .enumerate()
        .map(|(i, f)| parse_snapshot(f, schema, i))
        .collect::<Result<Vec<_>>>()?;
    let first = snapshots[0].samples();
    if let Some((s, f)) = snapshots.iter().zip(&files).find(|(s, _)| s.samples() != first) {
        return Err(Error::Data {
            path: f.clone(),
            message: format!(
                "snapshot has {} samples per channel, earlier snapshots have {first}",
                s.samples()
            ),
        });
    }
    log::debug!("loaded {} snapshots from {}", snapshots.len(), dir.display());
    Ok(SnapshotSeries {
        bearing_id: info.bearing_id.clone(),
        snapshots,
        sampling_rate: info.sampling_rate,
        snapshot_interval: info.snapshot_interval,
        condition_id: info.condition_id.clone(),
    })
}

/// Writes a raw-signal cache (`.bin`) and its sidecar manifest (`.txt`).
pub fn write_series_cache(path: &Path, series: &SnapshotSeries) -> Result<()> {
    cache::write_matrix(path, &series.to_matrix())?;
    let mut m = Manifest::new();
    m.set("bearing_id", &series.bearing_id)
        .set("condition_id", &series.condition_id)
        .set("sampling_rate", series.sampling_rate)
        .set("snapshot_interval", series.snapshot_interval)
        .set("channels", series.channel_names().join(","))
        .set("snapshots", series.len());
    m.write(&path.with_extension("txt"))
}

pub fn read_series_cache(path: &Path) -> Result<SnapshotSeries> {
    let matrix = cache::read_matrix(path)?;
    let manifest_path = path.with_extension("txt");
    let m = Manifest::read(&manifest_path)?;
    let field = |k: &str| {
        m.get(k).map(str::to_string).ok_or_else(|| Error::Data {
            path: manifest_path.clone(),
            message: format!("missing key `{k}`"),
        })
    };
    let number = |k: &str| -> Result<f64> {
        field(k)?.parse().map_err(|_| Error::Data {
            path: manifest_path.clone(),
            message: format!("key `{k}` is not a number"),
        })
    };
    let names: Vec<String> = field("channels")?.split(',').map(str::to_string).collect();
    if names.is_empty() || matrix.cols() % names.len() != 0 {
        return Err(Error::Data {
            path: path.to_path_buf(),
            message: "cache width is not a multiple of the channel count".into(),
        });
    }
    let per = matrix.cols() / names.len();
    let snapshots = (0..matrix.rows())
        .map(|r| Snapshot {
            channels: names
                .iter()
                .enumerate()
                .map(|(c, n)| (n.clone(), matrix.row(r)[c * per..(c + 1) * per].to_vec()))
                .collect(),
            index: r,
        })
        .collect();
    Ok(SnapshotSeries {
        bearing_id: field("bearing_id")?,
        snapshots,
        sampling_rate: number("sampling_rate")?,
        snapshot_interval: number("snapshot_interval")?,
        condition_id: field("condition_id")?,
    })
}

/// Fraction of life remaining per snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct RulSeries {
    pub values: Vec<f64>,
    /// Snapshot count of the full life.
    pub total_life: usize,
}

impl RulSeries {
    /// `values[i] = (total_life - 1 - i) / (total_life - 1)`.
    pub fn linear(total_life: usize) -> Result<Self> {
        if total_life < 2 {
            return Err(Error::InvalidArgument(format!(
                "life-fraction labels need at least 2 snapshots, got {total_life}"
            )));
        }
        let denom = (total_life - 1) as f64;
        let values = (0..total_life)
            .map(|i| (total_life - 1 - i) as f64 / denom)
            .collect();
        Ok(Self { values, total_life })
    }

    /// Labels from `offset` onward (FPT truncation). `total_life` is kept.
    pub fn truncated(&self, offset: usize) -> Self {
        Self {
            values: self.values[offset.min(self.values.len())..].to_vec(),
            total_life: self.total_life,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn normalize_rul(series: &SnapshotSeries) -> Result<RulSeries> {
    RulSeries::linear(series.len())
}

/// `dataset/bearing`, e.g. `femto/1-1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BearingRef {
    pub dataset: String,
    pub bearing: String,
}

impl BearingRef {
    pub fn new(dataset: impl Into<String>, bearing: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            bearing: bearing.into(),
        }
    }

    /// File-system friendly key, `dataset_bearing`.
    pub fn slug(&self) -> String {
        format!("{}_{}", self.dataset, self.bearing)
    }
}

impl fmt::Display for BearingRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.dataset, self.bearing)
    }
}

impl FromStr for BearingRef {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('/') {
            Some((d, b)) if !d.is_empty() && !b.is_empty() => Ok(Self::new(d, b)),
            _ => Err(Error::Config(format!(
                "bearing reference `{s}` must look like `dataset/bearing`"
            ))),
        }
    }
}

impl TryFrom<String> for BearingRef {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BearingRef> for String {
    fn from(b: BearingRef) -> String {
        b.to_string()
    }
}

/// A transfer task: source bearings for SFT, target bearings for prompting
/// and testing, plus the lookback and horizon lengths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub sft_bearings: Vec<BearingRef>,
    pub prompt_bearings: Vec<BearingRef>,
    pub test_bearings: Vec<BearingRef>,
    pub lookback: usize,
    pub horizon: usize,
}

pub const DEFAULT_LOOKBACK: usize = 75;
pub const FEMTO_HORIZON: usize = 25;
pub const XJTU_HORIZON: usize = 20;

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lookback < 1 {
            return Err(Error::Config("lookback must be at least 1".into()));
        }
        if self.horizon < 2 {
            return Err(Error::Config("horizon must be at least 2".into()));
        }
        let lists = [
            ("sft", &self.sft_bearings),
            ("prompt", &self.prompt_bearings),
            ("test", &self.test_bearings),
        ];
        for (i, (na, a)) in lists.iter().enumerate() {
            for (nb, b) in &lists[i + 1..] {
                if let Some(dup) = a.iter().find(|x| b.contains(x)) {
                    return Err(Error::Config(format!(
                        "bearing {dup} appears in both the {na} and {nb} sets"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn all_bearings(&self) -> impl Iterator<Item = &BearingRef> {
        self.sft_bearings
            .iter()
            .chain(&self.prompt_bearings)
            .chain(&self.test_bearings)
    }

    /// Named transfer tasks of the two public benchmarks.
    pub fn preset(name: &str) -> Option<Self> {
        type Lists = (&'static [&'static str], &'static [&'static str], &'static [&'static str]);
        let (dataset, horizon, (sft, prompt, test)): (&str, usize, Lists) = match name {
            "femto-task1" => ("femto", FEMTO_HORIZON, (&["1-1", "1-2"], &["3-2"], &["3-3"])),
            "femto-task2" => ("femto", FEMTO_HORIZON, (&["2-1", "2-2"], &["3-2"], &["3-3"])),
            "femto-task3" => ("femto", FEMTO_HORIZON, (&["3-1", "3-2"], &["1-1"], &["1-3"])),
            "femto-task4" => ("femto", FEMTO_HORIZON, (&["2-1", "2-2"], &["1-1"], &["1-3"])),
            "femto-task5" => ("femto", FEMTO_HORIZON, (&["3-1", "3-2"], &["2-1"], &["2-3"])),
            "femto-task6" => ("femto", FEMTO_HORIZON, (&["1-1", "1-2"], &["2-1"], &["2-3"])),
            "xjtu-task1" => (
                "xjtu",
                XJTU_HORIZON,
                (&["2-1", "2-2", "2-3", "3-1"], &["1-2", "1-3"], &["1-4", "1-5"]),
            ),
            "xjtu-task2" => (
                "xjtu",
                XJTU_HORIZON,
                (&["1-1", "1-2", "1-3", "3-1", "3-2", "3-3"], &["2-2", "2-3"], &["2-4", "2-5"]),
            ),
            "xjtu-task3" => (
                "xjtu",
                XJTU_HORIZON,
                (&["1-1", "1-2", "1-3", "2-1", "2-2", "2-3"], &["3-2", "3-3"], &["3-4", "3-5"]),
            ),
            _ => return None,
        };
        let refs = |ids: &[&str]| ids.iter().map(|b| BearingRef::new(dataset, *b)).collect();
        Some(Self {
            name: name.to_string(),
            sft_bearings: refs(sft),
            prompt_bearings: refs(prompt),
            test_bearings: refs(test),
            lookback: DEFAULT_LOOKBACK,
            horizon,
        })
    }

    pub const PRESETS: [&'static str; 9] = [
        "femto-task1",
        "femto-task2",
        "femto-task3",
        "femto-task4",
        "femto-task5",
        "femto-task6",
        "xjtu-task1",
        "xjtu-task2",
        "xjtu-task3",
    ];
}

/// One supervised window: `lookback` feature rows and the following
/// `horizon` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub bearing: BearingRef,
    /// Row of the feature map where the input window starts.
    pub start: usize,
    pub input: Matrix,
    pub label: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskData {
    pub sft_samples: Vec<Sample>,
    pub prompt_samples: Vec<Sample>,
    pub test_samples: Vec<Sample>,
}

impl TaskData {
    /// `N_s`.
    pub fn source_count(&self) -> usize {
        self.sft_samples.len()
    }

    /// `N_t`.
    pub fn target_count(&self) -> usize {
        self.prompt_samples.len()
    }
}

/// Number of stride-1 windows a bearing of `rows` feature rows yields.
pub fn window_count(rows: usize, lookback: usize, horizon: usize) -> usize {
    (rows + 1).saturating_sub(lookback + horizon)
}

/// Stride-1 windows of one bearing: input rows `s..s+L`, labels
/// `s+L..s+L+T`.
pub fn bearing_windows(
    bearing: &BearingRef,
    features: &FeatureMap,
    labels: &RulSeries,
    lookback: usize,
    horizon: usize,
) -> Result<Vec<Sample>> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!(
            "bearing {bearing}: {} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.len() < lookback + horizon {
        return Err(Error::InvalidArgument(format!(
            "bearing {bearing} has {} rows, needs at least lookback + horizon = {}",
            features.len(),
            lookback + horizon
        )));
    }
    let dim = features.dim();
    Ok((0..window_count(features.len(), lookback, horizon))
        .map(|s| {
            let data = features.rows.as_slice()[s * dim..(s + lookback) * dim].to_vec();
            Sample {
                bearing: bearing.clone(),
                start: s,
                input: Matrix::from_vec(lookback, dim, data),
                label: labels.values[s + lookback..s + lookback + horizon].to_vec(),
            }
        })
        .collect())
}

/// Materialises the three sample sets of a task.
pub fn build_task(
    spec: &TaskSpec,
    features: &HashMap<BearingRef, FeatureMap>,
    labels: &HashMap<BearingRef, RulSeries>,
) -> Result<TaskData> {
    spec.validate()?;
    let collect = |list: &[BearingRef]| -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for b in list {
            let f = features
                .get(b)
                .ok_or_else(|| Error::MissingArtifact(format!("features for bearing {b}")))?;
            let l = labels
                .get(b)
                .ok_or_else(|| Error::MissingArtifact(format!("labels for bearing {b}")))?;
            out.extend(bearing_windows(b, f, l, spec.lookback, spec.horizon)?);
        }
        Ok(out)
    };
    Ok(TaskData {
        sft_samples: collect(&spec.sft_bearings)?,
        prompt_samples: collect(&spec.prompt_bearings)?,
        test_samples: collect(&spec.test_bearings)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn natural_order_handles_padding() {
        let mut names = vec!["acc_10.csv", "acc_2.csv", "acc_1.csv", "acc_00003.csv"];
        names.sort_by(|a, b| natural_cmp(a, b));
        assert_eq!(names, ["acc_1.csv", "acc_2.csv", "acc_00003.csv", "acc_10.csv"]);
        assert_eq!(natural_cmp("10.csv", "9.csv"), Ordering::Greater);
    }

    #[test]
    fn rul_examples() {
        let r = RulSeries::linear(101).unwrap();
        assert_eq!(r.values[0], 1.0);
        assert_eq!(*r.values.last().unwrap(), 0.0);
        assert!((r.values[25] - 0.75).abs() < 1e-15);
        assert!(RulSeries::linear(1).is_err());
    }

    proptest! {
        #[test]
        fn rul_is_monotone_and_recoverable(total in 2usize..5000) {
            let r = RulSeries::linear(total).unwrap();
            prop_assert!(r.values.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(r.values.iter().all(|v| (0.0..=1.0).contains(v)));
            let recovered = 1.0 / (r.values[0] - r.values[1]) + 1.0;
            prop_assert_eq!(recovered.round() as usize, total);
        }

        #[test]
        fn window_count_matches_enumeration(rows in 0usize..60, l in 1usize..20, t in 2usize..10) {
            let brute = (0..rows).filter(|&s| s + l + t <= rows).count();
            prop_assert_eq!(window_count(rows, l, t), brute);
        }
    }

    #[test]
    fn bearing_ref_parses() {
        let b: BearingRef = "femto/1-1".parse().unwrap();
        assert_eq!(b, BearingRef::new("femto", "1-1"));
        assert!("nodataset".parse::<BearingRef>().is_err());
    }

    #[test]
    fn presets_are_disjoint() {
        for name in TaskSpec::PRESETS {
            let spec = TaskSpec::preset(name).unwrap();
            spec.validate().unwrap();
        }
        let t1 = TaskSpec::preset("femto-task1").unwrap();
        assert_eq!(t1.sft_bearings, vec![BearingRef::new("femto", "1-1"), BearingRef::new("femto", "1-2")]);
        assert_eq!(t1.prompt_bearings, vec![BearingRef::new("femto", "3-2")]);
        assert_eq!(t1.test_bearings, vec![BearingRef::new("femto", "3-3")]);
        assert_eq!((t1.lookback, t1.horizon), (75, 25));
        assert_eq!(TaskSpec::preset("xjtu-task2").unwrap().horizon, 20);
    }

    #[test]
    fn task_validation() {
        let mut spec = TaskSpec::preset("femto-task1").unwrap();
        spec.test_bearings.push(BearingRef::new("femto", "1-1"));
        assert!(spec.validate().is_err());
        let mut spec = TaskSpec::preset("femto-task1").unwrap();
        spec.horizon = 1;
        assert!(spec.validate().is_err());
    }

    fn feature_map(rows: usize) -> FeatureMap {
        FeatureMap {
            rows: Matrix::from_vec(rows, 2, (0..rows * 2).map(|i| i as f64).collect()),
            fpt_offset: 0,
        }
    }

    #[test]
    fn windows_pair_inputs_with_following_labels() {
        let b = BearingRef::new("x", "1");
        let labels = RulSeries::linear(9).unwrap();
        let w = bearing_windows(&b, &feature_map(9), &labels, 3, 2).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w[0].input.row(0), &[0.0, 1.0]);
        assert_eq!(w[0].label, labels.values[3..5].to_vec());
        assert_eq!(w[4].label, labels.values[7..9].to_vec());
        let exact = bearing_windows(&b, &feature_map(5), &RulSeries::linear(5).unwrap(), 3, 2).unwrap();
        assert_eq!(exact.len(), 1);
        assert!(bearing_windows(&b, &feature_map(4), &RulSeries::linear(4).unwrap(), 3, 2).is_err());
    }

    #[test]
    fn build_task_reports_missing_bearings() {
        let mut spec = TaskSpec::preset("femto-task1").unwrap();
        spec.lookback = 3;
        spec.horizon = 2;
        let mut features = HashMap::new();
        let mut labels = HashMap::new();
        for b in spec.all_bearings() {
            features.insert(b.clone(), feature_map(10));
            labels.insert(b.clone(), RulSeries::linear(10).unwrap());
        }
        let data = build_task(&spec, &features, &labels).unwrap();
        assert_eq!(data.sft_samples.len(), 12);
        assert_eq!(data.prompt_samples.len(), 6);
        assert_eq!(data.test_samples.len(), 6);
        assert!(data.sft_samples.iter().all(|s| s.input.rows() == 3 && s.label.len() == 2));
        features.remove(&BearingRef::new("femto", "3-3"));
        assert!(matches!(build_task(&spec, &features, &labels), Err(Error::MissingArtifact(_))));
    }
}
