//! Local scale perception representation: first-prediction-time truncation,
//! STFT energy features, band compression and channel-independent patching.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Number of history points required before the 3-sigma trigger may fire.
pub const FPT_MIN_HISTORY: usize = 3;
/// Consecutive exceedances required (`t`, `t+1`, `t+2`).
pub const FPT_CONSECUTIVE: usize = 3;

/// Root mean square of one window.
pub fn rms(window: &[f64]) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::InvalidArgument("rms of an empty window".into()));
    }
    let ss: f64 = window.iter().map(|x| x * x).sum();
    Ok((ss / window.len() as f64).sqrt())
}

/// Per-snapshot RMS values.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsSeries(pub Vec<f64>);

impl RmsSeries {
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        windows.into_iter().map(rms).collect::<Result<Vec<_>>>().map(Self)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FptResult {
    pub fpt_index: Option<usize>,
    /// `cv_t = mu_{t-1} + 3 sigma_{t-1}`; `None` until enough history exists.
    pub threshold_trace: Vec<Option<f64>>,
}

impl FptResult {
    /// Result for a run with FPT detection switched off.
    pub fn disabled() -> Self {
        Self {
            fpt_index: None,
            threshold_trace: Vec::new(),
        }
    }
}

/// Scans `t` upward and returns the first index where `RMS_t`, `RMS_{t+1}`
/// and `RMS_{t+2}` all strictly exceed the upper 3-sigma bound computed from
/// `RMS_0..RMS_{t-1}` (population statistics).
pub fn detect_fpt(rms: &RmsSeries) -> Result<FptResult> {
    let values = rms.values();
    if values.len() < FPT_MIN_HISTORY + 1 {
        return Err(Error::InvalidArgument(format!(
            "FPT detection needs at least {} RMS values, got {}",
            FPT_MIN_HISTORY + 1,
            values.len()
        )));
    }
    let mut trace = Vec::with_capacity(values.len());
    let mut fpt_index = None;
    // Welford running mean / sum of squared deviations over values[..t].
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for (t, &x) in values.iter().enumerate() {
        if t >= FPT_MIN_HISTORY {
            let sigma = (m2 / t as f64).sqrt();
            let cv = mean + 3.0 * sigma;
            trace.push(Some(cv));
            if fpt_index.is_none()
                && t + FPT_CONSECUTIVE <= values.len()
                && values[t..t + FPT_CONSECUTIVE].iter().all(|&r| r > cv)
            {
                fpt_index = Some(t);
            }
        } else {
            trace.push(None);
        }
        let count = (t + 1) as f64;
        let delta = x - mean;
        mean += delta / count;
        m2 += delta * (x - mean);
    }
    Ok(FptResult {
        fpt_index,
        threshold_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFn {
    Hann,
    Rectangular,
}

impl WindowFn {
    pub fn name(self) -> &'static str {
        match self {
            WindowFn::Hann => "hann",
            WindowFn::Rectangular => "rectangular",
        }
    }

    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowFn::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
            WindowFn::Rectangular => vec![1.0; n],
        }
    }
}

/// STFT framing. Frames are centred on multiples of the stride with
/// edge-replicated padding of half a frame on each side, so a signal of `len`
/// samples yields `floor(len / stride) + 1` frames. Bins `1..=frame/2` are
/// kept (DC dropped).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sampling_rate: f64,
    /// Seconds.
    pub frame_width: f64,
    /// Seconds.
    pub frame_stride: f64,
    pub window: WindowFn,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            sampling_rate: 25_600.0,
            frame_width: 0.020,
            frame_stride: 0.010,
            window: WindowFn::Hann,
        }
    }
}

impl StftConfig {
    pub fn frame_len(&self) -> usize {
        (self.frame_width * self.sampling_rate).round() as usize
    }

    pub fn stride_len(&self) -> usize {
        (self.frame_stride * self.sampling_rate).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.frame_len() / 2
    }

    pub fn n_frames(&self, signal_len: usize) -> usize {
        signal_len / self.stride_len() + 1
    }
}

/// Energy spectrogram, `frames × bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub energies: Matrix,
    pub frame_width: f64,
    pub frame_stride: f64,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.energies.rows()
    }

    pub fn n_bins(&self) -> usize {
        self.energies.cols()
    }
}

/// Reusable STFT plan for one configuration.
pub struct Stft {
    cfg: StftConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        if cfg.sampling_rate <= 0.0 {
            return Err(Error::InvalidArgument("sampling rate must be positive".into()));
        }
        if cfg.stride_len() == 0 {
            return Err(Error::InvalidArgument("frame stride must be positive".into()));
        }
        let frame = cfg.frame_len();
        if frame < 2 {
            return Err(Error::InvalidArgument("frame width must cover at least 2 samples".into()));
        }
        let fft = FftPlanner::new().plan_fft_forward(frame);
        Ok(Self {
            cfg,
            fft,
            window: cfg.window.coefficients(frame),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn energy(&self, signal: &[f64]) -> Result<Spectrogram> {
        let frame = self.cfg.frame_len();
        let stride = self.cfg.stride_len();
        if signal.len() < frame {
            return Err(Error::InvalidArgument(format!(
                "signal of {} samples is shorter than the {frame}-sample frame",
                signal.len()
            )));
        }
        let half = frame / 2;
        let n_frames = self.cfg.n_frames(signal.len());
        let n_bins = self.cfg.n_bins();
        let last = signal.len() as isize - 1;
        let mut energies = Matrix::zeros(n_frames, n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); frame];
        for f in 0..n_frames {
            let start = (f * stride) as isize - half as isize;
            for (i, slot) in buf.iter_mut().enumerate() {
                let idx = (start + i as isize).clamp(0, last) as usize;
                *slot = Complex::new(signal[idx] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (b, e) in energies.row_mut(f).iter_mut().enumerate() {
                *e = buf[b + 1].norm_sqr();
            }
        }
        Ok(Spectrogram {
            energies,
            frame_width: self.cfg.frame_width,
            frame_stride: self.cfg.frame_stride,
        })
    }
}

pub fn stft_energy(signal: &[f64], cfg: &StftConfig) -> Result<Spectrogram> {
    Stft::new(*cfg)?.energy(signal)
}

/// Averages energy over contiguous frequency bands and all frames.
/// Band `j` covers bins `floor(j*B/d_out) .. floor((j+1)*B/d_out)`.
pub fn compress_features(spec: &Spectrogram, d_out: usize) -> Result<Vec<f64>> {
    let n_bins = spec.n_bins();
    if d_out == 0 || d_out > n_bins {
        return Err(Error::InvalidArgument(format!(
            "cannot compress {n_bins} frequency bins into {d_out} bands"
        )));
    }
    let frames = spec.n_frames();
    let mut out = Vec::with_capacity(d_out);
    for j in 0..d_out {
        let lo = j * n_bins / d_out;
        let hi = (j + 1) * n_bins / d_out;
        let mut acc = 0.0;
        for f in 0..frames {
            acc += spec.energies.row(f)[lo..hi].iter().sum::<f64>();
        }
        out.push(acc / ((hi - lo) * frames) as f64);
    }
    Ok(out)
}

/// Degradation feature map: one row per snapshot from the FPT onward.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub rows: Matrix,
    /// Index of the first row in the original life.
    pub fpt_offset: usize,
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }
}

pub fn assemble_feature_map(vectors: &[Vec<f64>], fpt: &FptResult) -> Result<FeatureMap> {
    let dim = vectors
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidArgument("no feature vectors".into()))?;
    if let Some(bad) = vectors.iter().position(|v| v.len() != dim) {
        return Err(Error::Shape(format!(
            "feature vector {bad} has dimension {}, expected {dim}",
            vectors[bad].len()
        )));
    }
    let start = fpt.fpt_index.unwrap_or(0);
    if start >= vectors.len() {
        return Err(Error::InvalidArgument(format!(
            "FPT index {start} beyond {} feature vectors",
            vectors.len()
        )));
    }
    if let Some(bad) = vectors.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Numerical(format!("feature vector {bad} is not finite")));
    }
    Ok(FeatureMap {
        rows: Matrix::from_rows(&vectors[start..]),
        fpt_offset: start,
    })
}

/// Number of patches for a length-`len` sequence: `floor((len-P)/S) + 2`.
pub fn patch_count(len: usize, patch: usize, stride: usize) -> usize {
    (len - patch) / stride + 2
}

/// For each patch element, the index into the unpadded sequence it reads.
/// Padding repeats the last value, so padded positions clamp to `len - 1`.
pub fn patch_indices(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if stride < 1 {
        return Err(Error::InvalidArgument("patch stride must be at least 1".into()));
    }
    if patch < 1 || patch > len {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch} must lie in 1..={len}"
        )));
    }
    let n = patch_count(len, patch, stride);
    let mut idx = Vec::with_capacity(n * patch);
    for i in 0..n {
        for j in 0..patch {
            idx.push((i * stride + j).min(len - 1));
        }
    }
    Ok(idx)
}

/// Splits one channel into an `N×P` patch matrix after padding the end with
/// `S` copies of the last value.
pub fn patch(channel: &[f64], patch_size: usize, stride: usize) -> Result<Matrix> {
    let idx = patch_indices(channel.len(), patch_size, stride)?;
    let n = idx.len() / patch_size;
    Ok(Matrix::from_vec(
        n,
        patch_size,
        idx.into_iter().map(|i| channel[i]).collect(),
    ))
}

/// `D×N×P` patches, one matrix per feature channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Matrix>,
    pub patch_size: usize,
    pub stride: usize,
}

/// Patches every column of an `L×D` window independently.
pub fn patch_channels(window: &Matrix, patch_size: usize, stride: usize) -> Result<PatchSet> {
    let patches = (0..window.cols())
        .map(|c| patch(&window.column(c), patch_size, stride))
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSet {
        patches,
        patch_size,
        stride,
    })
}
