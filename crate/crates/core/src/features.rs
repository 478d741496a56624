//! Log linear-filterbank (LFB) features and frequency-masking augmentation.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

impl std::str::FromStr for WindowKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "hann" => Ok(Self::Hann),
            "rectangular" => Ok(Self::Rectangular),
            _ => Err(format!("unknown window `{s}` (hann|rectangular)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub n_bands: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub window: WindowKind,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_bands: 60,
            win_ms: 30.0,
            hop_ms: 10.0,
            n_fft: 512,
            window: WindowKind::Hann,
            log_floor: 1e-30,
        }
    }
}

impl FeatureConfig {
    pub fn win_len(&self, sample_rate: u32) -> usize {
        (self.win_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for `n_samples` inputs (no centering, frames start at 0).
    pub fn n_frames(&self, n_samples: usize, sample_rate: u32) -> Option<usize> {
        let win = self.win_len(sample_rate);
        let hop = self.hop_len(sample_rate);
        (n_samples >= win && hop > 0).then(|| (n_samples - win) / hop + 1)
    }
}

/// Dense row-major `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }
}

pub fn window(kind: WindowKind, len: usize) -> Vec<f64> {
    match kind {
        WindowKind::Hann => (0..len)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
            .collect(),
        WindowKind::Rectangular => vec![1.0; len],
    }
}

/// Triangular filters with peaks linearly spaced between 0 Hz and `f_max`.
///
/// Filter `k` rises from edge `k` to a unit peak at edge `k + 1` and falls to
/// zero at edge `k + 2`, where the `n_bands + 2` edges split `[0, f_max]`
/// evenly; neighbouring filters overlap by half their support.
pub fn linear_filterbank(n_bands: usize, n_bins: usize, sample_rate: u32, f_max: f64) -> Result<Matrix> {
    if n_bands == 0 || n_bins < 2 {
        return Err(Error::Contract("filterbank needs at least one band and two bins".into()));
    }
    let n_fft = 2 * (n_bins - 1);
    let spacing = f_max / (n_bands + 1) as f64;
    let mut fb = Matrix::zeros(n_bands, n_bins);
    for k in 0..n_bands {
        let (lo, center, hi) = (k as f64 * spacing, (k + 1) as f64 * spacing, (k + 2) as f64 * spacing);
        for j in 0..n_bins {
            let f = j as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb.values[k * n_bins + j] = w;
        }
    }
    Ok(fb)
}

pub fn filter_centers(n_bands: usize, f_max: f64) -> Vec<f64> {
    let spacing = f_max / (n_bands + 1) as f64;
    (1..=n_bands).map(|k| k as f64 * spacing).collect()
}

/// `n_bands x n_frames` log filterbank energies, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    n_bands: usize,
    n_frames: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(n_bands: usize, n_frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_bands * n_frames {
            return Err(Error::dim(format!(
                "feature map {n_bands}x{n_frames} needs {} values, got {}",
                n_bands * n_frames,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("feature map contains non-finite values".into()));
        }
        Ok(Self { n_bands, n_frames, values })
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, band: usize) -> &[f64] {
        &self.values[band * self.n_frames..(band + 1) * self.n_frames]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Reusable STFT + filterbank pipeline for one configuration.
pub struct LfbExtractor {
    cfg: FeatureConfig,
    sample_rate: u32,
    window: Vec<f64>,
    filterbank: Matrix,
    fft: Arc<dyn Fft<f64>>,
}

impl LfbExtractor {
    pub fn new(cfg: FeatureConfig, sample_rate: u32) -> Result<Self> {
        let win = cfg.win_len(sample_rate);
        if win == 0 || win > cfg.n_fft || cfg.hop_len(sample_rate) == 0 {
            return Err(Error::Config(format!(
                "window of {win} samples must be in 1..={} and hop positive",
                cfg.n_fft
            )));
        }
        let filterbank = linear_filterbank(cfg.n_bands, cfg.n_bins(), sample_rate, sample_rate as f64 / 2.0)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            window: window(cfg.window, win),
            cfg,
            sample_rate,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Matrix {
        &self.filterbank
    }

    /// One-sided power spectrogram `|STFT|^2`, shape `n_bins x n_frames`.
    pub fn stft_power(&self, w: &Waveform) -> Result<Matrix> {
        if w.sample_rate() != self.sample_rate {
            return Err(Error::UnsupportedFormat(format!(
                "waveform at {} Hz, extractor built for {} Hz",
                w.sample_rate(),
                self.sample_rate
            )));
        }
        let win = self.window.len();
        let hop = self.cfg.hop_len(self.sample_rate);
        let n_frames = self.cfg.n_frames(w.len(), self.sample_rate).ok_or_else(|| Error::Size {
            layer: "stft".into(),
            msg: format!("waveform of {} samples is shorter than one {win}-sample window", w.len()),
        })?;
        let n_bins = self.cfg.n_bins();
        let mut out = Matrix::zeros(n_bins, n_frames);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let samples = w.samples();
        for t in 0..n_frames {
            let frame = &samples[t * hop..t * hop + win];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = Complex::new(if i < win { frame[i] * self.window[i] } else { 0.0 }, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, c) in buf.iter().take(n_bins).enumerate() {
                out.values[k * n_frames + t] = c.norm_sqr();
            }
        }
        Ok(out)
    }

    /// `log(max(filterbank @ power, floor))`.
    pub fn extract(&self, w: &Waveform) -> Result<FeatureMap> {
        let power = self.stft_power(w)?;
        let (n_bands, n_frames) = (self.cfg.n_bands, power.cols);
        let mut values = vec![0.0; n_bands * n_frames];
        for b in 0..n_bands {
            let weights = self.filterbank.row(b);
            let dst = &mut values[b * n_frames..(b + 1) * n_frames];
            for (k, &wk) in weights.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                for (d, p) in dst.iter_mut().zip(power.row(k)) {
                    *d += wk * p;
                }
            }
            for d in dst.iter_mut() {
                *d = d.max(self.cfg.log_floor).ln();
            }
        }
        FeatureMap::new(n_bands, n_frames, values)
    }
}

pub fn stft_power(w: &Waveform, cfg: &FeatureConfig) -> Result<Matrix> {
    LfbExtractor::new(cfg.clone(), w.sample_rate())?.stft_power(w)
}

pub fn lfb(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMap> {
    LfbExtractor::new(cfg.clone(), w.sample_rate())?.extract(w)
}

/// A contiguous run of masked frequency bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreqMask {
    pub start_band: usize,
    pub width: usize,
}

impl FreqMask {
    pub const EMPTY: FreqMask = FreqMask { start_band: 0, width: 0 };

    pub fn end_band(&self) -> usize {
        self.start_band + self.width
    }
}

/// Width uniform on `0..=max_width`, then start uniform on `0..=n_bands-width`.
pub fn sample_freq_mask<R: Rng>(rng: &mut R, n_bands: usize, max_width: usize) -> Result<FreqMask> {
    if max_width > n_bands {
        return Err(Error::Contract(format!(
            "mask width limit {max_width} exceeds {n_bands} bands"
        )));
    }
    let width = rng.gen_range(0..=max_width);
    let start_band = rng.gen_range(0..=n_bands - width);
    Ok(FreqMask { start_band, width })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskFill {
    /// Mean of the unmasked entries of the utterance.
    Mean,
    Zero,
}

impl std::str::FromStr for MaskFill {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "zero" => Ok(Self::Zero),
            _ => Err(format!("unknown mask fill `{s}` (mean|zero)")),
        }
    }
}

/// Fill value for masking `f` with `m`.
///
/// The mean excludes the masked rows so the masked values have no influence
/// on the result; a mask covering every band falls back to the full mean.
pub fn mask_fill_value(f: &FeatureMap, m: FreqMask, fill: MaskFill) -> f64 {
    match fill {
        MaskFill::Zero => 0.0,
        MaskFill::Mean => {
            let visible: Vec<usize> = (0..f.n_bands).filter(|b| *b < m.start_band || *b >= m.end_band()).collect();
            if visible.is_empty() {
                return f.mean();
            }
            let sum: f64 = visible.iter().map(|&b| f.row(b).iter().sum::<f64>()).sum();
            sum / (visible.len() * f.n_frames) as f64
        }
    }
}

/// Replace rows `[start, start + width)` with `fill`.
pub fn apply_freq_mask(f: &FeatureMap, m: FreqMask, fill: f64) -> Result<FeatureMap> {
    if m.end_band() > f.n_bands {
        return Err(Error::Contract(format!(
            "mask {}..{} exceeds {} bands",
            m.start_band,
            m.end_band(),
            f.n_bands
        )));
    }
    let mut out = f.clone();
    out.values[m.start_band * f.n_frames..m.end_band() * f.n_frames]
        .iter_mut()
        .for_each(|v| *v = fill);
    Ok(out)
}

const CACHE_MAGIC: &[u8; 4] = b"LFB1";

/// Serialize `(utt_id, features)` records as a feature cache.
///
/// Each record: `"LFB1"`, `n_bands: u32`, `n_frames: u32`, `id_len: u32`,
/// `id` (UTF-8), then `n_bands * n_frames` row-major `f32`; all little-endian.
pub fn encode_cache(records: &[(String, FeatureMap)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (id, f) in records {
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(f.n_bands as u32).to_le_bytes());
        out.extend_from_slice(&(f.n_frames as u32).to_le_bytes());
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for &v in &f.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_cache(mut bytes: &[u8]) -> Result<Vec<(String, FeatureMap)>> {
    let trunc = |_| Error::Format("truncated feature cache".into());
    let mut records = Vec::new();
    while !bytes.is_empty() {
        let mut head = [0u8; 16];
        bytes.read_exact(&mut head).map_err(trunc)?;
        if &head[..4] != CACHE_MAGIC {
            return Err(Error::Format("bad feature cache record magic".into()));
        }
        let u = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap()) as usize;
        let (n_bands, n_frames, id_len) = (u(4), u(8), u(12));
        let mut id = vec![0u8; id_len];
        bytes.read_exact(&mut id).map_err(trunc)?;
        let id = String::from_utf8(id).map_err(|_| Error::Format("utterance id is not UTF-8".into()))?;
        let mut raw = vec![0u8; n_bands * n_frames * 4];
        bytes.read_exact(&mut raw).map_err(trunc)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        records.push((id, FeatureMap::new(n_bands, n_frames, values)?));
    }
    Ok(records)
}

pub fn write_cache(path: &Path, records: &[(String, FeatureMap)]) -> Result<()> {
    fs::write(path, encode_cache(records)).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<Vec<(String, FeatureMap)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes)
}
