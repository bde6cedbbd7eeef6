//! Spectral frontend: STFT, mel filterbank, and log-mel features.
//!
//! Everything here is a pure function of its inputs. The filterbank and FFT
//! plan are precomputed once in a [`MelFrontend`] and shared across calls;
//! identical inputs produce bit-identical outputs.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::io::AudioClip;
use crate::{Error, Result};

/// Short-time Fourier transform parameters. Window and hop are in
/// milliseconds so the same config applies at any sample rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
        }
    }
}

impl StftConfig {
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced by a signal of `n_samples`: zero if shorter than one
    /// window, else `floor((n - win) / hop) + 1`.
    pub fn n_frames(&self, n_samples: usize, sample_rate: u32) -> usize {
        let win = self.window_len(sample_rate);
        if n_samples < win {
            0
        } else {
            (n_samples - win) / self.hop_len(sample_rate) + 1
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let win = self.window_len(sample_rate);
        if win == 0 || self.hop_len(sample_rate) == 0 {
            return Err(Error::InvalidConfig(format!(
                "window {} ms / hop {} ms collapse to zero samples at {} Hz",
                self.window_ms, self.hop_ms, sample_rate
            )));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "fft_size {} is not a power of two",
                self.fft_size
            )));
        }
        if self.fft_size < win {
            return Err(Error::InvalidConfig(format!(
                "fft_size {} smaller than the {win}-sample window",
                self.fft_size
            )));
        }
        Ok(())
    }
}

/// Full frontend configuration: STFT plus mel projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MelConfig {
    pub stft: StftConfig,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    /// Fixed output frame count; longer inputs are truncated to the first
    /// `frames` frames so the network input shape never varies.
    pub frames: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            n_mels: 64,
            fmin_hz: 0.0,
            fmax_hz: 8000.0,
            frames: 96,
        }
    }
}

impl MelConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        self.stft.validate(sample_rate)?;
        if self.n_mels == 0 || self.frames == 0 {
            return Err(Error::InvalidConfig(
                "n_mels and frames must be positive".into(),
            ));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(0.0 <= self.fmin_hz && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return Err(Error::InvalidRange(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got [{}, {}]",
                self.fmin_hz, self.fmax_hz
            )));
        }
        Ok(())
    }

    /// Minimum clip length in samples that yields `frames` full frames.
    pub fn min_samples(&self, sample_rate: u32) -> usize {
        (self.frames - 1) * self.stft.hop_len(sample_rate) + self.stft.window_len(sample_rate)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window of length `n`.
fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / n as f64).cos()))
        .collect()
}

/// Triangular mel filterbank over one-sided FFT bins. Rows are filters,
/// columns are bins; every row has at least one positive entry and each
/// triangle peaks at 1 with no further normalization.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<f64>,
    n_mels: usize,
    n_bins: usize,
    centers_hz: Vec<f64>,
    // Per-row half-open nonzero span, so apply() skips the zero columns.
    spans: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Hz center of each filter, strictly increasing.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weight(&self, mel: usize, bin: usize) -> f64 {
        self.weights[mel * self.n_bins + bin]
    }

    /// Projects one power spectrum (length `n_bins`) onto the mel bands.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins);
        debug_assert_eq!(out.len(), self.n_mels);
        for (m, &(lo, hi)) in self.spans.iter().enumerate() {
            let row = &self.weights[m * self.n_bins + lo..m * self.n_bins + hi];
            let mut acc = 0.0;
            for (w, p) in row.iter().zip(&power[lo..hi]) {
                acc += w * p;
            }
            out[m] = acc;
        }
    }
}

/// Builds the triangular filterbank for `cfg` at `sample_rate`.
pub fn mel_filterbank(cfg: &MelConfig, sample_rate: u32) -> Result<MelFilterbank> {
    cfg.validate(sample_rate)?;
    let n_bins = cfg.stft.n_bins();
    let n_mels = cfg.n_mels;

    // n_mels + 2 points equally spaced on the mel scale; point m is the
    // left edge of filter m, m+1 its center, m+2 its right edge.
    let mel_lo = hz_to_mel(cfg.fmin_hz);
    let mel_hi = hz_to_mel(cfg.fmax_hz);
    let step = (mel_hi - mel_lo) / (n_mels + 1) as f64;
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + step * i as f64))
        .collect();

    let bin_hz = sample_rate as f64 / cfg.stft.fft_size as f64;
    let mut weights = vec![0.0; n_mels * n_bins];
    let mut spans = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let mut lo = n_bins;
        let mut hi = 0;
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = ((f - left) / (center - left)).min((right - f) / (right - center));
            if w > 0.0 {
                weights[m * n_bins + k] = w;
                lo = lo.min(k);
                hi = hi.max(k + 1);
            }
        }
        if lo >= hi {
            return Err(Error::InvalidRange(format!(
                "mel filter {m} covers no FFT bin; n_mels {} too large for fft_size {}",
                n_mels, cfg.stft.fft_size
            )));
        }
        spans.push((lo, hi));
    }
    Ok(MelFilterbank {
        weights,
        n_mels,
        n_bins,
        centers_hz: edges_hz[1..=n_mels].to_vec(),
        spans,
    })
}

/// Log-mel feature matrix, row-major frames x n_mels. All values are finite
/// by construction (the log floor caps silence at ln(1e-10)).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Vec<f64>,
    n_frames: usize,
    n_mels: usize,
}

/// Power floor applied before the log, so silence maps to ln(1e-10).
pub const LOG_FLOOR: f64 = 1e-10;

const MELS_MAGIC: [u8; 4] = *b"MELS";
const MELS_VERSION: u32 = 1;

impl MelSpectrogram {
    pub fn new(values: Vec<f64>, n_frames: usize, n_mels: usize) -> Result<Self> {
        if values.len() != n_frames * n_mels {
            return Err(Error::LengthMismatch(values.len(), n_frames * n_mels));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite mel value".into()));
        }
        Ok(Self {
            values,
            n_frames,
            n_mels,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn get(&self, frame: usize, mel: usize) -> f64 {
        self.values[frame * self.n_mels + mel]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.n_mels..(frame + 1) * self.n_mels]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Serializes as a MELS blob: magic "MELS", u32 version, u32 frames,
    /// u32 n_mels, then frames*n_mels float32 little-endian row-major.
    pub fn write_blob<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&MELS_MAGIC)?;
        w.write_all(&MELS_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_frames as u32).to_le_bytes())?;
        w.write_all(&(self.n_mels as u32).to_le_bytes())?;
        for &v in &self.values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)
            .map_err(|_| Error::MalformedBlob("truncated header".into()))?;
        if head[0..4] != MELS_MAGIC {
            return Err(Error::MalformedBlob("bad magic".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != MELS_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: MELS_VERSION,
            });
        }
        let n_frames = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let n_mels = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
        let mut values = Vec::with_capacity(n_frames * n_mels);
        let mut buf = [0u8; 4];
        for _ in 0..n_frames * n_mels {
            r.read_exact(&mut buf)
                .map_err(|_| Error::MalformedBlob("truncated data".into()))?;
            values.push(f32::from_le_bytes(buf) as f64);
        }
        Self::new(values, n_frames, n_mels)
    }

    pub fn save_blob(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_blob(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_blob(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_blob(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Complex one-sided STFT: frame t covers samples [t*hop, t*hop + win),
/// Hann-windowed and zero-padded to `fft_size`.
pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<Vec<Vec<Complex64>>> {
    let sr = clip.sample_rate();
    cfg.validate(sr)?;
    let win = cfg.window_len(sr);
    let hop = cfg.hop_len(sr);
    let n_frames = cfg.n_frames(clip.len(), sr);
    if n_frames == 0 {
        return Err(Error::ClipTooShort(format!(
            "{} samples, need at least {win} for one frame",
            clip.len()
        )));
    }

    let window = hann_window(win);
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let samples = clip.samples();
    let n_bins = cfg.n_bins();

    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = vec![Complex64::default(); cfg.fft_size];
    for t in 0..n_frames {
        buf.iter_mut().for_each(|c| *c = Complex64::default());
        for n in 0..win {
            buf[n] = Complex64::new(window[n] * samples[t * hop + n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        frames.push(buf[..n_bins].to_vec());
    }
    Ok(frames)
}

/// Precomputed frontend: window, FFT plan, and filterbank built once.
/// Immutable after construction and shareable across threads.
pub struct MelFrontend {
    cfg: MelConfig,
    sample_rate: u32,
    window: Vec<f64>,
    hop: usize,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl MelFrontend {
    pub fn new(cfg: MelConfig, sample_rate: u32) -> Result<Self> {
        let filterbank = mel_filterbank(&cfg, sample_rate)?;
        let window = hann_window(cfg.stft.window_len(sample_rate));
        let hop = cfg.stft.hop_len(sample_rate);
        let fft = FftPlanner::new().plan_fft_forward(cfg.stft.fft_size);
        Ok(Self {
            cfg,
            sample_rate,
            window,
            hop,
            fft,
            filterbank,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Samples required for a full `cfg.frames`-frame output.
    pub fn min_samples(&self) -> usize {
        self.cfg.min_samples(self.sample_rate)
    }

    /// Log-mel features of the first `cfg.frames` frames of `clip`.
    pub fn log_mel(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::SampleRateMismatch(
                clip.sample_rate(),
                self.sample_rate,
            ));
        }
        let available = self.cfg.stft.n_frames(clip.len(), self.sample_rate);
        if available < self.cfg.frames {
            return Err(Error::ClipTooShort(format!(
                "{} samples yield {available} frames, need {} ({} samples)",
                clip.len(),
                self.cfg.frames,
                self.min_samples()
            )));
        }

        let fft_size = self.cfg.stft.fft_size;
        let n_bins = self.cfg.stft.n_bins();
        let win = self.window.len();
        let samples = clip.samples();
        let mut scratch = vec![Complex64::default(); self.fft.get_inplace_scratch_len()];
        let mut buf = vec![Complex64::default(); fft_size];
        let mut power = vec![0.0; n_bins];
        let mut mel_row = vec![0.0; self.cfg.n_mels];

        let mut values = Vec::with_capacity(self.cfg.frames * self.cfg.n_mels);
        for t in 0..self.cfg.frames {
            buf.iter_mut().for_each(|c| *c = Complex64::default());
            for n in 0..win {
                buf[n] = Complex64::new(self.window[n] * samples[t * self.hop + n], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_bins {
                power[k] = buf[k].norm_sqr();
            }
            self.filterbank.apply(&power, &mut mel_row);
            values.extend(mel_row.iter().map(|&e| e.max(LOG_FLOOR).ln()));
        }
        MelSpectrogram::new(values, self.cfg.frames, self.cfg.n_mels)
    }
}

/// One-shot convenience wrapper around [`MelFrontend`].
pub fn log_mel(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    MelFrontend::new(cfg.clone(), clip.sample_rate())?.log_mel(clip)
}
