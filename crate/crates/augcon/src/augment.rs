//! Waveform and spectrogram augmentations plus the anchor/positive pair
//! sampler that feeds contrastive training.
//!
//! Every transform takes an explicit RNG and is a pure function of
//! (input, parameters, rng state). `make_pairs` derives one RNG stream per
//! batch row from `(seed, row)`, so serial and parallel execution produce
//! bit-identical batches.

use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{MelFrontend, MelSpectrogram};
use crate::io::AudioClip;
use crate::{Error, Result};

/// All segments fed to the frontend are one second long.
pub const SEGMENT_SECONDS: f64 = 1.0;

/// Toggles and parameters for the augmentation pipeline. Anchors always
/// receive chunk noise; the three flags control the positive branch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub time_stretch: bool,
    pub rir: bool,
    pub mask: bool,
    /// Relative speed change; the stretch factors are 1 +/- this value.
    pub stretch_factor: f64,
    /// Probability of speeding up rather than slowing down.
    pub stretch_prob: f64,
    /// Closed SNR interval in dB for the anchor's chunk noise.
    pub noise_snr_db_range: [f64; 2],
    pub mask_t_max: usize,
    pub mask_f_max: usize,
    /// Loaded from a directory of WAVs (or synthesized); not serialized.
    #[serde(skip)]
    pub rir_bank: Vec<Rir>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            time_stretch: false,
            rir: false,
            mask: false,
            stretch_factor: 0.1,
            stretch_prob: 0.5,
            noise_snr_db_range: [5.0, 20.0],
            mask_t_max: 24,
            mask_f_max: 12,
            rir_bank: Vec::new(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, frames: usize, n_mels: usize) -> Result<()> {
        if !(self.stretch_factor > 0.0 && self.stretch_factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "stretch_factor must lie in (0, 1), got {}",
                self.stretch_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.stretch_prob) {
            return Err(Error::InvalidConfig(format!(
                "stretch_prob must lie in [0, 1], got {}",
                self.stretch_prob
            )));
        }
        let [lo, hi] = self.noise_snr_db_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidConfig(format!(
                "noise_snr_db_range must be a finite [lo, hi], got [{lo}, {hi}]"
            )));
        }
        if self.mask_t_max > frames || self.mask_f_max > n_mels {
            return Err(Error::InvalidConfig(format!(
                "mask widths ({}, {}) exceed spectrogram shape ({frames}, {n_mels})",
                self.mask_t_max, self.mask_f_max
            )));
        }
        if self.rir && self.rir_bank.is_empty() {
            return Err(Error::InvalidConfig(
                "rir augmentation enabled but the RIR bank is empty".into(),
            ));
        }
        Ok(())
    }
}

/// The five named augmentation strategies. Each is just a flag pattern on
/// [`AugmentConfig`]; chunk noise on the anchor is common to all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Noise,
    Stretch,
    Rir,
    Mask,
    StretchMask,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Noise,
        Strategy::Stretch,
        Strategy::Rir,
        Strategy::Mask,
        Strategy::StretchMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Noise => "noise",
            Strategy::Stretch => "stretch",
            Strategy::Rir => "rir",
            Strategy::Mask => "mask",
            Strategy::StretchMask => "stretch+mask",
        }
    }

    /// Sets the three block flags on `cfg` accordingly.
    pub fn configure(self, cfg: &mut AugmentConfig) {
        cfg.time_stretch = matches!(self, Strategy::Stretch | Strategy::StretchMask);
        cfg.rir = matches!(self, Strategy::Rir);
        cfg.mask = matches!(self, Strategy::Mask | Strategy::StretchMask);
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown strategy {s:?}; expected one of noise, stretch, rir, mask, stretch+mask"
                ))
            })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A finite impulse response with positive energy.
#[derive(Debug, Clone)]
pub struct Rir {
    taps: Vec<f64>,
    sample_rate: u32,
}

impl Rir {
    pub fn new(taps: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::InvalidConfig("empty impulse response".into()));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("non-finite impulse response".into()));
        }
        if taps.iter().map(|t| t * t).sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig("zero-energy impulse response".into()));
        }
        Ok(Self { taps, sample_rate })
    }

    pub fn from_clip(clip: &AudioClip) -> Result<Self> {
        Self::new(clip.samples().to_vec(), clip.sample_rate())
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// One training batch: `anchors[i]` and `positives[i]` come from the same
/// source clip; the positives of other rows act as anchor i's negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub anchors: Vec<MelSpectrogram>,
    pub positives: Vec<MelSpectrogram>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Adds white Gaussian noise to one uniformly chosen `chunk_s`-second chunk,
/// scaled so the chunk's signal-to-noise power ratio is `10^(snr_db/10)`.
/// Samples outside the chunk are untouched. A silent chunk (power < 1e-12)
/// gets noise at the fixed reference power 1e-4 instead.
///
/// Draws, in order: chunk start, then one standard normal per chunk sample.
pub fn add_chunk_noise(
    clip: &AudioClip,
    snr_db: f64,
    chunk_s: f64,
    rng: &mut impl Rng,
) -> Result<AudioClip> {
    let chunk_len = (chunk_s * clip.sample_rate() as f64).round() as usize;
    if chunk_len == 0 || !snr_db.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "bad chunk noise parameters: chunk_s {chunk_s}, snr_db {snr_db}"
        )));
    }
    if clip.len() < chunk_len {
        return Err(Error::ClipTooShort(format!(
            "{} samples, chunk needs {chunk_len}",
            clip.len()
        )));
    }

    let start = rng.random_range(0..=clip.len() - chunk_len);
    let chunk = &clip.samples()[start..start + chunk_len];
    let signal_power = chunk.iter().map(|s| s * s).sum::<f64>() / chunk_len as f64;
    let noise_power = if signal_power < 1e-12 {
        1e-4
    } else {
        signal_power / 10f64.powf(snr_db / 10.0)
    };
    let sigma = noise_power.sqrt();

    let mut samples = clip.samples().to_vec();
    for s in &mut samples[start..start + chunk_len] {
        let g: f64 = StandardNormal.sample(rng);
        *s += sigma * g;
    }
    Ok(clip.with_samples(samples))
}

/// Resamples by linear interpolation: output length `round(N / factor)`,
/// output position m reads input position `m * factor`. Factors above 1
/// speed the clip up (shorter output, higher pitch).
pub fn resample_by_factor(clip: &AudioClip, factor: f64) -> AudioClip {
    let n = clip.len();
    let samples = clip.samples();
    let out_len = (n as f64 / factor).round() as usize;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let pos = m as f64 * factor;
        let i = (pos.floor() as usize).min(n - 1);
        let frac = pos - i as f64;
        let next = samples[(i + 1).min(n - 1)];
        out.push(samples[i] + frac * (next - samples[i]));
    }
    clip.with_samples(out)
}

/// Speeds the whole clip up by `1 + stretch_factor` with probability
/// `stretch_prob`, else slows it down by `1 - stretch_factor`. One draw.
pub fn time_stretch(clip: &AudioClip, cfg: &AugmentConfig, rng: &mut impl Rng) -> AudioClip {
    let factor = if rng.random_bool(cfg.stretch_prob) {
        1.0 + cfg.stretch_factor
    } else {
        1.0 - cfg.stretch_factor
    };
    resample_by_factor(clip, factor)
}

// Above this output-size * kernel-size product the FFT path wins.
const FFT_CONV_CUTOFF: usize = 1 << 18;

fn convolve_direct(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len() + h.len() - 1];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (j, &hj) in h.iter().enumerate() {
            out[i + j] += xi * hj;
        }
    }
    out
}

pub(crate) fn convolve_fft(x: &[f64], h: &[f64]) -> Vec<f64> {
    let out_len = x.len() + h.len() - 1;
    let size = out_len.next_power_of_two();
    let mut planner = rustfft::FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);

    let mut fx: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fx.resize(size, Complex64::default());
    let mut fh: Vec<Complex64> = h.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fh.resize(size, Complex64::default());
    fwd.process(&mut fx);
    fwd.process(&mut fh);
    for (a, b) in fx.iter_mut().zip(&fh) {
        *a *= b;
    }
    inv.process(&mut fx);
    fx[..out_len].iter().map(|c| c.re / size as f64).collect()
}

/// Full linear convolution, length `x.len() + h.len() - 1`. Small products
/// run the direct O(N*M) loop; large ones go through the FFT, which matches
/// the direct path to well below 1e-6 relative.
pub fn convolve_full(x: &[f64], h: &[f64]) -> Vec<f64> {
    assert!(!x.is_empty() && !h.is_empty(), "convolution of empty signal");
    if x.len() * h.len() <= FFT_CONV_CUTOFF {
        convolve_direct(x, h)
    } else {
        convolve_fft(x, h)
    }
}

/// Convolves the segment with the impulse response, truncates back to the
/// input length, and rescales to the input's RMS so reverberation does not
/// double as a gain change.
pub fn rir_filter(segment: &AudioClip, rir: &Rir) -> Result<AudioClip> {
    if rir.sample_rate() != segment.sample_rate() {
        return Err(Error::SampleRateMismatch(
            rir.sample_rate(),
            segment.sample_rate(),
        ));
    }
    let mut out = convolve_full(segment.samples(), rir.taps());
    out.truncate(segment.len());

    let in_rms = segment.rms();
    let out_rms = (out.iter().map(|s| s * s).sum::<f64>() / out.len() as f64).sqrt();
    if in_rms > 0.0 && out_rms > 0.0 {
        let scale = in_rms / out_rms;
        for s in &mut out {
            *s *= scale;
        }
    }
    Ok(segment.with_samples(out))
}

/// Synthesizes an exponentially decaying white-noise impulse response:
/// `taps[n] = g[n] * exp(-6.908 n / (rt60 * sr))` with g standard normal.
/// The constant is ln(1000), placing the -60 dB point at `rt60_s`.
pub fn synth_rir(rt60_s: f64, sample_rate: u32, rng: &mut impl Rng) -> Result<Rir> {
    if !(rt60_s > 0.05 && rt60_s <= 1.0) {
        return Err(Error::InvalidRt60(rt60_s));
    }
    let len = (rt60_s * sample_rate as f64).ceil() as usize;
    let decay = 6.908 / (rt60_s * sample_rate as f64);
    let taps = (0..len)
        .map(|n| {
            let g: f64 = StandardNormal.sample(rng);
            g * (-decay * n as f64).exp()
        })
        .collect();
    Rir::new(taps, sample_rate)
}

fn fill_bands(
    mel: &MelSpectrogram,
    t_start: usize,
    t_width: usize,
    f_start: usize,
    f_width: usize,
    fill: f64,
) -> MelSpectrogram {
    let (n_frames, n_mels) = (mel.n_frames(), mel.n_mels());
    let mut out = mel.clone();
    let values = out.values_mut();
    for t in t_start..t_start + t_width {
        for v in &mut values[t * n_mels..(t + 1) * n_mels] {
            *v = fill;
        }
    }
    for t in 0..n_frames {
        for v in &mut values[t * n_mels + f_start..t * n_mels + f_start + f_width] {
            *v = fill;
        }
    }
    out
}

/// Masks one time band and one frequency band with the spectrogram's global
/// mean. Widths are drawn from the inclusive ranges {0..=mask_t_max} and
/// {0..=mask_f_max}; starts are uniform over the valid positions.
///
/// Draws, in order: time width, time start, freq width, freq start.
pub fn time_freq_mask(
    mel: &MelSpectrogram,
    mask_t_max: usize,
    mask_f_max: usize,
    rng: &mut impl Rng,
) -> MelSpectrogram {
    assert!(mask_t_max <= mel.n_frames() && mask_f_max <= mel.n_mels());
    let fill = mel.mean();
    let t_width = rng.random_range(0..=mask_t_max);
    let t_start = rng.random_range(0..=mel.n_frames() - t_width);
    let f_width = rng.random_range(0..=mask_f_max);
    let f_start = rng.random_range(0..=mel.n_mels() - f_width);
    fill_bands(mel, t_start, t_width, f_start, f_width, fill)
}

fn segment_len(sample_rate: u32) -> usize {
    (SEGMENT_SECONDS * sample_rate as f64).round() as usize
}

/// The anchor branch: chunk noise on the raw clip, then a random 1 s
/// segment, then log-mel.
///
/// Draws, in order: SNR, then the chunk-noise draws, then segment start.
pub fn augment_anchor(
    clip: &AudioClip,
    cfg: &AugmentConfig,
    frontend: &MelFrontend,
    rng: &mut impl Rng,
) -> Result<MelSpectrogram> {
    let [lo, hi] = cfg.noise_snr_db_range;
    let snr_db = rng.random_range(lo..=hi);
    let noisy = add_chunk_noise(clip, snr_db, SEGMENT_SECONDS, rng)?;
    let seg_len = segment_len(noisy.sample_rate());
    let start = rng.random_range(0..=noisy.len() - seg_len);
    frontend.log_mel(&noisy.segment(start, seg_len)?)
}

/// The positive branch: optional whole-clip time stretch, a random 1 s
/// segment, optional RIR filtering, log-mel, optional time/freq masking.
///
/// Draws, in order: stretch coin (if enabled), segment start, RIR index
/// (if enabled), then the mask draws (if enabled).
pub fn augment_positive(
    clip: &AudioClip,
    cfg: &AugmentConfig,
    frontend: &MelFrontend,
    rng: &mut impl Rng,
) -> Result<MelSpectrogram> {
    let stretched;
    let source = if cfg.time_stretch {
        stretched = time_stretch(clip, cfg, rng);
        &stretched
    } else {
        clip
    };

    let seg_len = segment_len(source.sample_rate());
    if source.len() < seg_len {
        return Err(Error::ClipTooShort(format!(
            "{} samples after stretching, segment needs {seg_len}",
            source.len()
        )));
    }
    let start = rng.random_range(0..=source.len() - seg_len);
    let mut segment = source.segment(start, seg_len)?;

    if cfg.rir {
        let idx = rng.random_range(0..cfg.rir_bank.len());
        segment = rir_filter(&segment, &cfg.rir_bank[idx])?;
    }

    let mel = frontend.log_mel(&segment)?;
    Ok(if cfg.mask {
        time_freq_mask(&mel, cfg.mask_t_max, cfg.mask_f_max, rng)
    } else {
        mel
    })
}

/// Builds one contrastive batch. Row i runs the anchor branch then the
/// positive branch on a ChaCha8 stream derived from `(seed, i)`, so the
/// result is a pure function of (batch, cfg, seed) regardless of thread
/// count. Requires B >= 2 (the other rows supply the negatives) and clips
/// of at least two segment lengths.
pub fn make_pairs(
    batch: &[AudioClip],
    cfg: &AugmentConfig,
    frontend: &MelFrontend,
    seed: u64,
) -> Result<PairBatch> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall {
            got: batch.len(),
            need: 2,
        });
    }
    cfg.validate(frontend.config().frames, frontend.config().n_mels)?;
    for clip in batch {
        let need = 2 * segment_len(clip.sample_rate());
        if clip.len() < need {
            return Err(Error::ClipTooShort(format!(
                "{} samples, pair sampling needs {need}",
                clip.len()
            )));
        }
    }

    let rows: Vec<(MelSpectrogram, MelSpectrogram)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let anchor = augment_anchor(clip, cfg, frontend, &mut rng)?;
            let positive = augment_positive(clip, cfg, frontend, &mut rng)?;
            Ok((anchor, positive))
        })
        .collect::<Result<_>>()?;

    let (anchors, positives) = rows.into_iter().unzip();
    Ok(PairBatch { anchors, positives })
}
