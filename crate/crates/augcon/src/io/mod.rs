//! Audio and dataset I/O: WAV files, JSON-lines manifests, and a labeled
//! synthetic corpus generator so the pipeline runs without external data.

mod corpus;
mod manifest;
mod wav;

pub use corpus::{generate_synthetic_corpus, synth_clip, CorpusSpec};
pub use manifest::{read_manifest, write_manifest, ManifestEntry, Split};
pub use wav::{load_wav, wav_duration_seconds, write_wav};

use crate::{Error, Result};

/// A mono waveform with its sample rate. Samples are amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    /// Wraps samples, enforcing the type invariants: nonempty, all finite,
    /// positive sample rate.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidConfig("audio clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(Error::InvalidConfig(
                "audio clip contains non-finite samples".into(),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copies out `len` samples starting at `start`.
    pub fn segment(&self, start: usize, len: usize) -> Result<AudioClip> {
        if start + len > self.samples.len() || len == 0 {
            return Err(Error::ClipTooShort(format!(
                "segment [{start}, {}) out of range for clip of {} samples",
                start + len,
                self.samples.len()
            )));
        }
        Ok(AudioClip {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn rms(&self) -> f64 {
        let sum_sq: f64 = self.samples.iter().map(|s| s * s).sum();
        (sum_sq / self.samples.len() as f64).sqrt()
    }

    /// Replaces the sample buffer, keeping the sample rate. Used by
    /// transforms that change duration.
    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> AudioClip {
        AudioClip {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}
