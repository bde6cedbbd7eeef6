//! Minimal RIFF/WAVE reader and writer.
//!
//! Reads mono PCM 16-bit or IEEE float 32-bit files; anything else is
//! rejected rather than silently converted. The writer always emits
//! 32-bit float little-endian.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::AudioClip;
use crate::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

/// Loads a mono WAV file, scaling samples to [-1, 1].
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    decode_wav(&bytes)
}

/// Header-only duration in seconds, without decoding the sample data.
pub fn wav_duration_seconds(path: impl AsRef<Path>) -> Result<f64> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let (fmt, data_len) = parse_chunks(&bytes)?;
    let bytes_per_sample = (fmt.bits_per_sample / 8) as usize;
    Ok(data_len as f64 / bytes_per_sample as f64 / fmt.sample_rate as f64)
}

/// Writes a clip as mono 32-bit float little-endian WAV.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let n = clip.len();
    let data_len = (n * 4) as u32;
    let mut out = Vec::with_capacity(44 + n * 4);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_IEEE_FLOAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    let byte_rate = clip.sample_rate() * 4;
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes()); // block align
    out.extend_from_slice(&32u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in clip.samples() {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct FmtChunk {
    format: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

/// Walks the RIFF chunks and returns the fmt chunk plus the data chunk length.
fn parse_chunks(bytes: &[u8]) -> Result<(FmtChunk, usize)> {
    if bytes.len() < 12 {
        return Err(Error::MalformedWav("file shorter than RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(Error::MalformedWav("missing RIFF magic".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedWav("missing WAVE marker".into()));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut data: Option<(usize, usize)> = None; // (offset, len)
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::MalformedWav(format!(
                "chunk {:?} of {size} bytes overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::MalformedWav("fmt chunk shorter than 16 bytes".into()));
                }
                let c = &bytes[body..body + 16];
                fmt = Some(FmtChunk {
                    format: u16::from_le_bytes([c[0], c[1]]),
                    channels: u16::from_le_bytes([c[2], c[3]]),
                    sample_rate: u32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                    bits_per_sample: u16::from_le_bytes([c[14], c[15]]),
                });
            }
            b"data" => {
                data = Some((body, size));
            }
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body + size + (size & 1);
    }

    let fmt = fmt.ok_or_else(|| Error::MalformedWav("no fmt chunk".into()))?;
    let (off, len) = data.ok_or_else(|| Error::MalformedWav("no data chunk".into()))?;
    if fmt.sample_rate == 0 {
        return Err(Error::MalformedWav("sample rate is zero".into()));
    }
    debug_assert!(off + len <= bytes.len());
    Ok((
        FmtChunk {
            format: fmt.format,
            channels: fmt.channels,
            sample_rate: fmt.sample_rate,
            bits_per_sample: fmt.bits_per_sample,
        },
        len,
    ))
}

fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    let (fmt, _) = parse_chunks(bytes)?;
    if fmt.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{} channels (only mono is supported)",
            fmt.channels
        )));
    }
    // Re-locate the data chunk to decode in place.
    let (data_off, data_len) = locate_data(bytes)?;
    let data = &bytes[data_off..data_off + data_len];

    let samples: Vec<f64> = match (fmt.format, fmt.bits_per_sample) {
        (FORMAT_PCM, 16) => {
            if data.len() % 2 != 0 {
                return Err(Error::MalformedWav("pcm16 data length is odd".into()));
            }
            data.chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
                .collect()
        }
        (FORMAT_IEEE_FLOAT, 32) => {
            if data.len() % 4 != 0 {
                return Err(Error::MalformedWav(
                    "float32 data length is not a multiple of 4".into(),
                ));
            }
            data.chunks_exact(4)
                .map(|b| {
                    let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
                    v.clamp(-1.0, 1.0)
                })
                .collect()
        }
        (format, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "format code {format} with {bits} bits per sample"
            )))
        }
    };

    if samples.is_empty() {
        return Err(Error::MalformedWav("data chunk holds no samples".into()));
    }
    if !samples.iter().all(|s| s.is_finite()) {
        return Err(Error::MalformedWav("non-finite float samples".into()));
    }
    AudioClip::new(samples, fmt.sample_rate)
}

fn locate_data(bytes: &[u8]) -> Result<(usize, usize)> {
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        if id == b"data" {
            return Ok((pos + 8, size));
        }
        pos = pos + 8 + size + (size & 1);
    }
    Err(Error::MalformedWav("no data chunk".into()))
}
