//! ACLC checkpoint serialization.
//!
//! Binary layout: magic `ACLC`, u32 version (1), u32 tensor count, then per
//! tensor: u16 name length, UTF-8 name, u8 rank, u32 per-dimension sizes,
//! float32 values, everything little-endian and row-major. A JSON sidecar
//! at `<path>.json` carries the model and augmentation configs plus run
//! metadata; loading cross-checks every tensor shape against the sidecar's
//! model config.
//!
//! The RIR bank inside [`AugmentConfig`] is runtime state loaded from a
//! directory; the sidecar records only its size.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ACLC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub augment: AugmentConfig,
    pub step: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    model: ModelConfig,
    augment: AugmentConfig,
    rir_bank_len: usize,
    step: u64,
    seed: u64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let named = ckpt.params.named_tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        let bytes = name.as_bytes();
        debug_assert!(bytes.len() <= u16::MAX as usize);
        buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(bytes);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;

    let sidecar = Sidecar {
        model: ckpt.params.config.clone(),
        augment: ckpt.augment.clone(),
        rir_bank_len: ckpt.augment.rir_bank.len(),
        step: ckpt.step,
        seed: ckpt.seed,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Byte cursor that turns overruns into [`Error::CorruptCheckpoint`].
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            Error::CorruptCheckpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("len 2")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("len 4")))
    }
}

/// Expected name -> shape pairs for a config, in canonical tensor order.
fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut in_ch = 1;
    for (i, &out_ch) in config.conv_channels.iter().enumerate() {
        out.push((format!("enc.{i}.kernel"), vec![out_ch, in_ch, 3, 3]));
        out.push((format!("enc.{i}.bias"), vec![out_ch]));
        in_ch = out_ch;
    }
    let h = config.h_dim();
    out.push(("proj.weight".into(), vec![h, config.proj_dim]));
    out.push(("proj.bias".into(), vec![config.proj_dim]));
    out.push(("bilinear.w".into(), vec![config.proj_dim, config.proj_dim]));
    out.push(("cls.weight".into(), vec![h, config.n_classes]));
    out.push(("cls.bias".into(), vec![config.n_classes]));
    out
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let side = sidecar_path(path);
    if !side.is_file() {
        return Err(Error::MissingFile(side));
    }
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(&side)?)?;
    sidecar.model.validate()?;

    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic, not an ACLC file".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let count = cur.u32()? as usize;

    let expected = expected_shapes(&sidecar.model);
    if count != expected.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} tensors in file, config implies {}",
            expected.len()
        )));
    }

    let mut tensors: Vec<Tensor<f32>> = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let name_len = cur.u16()? as usize;
        let got_name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
        if got_name != name {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {got_name:?} where {name:?} was expected"
            )));
        }
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        if &dims != shape {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor {name:?} has shape {dims:?}, config implies {shape:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        let bytes = cur.take(numel * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("len 4")))
            .collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    if cur.pos != buf.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes after the last tensor",
            buf.len() - cur.pos
        )));
    }

    let mut it = tensors.into_iter();
    let n_blocks = sidecar.model.conv_channels.len();
    let mut conv_kernels = Vec::with_capacity(n_blocks);
    let mut conv_biases = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        conv_kernels.push(it.next().expect("counted"));
        conv_biases.push(it.next().expect("counted"));
    }
    let params = ModelParams {
        config: sidecar.model,
        conv_kernels,
        conv_biases,
        proj_weight: it.next().expect("counted"),
        proj_bias: it.next().expect("counted"),
        bilinear_w: it.next().expect("counted"),
        cls_weight: it.next().expect("counted"),
        cls_bias: it.next().expect("counted"),
    };
    Ok(Checkpoint {
        params,
        augment: sidecar.augment,
        step: sidecar.step,
        seed: sidecar.seed,
    })
}
