//! Versioned binary checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic            8  bytes  "FSLCKPT1"
//! format version   u32       currently 1
//! config fp        u64       FNV-1a of the embedded config text
//! config length    u32
//! config text      UTF-8 bytes (canonical key=value lines)
//! iteration        u64
//! adam step        u64
//! rng seed         32 bytes
//! rng word pos     u128 (16 bytes)
//! tensor count     u32
//! per tensor:      name length u32, name bytes,
//!                  ndim u32, dims u32 x ndim,
//!                  values f64 x numel
//! ```
//!
//! Tensors cover the model parameters (by name), batch-norm running
//! statistics (`buffer.<name>`) and Adam moments (`adam.m.<name>`,
//! `adam.v.<name>`). Values are stored as f64; f32 runs upcast losslessly on
//! save and truncate exactly back on load, so a save/load round trip is
//! bit-identical in either precision.

use crate::config::{fnv1a, Config};
use fewshot_core::adam::Adam;
use fewshot_core::{Error, ParamSet, Result, Scalar};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FSLCKPT1";
const VERSION: u32 = 1;

pub struct CheckpointData {
    pub config_text: String,
    pub fingerprint: u64,
    pub iteration: u64,
    pub adam_step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl CheckpointData {
    pub fn tensor(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f64>)> {
        self.tensors.iter().find(|(n, _, _)| n == name)
    }
}

/// Collect every named tensor of a model + optimizer into checkpoint entries.
pub fn gather<S: Scalar>(
    model: &mut impl ParamSet<S>,
    adam: &Adam<S>,
) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |p| {
        tensors.push((
            p.name().to_string(),
            p.tensor.shape().to_vec(),
            p.tensor.data().iter().map(|v| v.as_f64()).collect(),
        ));
    });
    model.visit_buffers(&mut |name, data| {
        tensors.push((
            format!("buffer.{name}"),
            vec![data.len()],
            data.iter().map(|v| v.as_f64()).collect(),
        ));
    });
    for (name, m, v) in adam.export_state() {
        tensors.push((format!("adam.m.{name}"), vec![m.len()], m.iter().map(|x| x.as_f64()).collect()));
        tensors.push((format!("adam.v.{name}"), vec![v.len()], v.iter().map(|x| x.as_f64()).collect()));
    }
    tensors
}

#[allow(clippy::too_many_arguments)]
pub fn save(
    path: &Path,
    config: &Config,
    iteration: u64,
    adam_step: u64,
    rng_seed: [u8; 32],
    rng_word_pos: u128,
    tensors: &[(String, Vec<usize>, Vec<f64>)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    buf.extend_from_slice(&fnv1a(text.as_bytes()).to_le_bytes());
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&iteration.to_le_bytes());
    buf.extend_from_slice(&adam_step.to_le_bytes());
    buf.extend_from_slice(&rng_seed);
    buf.extend_from_slice(&rng_word_pos.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let numel: usize = shape.iter().product();
        debug_assert_eq!(numel, data.len());
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let u64_at = |pos: &mut usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
    };

    if take(&mut pos, 8)? != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let version = u32_at(&mut pos)?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let fingerprint = u64_at(&mut pos)?;
    let cfg_len = u32_at(&mut pos)? as usize;
    let config_text = String::from_utf8(take(&mut pos, cfg_len)?.to_vec())
        .map_err(|_| Error::Data("checkpoint config is not UTF-8".into()))?;
    if fnv1a(config_text.as_bytes()) != fingerprint {
        return Err(Error::Data("checkpoint fingerprint does not match its config".into()));
    }
    let iteration = u64_at(&mut pos)?;
    let adam_step = u64_at(&mut pos)?;
    let rng_seed: [u8; 32] = take(&mut pos, 32)?.try_into().unwrap();
    let rng_word_pos = u128::from_le_bytes(take(&mut pos, 16)?.try_into().unwrap());
    let count = u32_at(&mut pos)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u32_at(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
            .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
        let ndim = u32_at(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32_at(&mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, shape, data));
    }
    if pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint payload".into()));
    }
    Ok(CheckpointData {
        config_text,
        fingerprint,
        iteration,
        adam_step,
        rng_seed,
        rng_word_pos,
        tensors,
    })
}

/// Assign checkpoint tensors back onto a model and optimizer.
pub fn restore<S: Scalar>(
    data: &CheckpointData,
    model: &mut impl ParamSet<S>,
    adam: &mut Adam<S>,
) -> Result<()> {
    use std::collections::HashMap;
    let by_name: HashMap<&str, &(String, Vec<usize>, Vec<f64>)> =
        data.tensors.iter().map(|t| (t.0.as_str(), t)).collect();
    let mut missing: Vec<String> = Vec::new();
    model.visit_params(&mut |p| {
        match by_name.get(p.name()) {
            Some((_, shape, values)) if shape == &p.tensor.shape().to_vec() => {
                for (dst, v) in p.tensor.data_mut().iter_mut().zip(values.iter()) {
                    *dst = S::from_f64(*v);
                }
            }
            _ => missing.push(p.name().to_string()),
        }
    });
    model.visit_buffers(&mut |name, buf| {
        let key = format!("buffer.{name}");
        match by_name.get(key.as_str()) {
            Some((_, _, values)) if values.len() == buf.len() => {
                for (dst, v) in buf.iter_mut().zip(values.iter()) {
                    *dst = S::from_f64(*v);
                }
            }
            _ => missing.push(key),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "checkpoint is missing or mismatches tensors: {}",
            missing.join(", ")
        )));
    }
    let mut adam_entries = Vec::new();
    let mut names: Vec<String> = Vec::new();
    model.visit_params(&mut |p| names.push(p.name().to_string()));
    for name in names {
        let (mk, vk) = (format!("adam.m.{name}"), format!("adam.v.{name}"));
        if let (Some((_, _, m)), Some((_, _, v))) = (by_name.get(mk.as_str()), by_name.get(vk.as_str())) {
            adam_entries.push((
                name,
                m.iter().map(|x| S::from_f64(*x)).collect(),
                v.iter().map(|x| S::from_f64(*x)).collect(),
            ));
        }
    }
    adam.import_state(data.adam_step, adam_entries);
    Ok(())
}
