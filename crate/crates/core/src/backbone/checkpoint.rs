//! Checkpoint file format.
//!
//! Layout: magic `DDIF`, format version (u32 LE), metadata JSON
//! (u32 length + bytes), tensor count (u32), then per-tensor records of
//! name length (u32), UTF-8 name, rank (u32), dims (u32 each), and the
//! raw little-endian f64 payload. Loading validates every shape against
//! the receiving parameter set.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::model::ModelConfig;
use super::params::ParamSet;
use crate::dialog::{ConcatStrategy, HeadOrTail};
use crate::diffusion::schedule::ScheduleConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DDIF";
const VERSION: u32 = 1;

/// Everything needed to reload a trained model and rebuild its frozen
/// text embedding and preprocessing for sampling.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub step: u64,
    pub vocab_size: usize,
    pub seed: u64,
    pub strategy: ConcatStrategy,
    pub keep: HeadOrTail,
    #[serde(default)]
    pub speaker_tokens_oov: bool,
}

pub fn write_checkpoint<M: Serialize>(
    path: &Path,
    meta: &M,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta_json = serde_json::to_vec(meta)
        .map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    w.write_all(&meta_json)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct Checkpoint<M = CheckpointMeta> {
    pub meta: M,
    pub tensors: Vec<(String, Tensor)>,
}

impl<M> Checkpoint<M> {
    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Copy `prefix`-stripped tensors into a parameter set, requiring every
    /// parameter to be present with the registered shape.
    pub fn load_into(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let names: Vec<String> = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let full = format!("{prefix}{name}");
            let src = self.find(&full).ok_or_else(|| {
                Error::Checkpoint(format!("missing tensor '{full}' in checkpoint"))
            })?;
            let dst = &mut params.tensors_mut()[i];
            if src.shape() != dst.shape() {
                return Err(Error::shape(
                    format!("{:?} for '{full}'", dst.shape()),
                    format!("{:?}", src.shape()),
                ));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<M: DeserializeOwned>(path: &Path) -> Result<Checkpoint<M>> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: M = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("meta decode: {e}")))?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("tensor name: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push((name, Tensor::new(shape, data)));
    }
    Ok(Checkpoint { meta, tensors })
}
