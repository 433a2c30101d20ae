//! Flat name -> tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RSENCKPT"
//! version    u32      1
//! manifest   u32 length + UTF-8 JSON
//! count      u32      number of tensors
//! per tensor u32 name length, UTF-8 name, u32 rank, rank x u64 extents,
//!            product(extents) x f32
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ArchVariant, Model};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"RSENCKPT";
const VERSION: u32 = 1;

/// Prefix for optimizer state stored alongside the model tensors.
pub const OPTIMIZER_PREFIX: &str = "optimizer.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub variant: ArchVariant,
    pub depth: usize,
    pub classes: usize,
    pub r: usize,
    pub iteration: u64,
}

impl Manifest {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig::new(self.variant, self.depth, self.classes).with_reduction(self.r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<NamedTensor>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
        if &magic != MAGIC {
            return Err(err("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let mlen = read_u32(&mut r)? as usize;
        let manifest: Manifest =
            serde_json::from_slice(take(&mut r, mlen)?).map_err(|e| err(format!("manifest: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, nlen)?.to_vec())
                .map_err(|_| err("tensor name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut r, numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if !r.is_empty() {
            return Err(err(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(err("truncated file"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().expect("8 bytes")))
}

impl<T: Scalar> Model<T> {
    /// Every parameter and running statistic, converted to f32.
    pub fn to_checkpoint(&self, iteration: u64) -> Checkpoint {
        let c = &self.config;
        Checkpoint {
            manifest: Manifest {
                variant: c.variant,
                depth: c.depth,
                classes: c.num_classes,
                r: c.reduction,
                iteration,
            },
            tensors: self
                .store
                .entries()
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    data: e
                        .value
                        .data()
                        .iter()
                        .map(|v| v.to_f32().expect("finite"))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds the architecture named in the manifest and loads its tensors.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = Model::build_seeded(ckpt.manifest.arch(), 0)?;
        model.load_tensors(ckpt)?;
        Ok(model)
    }

    pub fn load_tensors(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut seen = 0;
        for t in &ckpt.tensors {
            if t.name.starts_with(OPTIMIZER_PREFIX) {
                continue;
            }
            let id = self
                .store
                .id(&t.name)
                .ok_or_else(|| err(format!("unexpected tensor `{}`", t.name)))?;
            let dst = self.store.get_mut(id);
            if dst.shape() != t.shape.as_slice() {
                return Err(err(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    dst.shape()
                )));
            }
            let values: Vec<T> = t.data.iter().map(|&v| T::from_f32(v).expect("f32")).collect();
            *dst = Tensor::new(&t.shape, values)?;
            seen += 1;
        }
        if seen != self.store.len() {
            return Err(err(format!(
                "checkpoint holds {seen} model tensors, model has {}",
                self.store.len()
            )));
        }
        Ok(())
    }
}
