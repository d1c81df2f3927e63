//! `.gdac` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GDAC" | version: u16 | count: u32
//! count × { name_len: u16 | name: UTF-8 | ndim: u8 | dims: u32 × ndim | data: f32 × Π dims }
//! crc32 of every preceding byte: u32
//! ```

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use super::{build_generator, build_source_bundle, Generator, ModelBundle, Module};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GDAC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0} in checkpoint")]
    UnexpectedTensor(String),
    #[error("tensor {name}: dims {dims:?} overflow the payload")]
    DimOverflow { name: String, dims: Vec<u32> },
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| CheckpointError::Malformed("too many tensors".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.rank()).map_err(|_| CheckpointError::Malformed(format!("{name}: rank too high")))?;
        buf.push(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| CheckpointError::DimOverflow {
                name: name.clone(),
                dims: vec![u32::MAX],
            })?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed(format!("truncated {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    // Anything shorter than header + CRC cannot verify, which is what a
    // truncated file looks like.
    if bytes.len() < 4 + 2 + 4 + 4 {
        return Err(CheckpointError::CrcMismatch {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8("rank")? as usize;
        let dims: Vec<u32> = (0..ndim).map(|_| r.u32("dims")).collect::<Result<_>>()?;
        let remaining = (body.len() - r.pos) / 4;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .filter(|&n| n <= remaining)
            .ok_or_else(|| CheckpointError::DimOverflow {
                name: name.clone(),
                dims: dims.clone(),
            })?;
        let data = r
            .take(numel * 4, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        out.push((name, tensor));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the tensor table",
            body.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    if let Some((dup, _)) = tensors.iter().find(|(n, _)| !seen.insert(n.as_str())) {
        return Err(CheckpointError::Malformed(format!("duplicate tensor name {dup}")));
    }
    std::fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}

fn into_table(tensors: Vec<(String, Tensor)>) -> HashMap<String, Tensor> {
    tensors.into_iter().collect()
}

fn reject_leftovers(table: HashMap<String, Tensor>) -> Result<()> {
    let mut names: Vec<String> = table.into_keys().collect();
    names.sort();
    match names.into_iter().next() {
        Some(n) => Err(CheckpointError::UnexpectedTensor(n)),
        None => Ok(()),
    }
}

/// Saves every network of the bundle, running statistics included.
pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    write_tensors(path, &bundle.state())
}

/// Loads a bundle; the generator is restored when the file carries one.
/// Flags come back in the source-training setting.
pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let mut table = into_table(read_tensors(path)?);
    let mut bundle = build_source_bundle(0);
    bundle.f.load_state(&mut table)?;
    bundle.h.load_state(&mut table)?;
    bundle.r.load_state(&mut table)?;
    bundle.phi.load_state(&mut table)?;
    if table.keys().any(|k| k.starts_with("G.")) {
        let mut g = build_generator(0);
        g.load_state(&mut table)?;
        bundle.g = Some(g);
    }
    reject_leftovers(table)?;
    Ok(bundle)
}

pub fn save_generator(g: &Generator, path: &Path) -> Result<()> {
    write_tensors(path, &g.state())
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    let mut table = into_table(read_tensors(path)?);
    let mut g = build_generator(0);
    g.load_state(&mut table)?;
    reject_leftovers(table)?;
    Ok(g)
}
