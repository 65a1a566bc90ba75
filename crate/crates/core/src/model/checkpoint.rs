//! `RFBC` checkpoint files.
//!
//! Layout (little-endian): magic `RFBC`, u16 version (1), u32 architecture
//! config hash, u32 entry count, then per entry a u16 name length, the UTF-8
//! name and an RFT1 tensor blob.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::arch::{build_by_id, known_arch_ids, ArchitectureSpec};
use super::params::ParameterStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFBC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Decoded checkpoint before it is bound to an architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Element = f32> {
    pub config_hash: u32,
    pub params: ParameterStore<T>,
}

pub fn encode_checkpoint<T: Element>(spec: &ArchitectureSpec, params: &ParameterStore<T>) -> Result<Vec<u8>> {
    params.validate(spec)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&spec.config_hash().to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&t.to_rft1());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                Error::format(format!("checkpoint truncated while reading {what} at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("bad checkpoint magic (expected RFBC)"));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let config_hash = r.u32("config hash")?;
    let count = r.u32("entry count")?;
    let mut params = ParameterStore::new();
    for k in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(format!("checkpoint entry {k} name is not UTF-8")))?;
        let (t, used) = Tensor::<T>::read_rft1_prefix(&bytes[r.pos..])
            .map_err(|e| e.context(format!("checkpoint entry {name:?}")))?;
        r.pos += used;
        params.insert(name, t).map_err(|e| Error::format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config_hash, params })
}

pub fn save_checkpoint<T: Element>(path: &Path, spec: &ArchitectureSpec, params: &ParameterStore<T>) -> Result<()> {
    let bytes = encode_checkpoint(spec, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| e.context(path.display()))
}

/// Loads parameters for a known architecture, rejecting hash or shape
/// mismatches.
pub fn load_checkpoint_for<T: Element>(path: &Path, spec: &ArchitectureSpec) -> Result<ParameterStore<T>> {
    let ck = read_checkpoint(path)?;
    if ck.config_hash != spec.config_hash() {
        return Err(Error::ArchitectureMismatch { expected: spec.config_hash(), found: ck.config_hash });
    }
    ck.params.validate(spec)?;
    Ok(ck.params)
}

/// Loads a checkpoint and resolves its architecture among the built-in ids.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(ArchitectureSpec, ParameterStore<T>)> {
    let ck = read_checkpoint::<T>(path)?;
    for id in known_arch_ids() {
        let spec = build_by_id(id)?;
        if spec.config_hash() == ck.config_hash {
            ck.params.validate(&spec)?;
            return Ok((spec, ck.params));
        }
    }
    Err(Error::format(format!(
        "{}: config hash {:#010x} matches no known architecture",
        path.display(),
        ck.config_hash
    )))
}
