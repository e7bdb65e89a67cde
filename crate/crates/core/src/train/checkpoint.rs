//! Flat binary container of named tensors.
//!
//! Layout (little-endian): 16-byte magic, `u32` version, `u32` entry count,
//! then per entry `u32` name length, UTF-8 name, `u8` dtype tag, `u32` rank,
//! `u64` per dimension and the row-major payload.

use super::TrainError;
use crate::tensor::Tensor;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 16] = b"SRLCHECKPOINT\0\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_F64: u8 = 0;
const TAG_U64: u8 = 1;
const TAG_UTF8: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F64(Tensor),
    U64(Vec<u64>),
    Text(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.push((name.into(), entry));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    fn missing(name: &str) -> TrainError {
        TrainError::Checkpoint(format!("missing or mistyped entry {name:?}"))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, TrainError> {
        match self.get(name) {
            Some(Entry::F64(t)) => Ok(t),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64], TrainError> {
        match self.get(name) {
            Some(Entry::U64(v)) => Ok(v),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn text(&self, name: &str) -> Result<&str, TrainError> {
        match self.get(name) {
            Some(Entry::Text(s)) => Ok(s),
            _ => Err(Self::missing(name)),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (tag, shape): (u8, Vec<usize>) = match entry {
                Entry::F64(t) => (TAG_F64, t.shape().to_vec()),
                Entry::U64(v) => (TAG_U64, vec![v.len()]),
                Entry::Text(s) => (TAG_UTF8, vec![s.len()]),
            };
            out.push(tag);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match entry {
                Entry::F64(t) => t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Entry::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Entry::Text(s) => out.extend_from_slice(s.as_bytes()),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(16)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| TrainError::Checkpoint("entry name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let entry = match tag {
                TAG_F64 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| r.corrupt())?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::F64(Tensor::new(shape, data).map_err(|e| TrainError::Checkpoint(format!("{name}: {e}")))?)
                }
                TAG_U64 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| r.corrupt())?)?;
                    Entry::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                TAG_UTF8 => Entry::Text(
                    String::from_utf8(r.take(n)?.to_vec())
                        .map_err(|_| TrainError::Checkpoint(format!("{name}: text is not UTF-8")))?,
                ),
                other => return Err(TrainError::Checkpoint(format!("{name}: unknown dtype tag {other}"))),
            };
            ck.push(name, entry);
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.encode()).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self) -> TrainError {
        TrainError::Checkpoint(format!("truncated at byte {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.corrupt())?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
