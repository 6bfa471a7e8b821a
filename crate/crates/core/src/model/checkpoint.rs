use std::path::Path;

use super::ModelError;
use crate::autodiff::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"GDCK";
const DTYPE_F32: u8 = 0;

/// Ordered list of named f32 tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>) -> Self {
        Self {
            entries: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        self.entries.push((name.into(), value));
    }

    /// Copies every entry whose name exists in `store`. Entries under the
    /// returned names were not present in the store.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<Vec<String>, ModelError> {
        let mut unused = Vec::new();
        for (name, t) in &self.entries {
            if store.contains(name) {
                store.set_value(name, t.clone())?;
            } else {
                unused.push(name.clone());
            }
        }
        Ok(unused)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(ck.entries.len() as u32).to_le_bytes());
    for (name, t) in &ck.entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn err(&self, detail: String) -> ModelError {
        ModelError::Format {
            path: self.path.display().to_string(),
            detail,
        }
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint, ModelError> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.err("missing GDCK magic".into()));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.err("entry name is not UTF-8".into()))?
            .to_string();
        let head = r.take(2)?;
        if head[0] != DTYPE_F32 {
            return Err(r.err(format!("{name}: unsupported dtype tag {}", head[0])));
        }
        let shape = (0..head[1]).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| r.err(format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { entries })
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), ModelError> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes, path)
}
