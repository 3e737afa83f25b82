//! Named-tensor container used for model checkpoints, adapter checkpoints and
//! prompt caches.
//!
//! ```text
//! "VILA" | version u32 | count u32 |
//!   per tensor: name_len u32 | name utf-8 | rank u32 | dims u32 * rank | dtype u8 | values (LE)
//! ```
//! All integers are little-endian. dtype 0 is f32, 1 is f64.

use std::io::Write;
use std::path::Path;

use aesvl_autograd::{DType, Real, Tensor};

use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: [u8; 4] = *b"VILA";
pub const VERSION: u32 = 1;

/// A tensor kept as its raw little-endian bytes, so reading and re-writing
/// never touches the values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stored {
    pub shape: Vec<usize>,
    pub dtype: DType,
    bytes: Vec<u8>,
}

impl Stored {
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            bytes,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Decodes into `Tensor<T>`; the stored dtype must be `T`'s.
    pub fn to_tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>, CheckpointError> {
        if self.dtype != T::DTYPE {
            return Err(CheckpointError::DTypeMismatch {
                name: name.to_string(),
                found: self.dtype,
                expected: T::DTYPE,
            });
        }
        let data = self.bytes.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect();
        Tensor::new(&self.shape, data).map_err(|_| CheckpointError::InvalidShape(name.to_string()))
    }
}

pub type Entries = Vec<(String, Stored)>;

pub fn encode(entries: &[(String, Stored)]) -> Vec<u8> {
    let total: usize = entries
        .iter()
        .map(|(n, s)| 13 + n.len() + 4 * s.shape.len() + s.bytes.len())
        .sum();
    let mut out = Vec::with_capacity(12 + total);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, s) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
        for &d in &s.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(s.dtype.tag());
        out.extend_from_slice(&s.bytes);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated(what.to_string())),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Entries, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut entries: Entries = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let name_len = r.u32(&format!("name length of tensor #{i}"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &format!("name of tensor #{i}"))?)
            .map_err(|_| CheckpointError::Utf8)?
            .to_string();
        let rank = r.u32(&format!("rank of {name:?}"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32(&format!("dims of {name:?}"))? as usize);
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(CheckpointError::InvalidShape(name));
        }
        let tag = r.take(1, &format!("dtype of {name:?}"))?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::DType {
            name: name.clone(),
            tag,
        })?;
        let n = shape
            .iter()
            .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::InvalidShape(name.clone()))?;
        let data = r.take(n, &format!("values of {name:?}"))?.to_vec();
        if entries.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::Duplicate(name));
        }
        entries.push((
            name,
            Stored {
                shape,
                dtype,
                bytes: data,
            },
        ));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(entries)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn save(path: &Path, entries: &[(String, Stored)]) -> Result<()> {
    write_atomic(path, &encode(entries))
}

pub fn load(path: &Path) -> Result<Entries> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|k| Error::checkpoint(path, k))
}
