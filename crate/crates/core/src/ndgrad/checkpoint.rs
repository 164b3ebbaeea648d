//! Versioned binary weight checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"GSKW"
//! version u32
//! count   u32                      number of parameters
//! per parameter:
//!   name_len u32, name bytes (UTF-8)
//!   rank     u32, extents u32 * rank
//!   values   f32 * product(extents)
//! ```
//!
//! Values are stored as fp32 regardless of the in-memory element type, so
//! fp32 round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Parameter, Scalar};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSKW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A parameter as read back from disk, before model validation.
#[derive(Debug, Clone)]
pub struct RawParameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn save_checkpoint<T: Scalar>(params: &[&Parameter<T>], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e| Error::io(path, e);

    w.write_all(CHECKPOINT_MAGIC).map_err(werr)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(werr)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(werr)?;
    for p in params {
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(name).map_err(werr)?;
        let shape = p.value().shape();
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(werr)?;
        for &e in shape {
            w.write_all(&(e as u32).to_le_bytes()).map_err(werr)?;
        }
        for v in p.value().data() {
            w.write_all(&v.as_f32().to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

struct Reader<'a, R> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| corrupt(self.path, format!("truncated while reading {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<RawParameter>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };

    let magic = r.bytes(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(corrupt(path, "bad magic (not a weight checkpoint)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("parameter count")? as usize;
    if count > 1_000_000 {
        return Err(corrupt(path, format!("implausible parameter count {count}")));
    }

    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        if name_len > 4096 {
            return Err(corrupt(path, format!("implausible name length {name_len}")));
        }
        let name = String::from_utf8(r.bytes(name_len, "name")?)
            .map_err(|_| corrupt(path, format!("parameter {i}: name is not UTF-8")))?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(corrupt(path, format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = r.u32("extent")? as usize;
            if e == 0 {
                return Err(corrupt(path, format!("{name}: zero extent")));
            }
            shape.push(e);
        }
        let numel: usize = shape.iter().product();
        if numel > 64_000_000 {
            return Err(corrupt(path, format!("{name}: implausible element count")));
        }
        let raw = r.bytes(numel * 4, "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(RawParameter { name, shape, values });
    }

    // Trailing bytes mean the file does not match its own header.
    let mut trailing = [0u8; 1];
    match r.inner.read(&mut trailing) {
        Ok(0) => Ok(params),
        Ok(_) => Err(corrupt(path, "trailing bytes after last parameter")),
        Err(e) => Err(Error::io(path, e)),
    }
}
