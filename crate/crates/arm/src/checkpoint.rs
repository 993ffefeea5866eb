//! Checkpoint format: a versioned flat container of named parameter arrays
//! (little-endian 64-bit floats with shapes) plus the serialized config text.
//!
//! Layout (all integers little-endian u64 unless noted):
//!
//! ```text
//! magic   [u8; 4] = "ARMC"
//! version u32     = 1
//! config  u64 length, then UTF-8 flat key=value text
//! count   u64 number of parameters
//! entry*  u64 name length, UTF-8 name,
//!         u64 rows, u64 cols,
//!         rows*cols f64 values (little-endian)
//! ```

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ARMC";
const VERSION: u32 = 1;

pub fn save(path: impl AsRef<Path>, config: &Config, params: &Params) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_text = config.to_text();
    out.extend_from_slice(&(cfg_text.len() as u64).to_le_bytes());
    out.extend_from_slice(cfg_text.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(Config, Params)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cursor = Cursor { bytes: &bytes, pos: 0, path };

    let magic = cursor.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes(cursor.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("{}: unsupported version {version}", path.display())));
    }
    let cfg_len = cursor.take_u64()? as usize;
    let cfg_text = std::str::from_utf8(cursor.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint(format!("{}: config is not UTF-8", path.display())))?;
    let config = Config::from_text(cfg_text)?;

    let count = cursor.take_u64()? as usize;
    let mut params = Params::new();
    for _ in 0..count {
        let name_len = cursor.take_u64()? as usize;
        let name = std::str::from_utf8(cursor.take(name_len)?)
            .map_err(|_| Error::Checkpoint(format!("{}: parameter name is not UTF-8", path.display())))?
            .to_string();
        let rows = cursor.take_u64()? as usize;
        let cols = cursor.take_u64()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(cursor.take(8)?.try_into().unwrap()));
        }
        params.insert(name, Tensor::new(rows, cols, data)?);
    }
    Ok((config, params))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("{}: truncated file", self.path.display())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
