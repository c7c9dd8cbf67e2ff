//! Binary parameter checkpoints.
//!
//! Layout: the magic bytes `XSGT1`, then one record per parameter until end
//! of file. A record is the name length (u32), the UTF-8 name, the rank
//! (u32), each extent (u64), then the values as f64. All integers and floats
//! are little-endian.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"XSGT1";

pub fn encode_checkpoint(params: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    for (name, value) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &extent in value.shape() {
            out.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Load(format!(
                "truncated checkpoint at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(Error::Load("bad checkpoint magic".into()));
    }
    let mut r = Reader {
        bytes,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let mut params = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Load("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let payload = r.take(count * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
