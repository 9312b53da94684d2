//! FVW1 tensor packs.
//!
//! Layout: magic `FVW1`, u32-LE tensor count, then per tensor a u16-LE name
//! length, the UTF-8 name, a u8 dtype (0 = f32), a u8 rank, rank × u32-LE
//! dims and the row-major little-endian f32 payload.
//!
//! Values are held as `f64` in memory and rounded to the nearest `f32` on
//! write; reading widens exactly, so a write/read/write cycle is bit-stable.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, WeightFormatError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FVW1";
pub const DTYPE_F32: u8 = 0;

/// Ordered name → tensor list as stored in a pack.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn write_pack<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut seen = HashSet::new();
    let count = u32::try_from(tensors.len())
        .map_err(|_| WeightFormatError::TooLarge("<pack>".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(WeightFormatError::DuplicateName(name.clone()).into());
        }
        let too_large = || WeightFormatError::TooLarge(name.clone());
        let name_len = u16::try_from(name.len()).map_err(|_| too_large())?;
        let rank = u8::try_from(t.ndim()).map_err(|_| too_large())?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F32, rank])?;
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| too_large())?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.len() * 4);
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8], WeightFormatError> {
        if self.buf.len() - self.pos < n {
            return Err(WeightFormatError::Truncated(what()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: impl FnOnce() -> String) -> Result<u8, WeightFormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: impl FnOnce() -> String) -> Result<u16, WeightFormatError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32, WeightFormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn parse_pack(bytes: &[u8]) -> Result<NamedTensors, WeightFormatError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(4, || "magic".into())?;
    if magic != MAGIC {
        let mut m = [0u8; 4];
        m.copy_from_slice(magic);
        return Err(WeightFormatError::BadMagic(m));
    }
    let count = c.u32(|| "tensor count".into())? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut seen = HashSet::new();
    for i in 0..count {
        let len = c.u16(|| format!("name length of tensor #{i}"))? as usize;
        let raw = c.take(len, || format!("name of tensor #{i}"))?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| WeightFormatError::BadName)?
            .to_string();
        let dtype = c.u8(|| format!("dtype of {name:?}"))?;
        if dtype != DTYPE_F32 {
            return Err(WeightFormatError::UnsupportedDtype { name, dtype });
        }
        let rank = c.u8(|| format!("rank of {name:?}"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32(|| format!("dims of {name:?}"))? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| WeightFormatError::TooLarge(name.clone()))?;
        let payload = c.take(n, || format!("payload of {name:?}"))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        // A zero-sized or rank-0 entry is stored as a one-element vector.
        let tensor = if dims.is_empty() || dims.contains(&0) {
            Tensor::new(&[data.len().max(1)], if data.is_empty() { vec![0.0] } else { data })
        } else {
            Tensor::new(&dims, data)
        }
        .map_err(|_| WeightFormatError::TooLarge(name.clone()))?;
        if !seen.insert(name.clone()) {
            return Err(WeightFormatError::DuplicateName(name));
        }
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn read_pack<R: Read>(mut r: R) -> Result<NamedTensors> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    Ok(parse_pack(&bytes)?)
}

pub fn save_pack(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_pack(&mut buf, tensors)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_pack(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let bytes = fs::read(path)?;
    Ok(parse_pack(&bytes)?)
}

/// Looks a tensor up by name in a loaded pack.
pub fn find<'a>(pack: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
    pack.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

/// Rounds every value through `f32`, matching what a save/load cycle yields.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}
