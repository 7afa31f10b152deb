//! Binary tensor records: `MRFSEG1\n`, a little-endian `u64` count, then per
//! tensor the name length, UTF-8 name, four `u64` extents and the payload as
//! little-endian `f64`.

use std::io::{self, Read, Write};

use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MRFSEG1\n";

const MAX_NAME_LEN: u64 = 4096;
const MAX_ELEMENTS: u64 = 1 << 30;

pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        for d in t.shape().dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn truncated(what: &str) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Checkpoint(format!("truncated file while reading {what}"))
        } else {
            Error::Io(e)
        }
    }
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated(what))?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads a complete tensor section; trailing bytes are an error.
pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated("magic"))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let count = read_u64(r, "tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = read_u64(r, "name length")?;
        if len > MAX_NAME_LEN {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: name length {len} is implausible"
            )));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(truncated("tensor name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?;
        let mut dims = [0usize; 4];
        let mut numel: u64 = 1;
        for d in &mut dims {
            let v = read_u64(r, "extents")?;
            numel = numel.saturating_mul(v);
            *d = v as usize;
        }
        if numel == 0 || numel > MAX_ELEMENTS {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}`: invalid extents {dims:?}"
            )));
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let mut bytes = vec![0u8; shape.numel() * 8];
        r.read_exact(&mut bytes)
            .map_err(truncated("tensor payload"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint(
            "trailing bytes after the last tensor".into(),
        ));
    }
    Ok(out)
}
