//! Flat binary container: magic, version, then per entry
//! `(name len u32, name bytes, rank u32, dims u64…, f64 payload)`, all
//! little-endian, until end of file.

use std::io::{Read, Write};

use super::{NumericsError, Tensor};

pub const CONTAINER_MAGIC: &[u8; 8] = b"MSLAMCKP";
pub const CONTAINER_VERSION: u32 = 1;

pub fn write_container<W: Write>(mut w: W, entries: &[(&str, &Tensor)]) -> Result<(), NumericsError> {
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    for (name, t) in entries {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8], NumericsError> {
    if buf.len() - *pos < n {
        return Err(NumericsError::Checkpoint(format!(
            "truncated while reading {what} at byte {}",
            *pos
        )));
    }
    let s = &buf[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

pub fn read_container<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    let magic = take(&buf, &mut pos, 8, "magic")?;
    if magic != CONTAINER_MAGIC {
        return Err(NumericsError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&buf, &mut pos, 4, "version")?.try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(NumericsError::Checkpoint(format!(
            "unsupported version {version}, expected {CONTAINER_VERSION}"
        )));
    }
    let mut out = Vec::new();
    while pos < buf.len() {
        let nlen = u32::from_le_bytes(take(&buf, &mut pos, 4, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&buf, &mut pos, nlen, "name")?)
            .map_err(|_| NumericsError::Checkpoint("name is not UTF-8".into()))?
            .to_string();
        let rank = u32::from_le_bytes(take(&buf, &mut pos, 4, "rank")?.try_into().unwrap()) as usize;
        if rank > 8 {
            return Err(NumericsError::Checkpoint(format!("implausible rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&buf, &mut pos, 8, "dim")?.try_into().unwrap()) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| NumericsError::Checkpoint(format!("overflowing shape for `{name}`")))?;
        let bytes_needed = n
            .checked_mul(8)
            .ok_or_else(|| NumericsError::Checkpoint(format!("overflowing shape for `{name}`")))?;
        let payload = take(&buf, &mut pos, bytes_needed, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
