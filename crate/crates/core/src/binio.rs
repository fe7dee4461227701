//! Little-endian binary matrices: `magic(4) | version u32 | rows u32 | cols u32 | f32 data`.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub(crate) fn write_matrix<W: Write>(w: &mut W, magic: &[u8; 4], rows: usize, cols: usize, data: &[f64]) -> std::io::Result<()> {
    debug_assert_eq!(rows * cols, data.len());
    let mut buf = Vec::with_capacity(16 + data.len() * 4);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for &x in data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::data(format!("truncated file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Returns `(rows, cols, data)`.
pub(crate) fn read_matrix<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<(usize, usize, Vec<f64>)> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|e| Error::data(format!("truncated header: {e}")))?;
    if &m != magic {
        return Err(Error::data(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported version {version}")));
    }
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf).map_err(|e| Error::data(format!("truncated data: {e}")))?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((rows, cols, data))
}
