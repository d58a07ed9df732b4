//! `TNSR` records: magic, `u32` rank, `u32` dims, then the values as
//! little-endian `f32`.

use std::io::{Read, Write};

use ftvp_core::{Real, Tensor};

use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
/// Upper bound on the rank accepted when reading.
pub const MAX_RANK: usize = 8;

fn io(e: std::io::Error) -> AppError {
    AppError::data(format!("tensor record: {e}"))
}

pub fn write_tensor<T: Real>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io)?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| AppError::data(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes()).map_err(io)?;
    }
    let mut buf = Vec::with_capacity(4 * t.len());
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(io)
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<T: Real>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(AppError::data(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > MAX_RANK {
        return Err(AppError::data(format!("tensor rank {rank} exceeds {MAX_RANK}")));
    }
    let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n.checked_mul(4).is_some())
        .ok_or_else(|| AppError::data(format!("tensor shape {shape:?} overflows")))?;
    let mut bytes = Vec::new();
    r.take(4 * len as u64).read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != 4 * len {
        return Err(AppError::data(format!("tensor {shape:?} truncated: {} of {} bytes", bytes.len(), 4 * len)));
    }
    let data =
        bytes.chunks_exact(4).map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
    Ok(Tensor::new(&shape, data)?)
}
