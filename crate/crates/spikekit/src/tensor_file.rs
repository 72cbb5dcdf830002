//! Raw tensor files: `SBTN`, u32 rank, u64 dims, f32 little-endian data.

use std::io::{Read, Write};

use spikekit_core::Tensor;

use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"SBTN";

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("tensor file truncated in {what}")),
        _ => Error::io("<tensor>", e),
    })
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    read_exact(r, &mut b4, "rank")?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("tensor rank {rank} is implausible")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        read_exact(r, &mut b8, "dims")?;
        shape.push(usize::try_from(u64::from_le_bytes(b8)).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<tensor>", e))?;
    if bytes.len() != len * 4 {
        return Err(Error::Format(format!("tensor payload has {} bytes, shape needs {}", bytes.len(), len * 4)));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(shape, data)?)
}
