//! Flat tensor file format used for checkpoints and pre-extracted features.
//!
//! Layout, all little-endian: 4-byte magic `TSR1`, `u32` rank, `u32`
//! extents[rank], then `f32` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TSR1";

/// Write a tensor blob to any sink.
pub fn write_tensor<W: Write>(w: &mut W, shape: &[usize], data: &[f64]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::Argument(format!(
            "tensor data of length {} does not fill shape {:?}",
            data.len(),
            shape
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Read a tensor blob from any source.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("tensor file shorter than its magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad tensor magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| Error::Format("tensor file truncated before rank".into()))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::Format("tensor file truncated in extents".into()))?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut u32buf)
            .map_err(|_| Error::Format("tensor file truncated in data".into()))?;
        data.push(f32::from_le_bytes(u32buf) as f64);
    }
    Ok((shape, data))
}

pub fn save_tensor(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, shape, data)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

/// Round to the nearest `f32`, as file round-trips do.
pub fn snap_f32(v: f64) -> f64 {
    v as f32 as f64
}
