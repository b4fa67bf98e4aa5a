//! DFTN v1 tensor container.
//!
//! Layout: magic `DFTN`, u32 version (=1), u8 rank, rank little-endian u32
//! dims, then the row-major f32 little-endian payload. One tensor per file;
//! images, fields, and raw weights all use it.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{MorphError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DFTN";
const VERSION: u32 = 1;

pub fn write_bytes(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(MorphError::shape(format!(
            "dftn: {} values do not fill shape {:?}",
            data.len(),
            shape
        )));
    }
    if shape.len() > u8::MAX as usize {
        return Err(MorphError::format(format!("dftn: rank {} too large", shape.len())));
    }
    let mut out = Vec::with_capacity(4 + 4 + 1 + 4 * shape.len() + 4 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(shape.len() as u8);
    for d in shape {
        let d32 = u32::try_from(*d)
            .map_err(|_| MorphError::format(format!("dftn: dim {} exceeds u32", d)))?;
        out.extend_from_slice(&d32.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_bytes(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut cur = bytes;
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| MorphError::format("dftn: truncated header".to_string()))?;
    if &magic != MAGIC {
        return Err(MorphError::format(format!(
            "dftn: bad magic {:02x?}, expected {:02x?}",
            magic, MAGIC
        )));
    }
    let mut w32 = [0u8; 4];
    cur.read_exact(&mut w32)
        .map_err(|_| MorphError::format("dftn: truncated version".to_string()))?;
    let version = u32::from_le_bytes(w32);
    if version != VERSION {
        return Err(MorphError::format(format!(
            "dftn: unsupported version {version}"
        )));
    }
    let mut rank = [0u8; 1];
    cur.read_exact(&mut rank)
        .map_err(|_| MorphError::format("dftn: truncated rank".to_string()))?;
    let rank = rank[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        cur.read_exact(&mut w32)
            .map_err(|_| MorphError::format("dftn: truncated dims".to_string()))?;
        shape.push(u32::from_le_bytes(w32) as usize);
    }
    let numel: usize = shape.iter().product();
    if cur.len() != 4 * numel {
        return Err(MorphError::format(format!(
            "dftn: payload {} bytes, shape {:?} needs {}",
            cur.len(),
            shape,
            4 * numel
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in cur.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Ok((shape, data))
}

pub fn save(path: &Path, tensor: &Tensor) -> Result<()> {
    let bytes = write_bytes(tensor.shape(), &tensor.to_vec())?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (shape, data) = read_bytes(&bytes)
        .map_err(|e| MorphError::format(format!("{}: {e}", path.display())))?;
    Tensor::from_vec(data, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let values = vec![0.0f32, -1.5, 3.25e-7, f32::MIN_POSITIVE, 1e30];
        let bytes = write_bytes(&[5], &values).unwrap();
        assert_eq!(&bytes[..4], b"DFTN");
        assert_eq!(bytes.len(), 4 + 4 + 1 + 4 + 20);
        let (shape, data) = read_bytes(&bytes).unwrap();
        assert_eq!(shape, vec![5]);
        for (a, b) in values.iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rank0_scalar_round_trips() {
        let bytes = write_bytes(&[], &[2.5]).unwrap();
        let (shape, data) = read_bytes(&bytes).unwrap();
        assert!(shape.is_empty());
        assert_eq!(data, vec![2.5]);
    }

    #[test]
    fn rejects_corruption() {
        let good = write_bytes(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(read_bytes(&bad_magic).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(read_bytes(&bad_version).is_err());

        let truncated = &good[..good.len() - 3];
        assert!(read_bytes(truncated).is_err());
    }
}
