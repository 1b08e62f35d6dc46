//! Binary volume file format.
//!
//! Layout (little-endian):
//! ```text
//! offset 0   magic  b"VOL1"
//! offset 4   u32    nx
//! offset 8   u32    ny
//! offset 12  u32    nz
//! offset 16  u32    flags (bit 0: segmentation mask appended)
//! offset 20  u32    reserved, must be zero
//! offset 24  f32 * nx*ny*nz   intensities, x fastest
//! then       u8  * nx*ny*nz   mask voxels (only when flag bit 0 is set)
//! ```
//! Intensities are stored in 32-bit precision; reading widens to `f64`.
//! Read-then-write reproduces a valid file byte for byte, and
//! write-then-read is exact whenever the values are 32-bit representable.

use std::io::Write;
use std::path::Path;

use crate::volume::{Dims, SegMask, Volume};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VOL1";
const HEADER_LEN: usize = 24;
const FLAG_MASK: u32 = 1;

/// Writes `bytes` to `path` atomically (temp file in the same directory,
/// then rename), so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serializes a volume (and optional aligned mask) to `path` atomically.
pub fn vol_write(path: &Path, v: &Volume, mask: Option<&SegMask>) -> Result<()> {
    if let Some(m) = mask {
        if m.dims != v.dims {
            return Err(Error::DimsMismatch {
                what: "mask",
                expected: v.dims.as_tuple(),
                got: m.dims.as_tuple(),
            });
        }
    }
    let n = v.dims.n();
    let mut bytes = Vec::with_capacity(HEADER_LEN + n * 4 + mask.map_or(0, |_| n));
    bytes.extend_from_slice(MAGIC);
    for d in [v.dims.nx, v.dims.ny, v.dims.nz] {
        let d = u32::try_from(d).map_err(|_| Error::DimsOverflow {
            nx: v.dims.nx as u64,
            ny: v.dims.ny as u64,
            nz: v.dims.nz as u64,
        })?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    let flags: u32 = if mask.is_some() { FLAG_MASK } else { 0 };
    bytes.extend_from_slice(&flags.to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for &x in &v.data {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    if let Some(m) = mask {
        bytes.extend_from_slice(&m.data);
    }
    write_atomic(path, &bytes)
}

fn read_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Reads a volume file written by [`vol_write`].
pub fn vol_read(path: &Path) -> Result<(Volume, Option<SegMask>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN as u64, got: bytes.len() as u64 });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic { expected: "VOL1", found: bytes[0..4].to_vec() });
    }
    let (nx, ny, nz) = (read_u32(&bytes, 4), read_u32(&bytes, 8), read_u32(&bytes, 12));
    let flags = read_u32(&bytes, 16);
    let reserved = read_u32(&bytes, 20);
    if reserved != 0 {
        return Err(Error::invalid("reserved", format!("must be zero, got {reserved}")));
    }
    if flags & !FLAG_MASK != 0 {
        return Err(Error::invalid("flags", format!("unknown flag bits in {flags:#x}")));
    }
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::InvalidDims {
            nx: nx as u64,
            ny: ny as u64,
            nz: nz as u64,
            reason: "dims must be positive",
        });
    }
    let n = (nx as u64)
        .checked_mul(ny as u64)
        .and_then(|p| p.checked_mul(nz as u64))
        .filter(|&p| p <= (usize::MAX as u64) / 8)
        .ok_or(Error::DimsOverflow { nx: nx as u64, ny: ny as u64, nz: nz as u64 })?
        as usize;
    let has_mask = flags & FLAG_MASK != 0;
    let expected = HEADER_LEN as u64 + n as u64 * 4 + if has_mask { n as u64 } else { 0 };
    if bytes.len() as u64 != expected {
        return Err(Error::Truncated { expected, got: bytes.len() as u64 });
    }
    let dims = Dims::new(nx as usize, ny as usize, nz as usize)?;
    let mut data = Vec::with_capacity(n);
    for c in bytes[HEADER_LEN..HEADER_LEN + 4 * n].chunks_exact(4) {
        let x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !x.is_finite() {
            return Err(Error::NonFinite { what: format!("{}", path.display()) });
        }
        data.push(x as f64);
    }
    let volume = Volume { dims, data };
    let mask = if has_mask {
        let raw = bytes[HEADER_LEN + 4 * n..].to_vec();
        Some(SegMask::from_vec(dims, raw)?)
    } else {
        None
    };
    Ok((volume, mask))
}
