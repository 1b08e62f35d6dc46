//! Dense scalar volumes, binary segmentation masks, and projections.
//!
//! Storage is a flat `Vec` in x-fastest order: `idx = i + nx*(j + ny*k)`.

mod io;
mod phantom;

pub use io::{vol_read, vol_write, write_atomic};
pub use phantom::{generate_phantom, ModalityStyle, PhantomSpec, FG_MAX, FG_MIN};

use crate::{Error, Result};

/// Grid dimensions of a volume, all strictly positive.
///
/// Deserialized values bypass [`Dims::new`]; consumers of configuration
/// files must re-validate (the network and trainer specs do).
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidDims {
                nx: nx as u64,
                ny: ny as u64,
                nz: nz as u64,
                reason: "dims must be positive",
            });
        }
        nx.checked_mul(ny)
            .and_then(|p| p.checked_mul(nz))
            .ok_or(Error::DimsOverflow { nx: nx as u64, ny: ny as u64, nz: nz as u64 })?;
        Ok(Dims { nx, ny, nz })
    }

    /// Total voxel count.
    pub fn n(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Flat index of voxel `(i, j, k)`, x fastest.
    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    /// True when every axis length is a power of two and at least 2.
    pub fn is_pow2(&self) -> bool {
        [self.nx, self.ny, self.nz].iter().all(|&n| n >= 2 && n.is_power_of_two())
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }
}

/// A dense scalar volume (image patch, probability field, latent channel...).
///
/// Values are finite `f64`; file storage is 32-bit (see [`vol_write`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(dims: Dims) -> Self {
        Volume { dims, data: vec![0.0; dims.n()] }
    }

    /// Builds a volume from raw data, checking length and finiteness.
    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.n() {
            return Err(Error::LenMismatch {
                what: "volume data",
                expected: dims.n(),
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { what: "volume data".into() });
        }
        Ok(Volume { dims, data })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.dims.idx(i, j, k)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation (divides by N).
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    /// Zero-mean, unit-std copy. Constant volumes are only centered
    /// (the zero spread leaves nothing to scale).
    pub fn normalized(&self) -> Volume {
        let m = self.mean();
        let s = self.std();
        let scale = if s > 1e-12 { 1.0 / s } else { 1.0 };
        let data = self.data.iter().map(|v| (v - m) * scale).collect();
        Volume { dims: self.dims, data }
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Binary segmentation mask aligned with a [`Volume`]; voxels are 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask {
    pub dims: Dims,
    pub data: Vec<u8>,
}

impl SegMask {
    pub fn zeros(dims: Dims) -> Self {
        SegMask { dims, data: vec![0; dims.n()] }
    }

    pub fn from_vec(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.n() {
            return Err(Error::LenMismatch {
                what: "mask data",
                expected: dims.n(),
                got: data.len(),
            });
        }
        if !data.iter().all(|&v| v <= 1) {
            return Err(Error::invalid("mask data", "values must be 0 or 1"));
        }
        Ok(SegMask { dims, data })
    }

    /// Fraction of foreground (value 1) voxels.
    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().filter(|&&v| v == 1).count() as f64 / self.data.len() as f64
    }
}

/// Projection axis for [`mip_project`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// A 2-D scalar grid, row-major with the first remaining axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2d {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image2d {
    #[inline]
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[u + self.width * v]
    }
}

/// Maximum-intensity projection along `axis`.
///
/// The output keeps the two remaining axes in their natural order:
/// `Z -> (x, y)`, `Y -> (x, z)`, `X -> (y, z)`.
pub fn mip_project(v: &Volume, axis: Axis) -> Image2d {
    let Dims { nx, ny, nz } = v.dims;
    let (width, height) = match axis {
        Axis::Z => (nx, ny),
        Axis::Y => (nx, nz),
        Axis::X => (ny, nz),
    };
    let mut data = vec![f64::NEG_INFINITY; width * height];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let (u, w) = match axis {
                    Axis::Z => (i, j),
                    Axis::Y => (i, k),
                    Axis::X => (j, k),
                };
                let o = u + width * w;
                let val = v.at(i, j, k);
                if val > data[o] {
                    data[o] = val;
                }
            }
        }
    }
    Image2d { width, height, data }
}
