//! fMRI volumes, gray-matter masks and their binary file format.
//!
//! File layout (all integers little-endian):
//!
//! | bytes            | content                                   |
//! |------------------|-------------------------------------------|
//! | 4                | magic `ABFR`                              |
//! | 1                | format version (`1`)                      |
//! | 16               | `T, X, Y, Z` as `u32`                     |
//! | 4·T·X·Y·Z        | voxel values as `f32`, timepoint-major    |
//! | ⌈X·Y·Z / 8⌉      | mask bits, voxel `i` at bit `i % 8` (LSB first) of byte `i / 8` |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ABFR";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 16;

/// Spatial extent `(X, Y, Z)`.
pub type SpatialDims = [usize; 3];

/// A 4D BOLD acquisition, `T × X × Y × Z`, stored timepoint-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FmriVolume {
    dims: [usize; 4],
    values: Vec<f32>,
}

impl FmriVolume {
    pub fn new(dims: [usize; 4], values: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::validation(format!("volume dims must be positive, got {dims:?}")));
        }
        if dims[0] < 2 {
            return Err(Error::validation(
                "a volume needs at least 2 timepoints for correlation",
            ));
        }
        let n = dims.iter().product::<usize>();
        if values.len() != n {
            return Err(Error::Shape {
                op: "volume",
                lhs: dims.to_vec(),
                rhs: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("volume contains non-finite values"));
        }
        Ok(Self { dims, values })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn timepoints(&self) -> usize {
        self.dims[0]
    }

    pub fn spatial_dims(&self) -> SpatialDims {
        [self.dims[1], self.dims[2], self.dims[3]]
    }

    pub fn spatial_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// All timepoints of spatial voxel `s` (a linear spatial index).
    pub fn value(&self, t: usize, s: usize) -> f32 {
        self.values[t * self.spatial_len() + s]
    }

    /// The volume with every value mapped through `f` (used for invariance checks).
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims, self.values.iter().map(|&v| f(v)).collect())
    }
}

pub fn spatial_index(dims: SpatialDims, x: usize, y: usize, z: usize) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

/// Binary voxel mask over the spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayMatterMask {
    dims: SpatialDims,
    values: Vec<bool>,
}

impl GrayMatterMask {
    pub fn new(dims: SpatialDims, values: Vec<bool>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::validation(format!("mask dims must be positive, got {dims:?}")));
        }
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "mask",
                lhs: dims.to_vec(),
                rhs: vec![values.len()],
            });
        }
        Ok(Self { dims, values })
    }

    pub fn full(dims: SpatialDims) -> Self {
        Self {
            dims,
            values: vec![true; dims.iter().product()],
        }
    }

    pub fn empty(dims: SpatialDims) -> Self {
        Self {
            dims,
            values: vec![false; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: SpatialDims, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    values.push(f(x, y, z));
                }
            }
        }
        Self { dims, values }
    }

    /// Ellipsoid inscribed in the spatial box, tested at voxel centres.
    pub fn inscribed_ellipsoid(dims: SpatialDims) -> Self {
        let r = |v: usize, d: usize| ((v as f64 + 0.5) / d as f64 - 0.5) / 0.5;
        Self::from_fn(dims, |x, y, z| {
            let (a, b, c) = (r(x, dims[0]), r(y, dims[1]), r(z, dims[2]));
            a * a + b * b + c * c <= 1.0
        })
    }

    pub fn dims(&self) -> SpatialDims {
        self.dims
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.values[spatial_index(self.dims, x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Half-open bounding box `[min, max)` per axis of the positive voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = self.dims;
        let mut hi = [0; 3];
        let mut any = false;
        for x in 0..self.dims[0] {
            for y in 0..self.dims[1] {
                for z in 0..self.dims[2] {
                    if self.get(x, y, z) {
                        any = true;
                        for (axis, v) in [x, y, z].into_iter().enumerate() {
                            lo[axis] = lo[axis].min(v);
                            hi[axis] = hi[axis].max(v + 1);
                        }
                    }
                }
            }
        }
        any.then_some((lo, hi))
    }
}

pub fn write_volume(path: &Path, volume: &FmriVolume, mask: &GrayMatterMask) -> Result<()> {
    let bytes = encode_volume(volume, mask)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<(FmriVolume, GrayMatterMask)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes).map_err(|e| match e {
        Error::BadMagic(_) => Error::BadMagic(path.display().to_string()),
        other => other,
    })
}

pub fn encode_volume(volume: &FmriVolume, mask: &GrayMatterMask) -> Result<Vec<u8>> {
    if volume.spatial_dims() != mask.dims() {
        return Err(Error::Shape {
            op: "write_volume",
            lhs: volume.spatial_dims().to_vec(),
            rhs: mask.dims().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + volume.values.len() * 4 + mask.values.len() / 8 + 1);
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    for d in volume.dims {
        let d = u32::try_from(d).map_err(|_| Error::DimOverflow(vec![d as u64]))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in &volume.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut packed = vec![0u8; mask.values.len().div_ceil(8)];
    for (i, &bit) in mask.values.iter().enumerate() {
        if bit {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&packed);
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<(FmriVolume, GrayMatterMask)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic("volume".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let dims_u64: Vec<u64> = (0..4)
        .map(|i| {
            let at = 5 + 4 * i;
            u64::from(u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")))
        })
        .collect();
    let overflow = || Error::DimOverflow(dims_u64.clone());
    let voxels = dims_u64
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(overflow)?;
    let spatial = dims_u64[1..].iter().product::<u64>();
    let payload = voxels
        .checked_mul(4)
        .and_then(|v| v.checked_add(spatial.div_ceil(8)))
        .and_then(|v| v.checked_add(HEADER_LEN as u64))
        .ok_or_else(overflow)?;
    let expected = usize::try_from(payload).map_err(|_| overflow())?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let dims = [
        dims_u64[0] as usize,
        dims_u64[1] as usize,
        dims_u64[2] as usize,
        dims_u64[3] as usize,
    ];
    let voxels = voxels as usize;
    let values: Vec<f32> = bytes[HEADER_LEN..HEADER_LEN + voxels * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let packed = &bytes[HEADER_LEN + voxels * 4..];
    let spatial = spatial as usize;
    let mask_values: Vec<bool> = (0..spatial).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
    let volume = FmriVolume::new(dims, values)?;
    let mask = GrayMatterMask::new([dims[1], dims[2], dims[3]], mask_values)?;
    Ok((volume, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (FmriVolume, GrayMatterMask) {
        let dims = [3, 2, 3, 4];
        let values = (0..72).map(|i| (i as f32).sin() * 1e3 + 0.125).collect();
        let vol = FmriVolume::new(dims, values).unwrap();
        let mask = GrayMatterMask::from_fn([2, 3, 4], |x, y, z| (x + y * z) % 3 == 0);
        (vol, mask)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (vol, mask) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.abfr");
        write_volume(&path, &vol, &mask).unwrap();
        let (v2, m2) = read_volume(&path).unwrap();
        assert_eq!(v2, vol);
        assert_eq!(m2, mask);
        assert_eq!(encode_volume(&v2, &m2).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn wrong_magic_is_a_parse_error() {
        let (vol, mask) = sample();
        let mut bytes = encode_volume(&vol, &mask).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_volume(&bytes), Err(Error::BadMagic(_))));
        assert!(matches!(decode_volume(b"AB"), Err(Error::BadMagic(_))));
    }

    #[test]
    fn short_payload_is_truncation() {
        let (vol, mask) = sample();
        let bytes = encode_volume(&vol, &mask).unwrap();
        assert!(matches!(
            decode_volume(&bytes[..bytes.len() - 10]),
            Err(Error::Truncated { .. })
        ));
        // header claims a bigger volume than the payload holds
        let mut bigger = bytes.clone();
        bigger[5..9].copy_from_slice(&100u32.to_le_bytes());
        assert!(matches!(decode_volume(&bigger), Err(Error::Truncated { .. })));
    }

    #[test]
    fn absurd_dims_overflow() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.push(FORMAT_VERSION);
        for _ in 0..4 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode_volume(&bytes), Err(Error::DimOverflow(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let (vol, mask) = sample();
        let mut bytes = encode_volume(&vol, &mask).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_volume(&bytes), Err(Error::UnsupportedVersion(9))));
    }

    #[test]
    fn volume_invariants() {
        assert!(FmriVolume::new([1, 2, 2, 2], vec![0.0; 8]).is_err());
        assert!(FmriVolume::new([2, 2, 2, 2], vec![0.0; 15]).is_err());
        assert!(FmriVolume::new([2, 1, 1, 1], vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn bounding_box_is_half_open() {
        let mask = GrayMatterMask::from_fn([8, 8, 8], |x, y, z| {
            (2..5).contains(&x) && y == 7 && (1..=3).contains(&z)
        });
        assert_eq!(mask.bounding_box(), Some(([2, 7, 1], [5, 8, 4])));
        assert_eq!(GrayMatterMask::empty([2, 2, 2]).bounding_box(), None);
    }

    #[test]
    fn ellipsoid_fraction_near_pi_over_six() {
        let mask = GrayMatterMask::inscribed_ellipsoid([16, 16, 16]);
        let frac = mask.count() as f64 / 4096.0;
        let target = std::f64::consts::PI / 6.0;
        assert!((frac - target).abs() / target < 0.05, "{frac}");
    }
}
