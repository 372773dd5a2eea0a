//! Patch signals, Pearson connectivity and the function representation.
//!
//! A subject's representation pairs every sampled patch with its correlation
//! to each anchor signal (one row of the FC matrix) and its normalized centre
//! position. Iterative sampling repeats this over several patch sizes,
//! averages the FC matrices and concatenates the positions.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSet, PatchSpec, DEFAULT_MAX_ATTEMPTS};
use crate::error::{Error, Result};
use crate::rng::{seeded, stream_seed, SeededRng};
use crate::tensor::Tensor;
use crate::volume::{FmriVolume, GrayMatterMask, SpatialDims};

pub const DEFAULT_PATCH_SIZES: [usize; 3] = [8, 12, 16];
pub const DEFAULT_PATCHES_PER_ITERATION: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub spec: PatchSpec,
    /// Per-timepoint mean over the patch's gray-matter voxels.
    pub mean_signal: Vec<f64>,
    /// Patch centre divided by the spatial dims, each component in `[0, 1]`.
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionRepresentation {
    /// `N × A` correlations between patch and anchor signals.
    pub fc: Tensor,
    /// `(N · n_iterations) × 3` normalized positions, iterations stacked in order.
    pub positions: Tensor,
    pub patch_sizes_used: Vec<usize>,
    pub n_iterations: usize,
    pub seed: u64,
}

impl FunctionRepresentation {
    pub fn n_patches(&self) -> usize {
        self.fc.shape()[0]
    }

    pub fn n_anchors(&self) -> usize {
        self.fc.shape()[1]
    }

    /// One position per FC row: row `i` averaged over the `i`-th patch of every iteration.
    pub fn token_positions(&self) -> Tensor {
        let n = self.n_patches();
        let iters = self.n_iterations.max(1);
        let mut out = vec![0.0; n * 3];
        for it in 0..iters {
            for i in 0..n {
                for a in 0..3 {
                    out[i * 3 + a] += self.positions.get2(it * n + i, a);
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= iters as f64);
        Tensor::new(vec![n, 3], out).expect("n×3")
    }

    fn validate(&self) -> Result<()> {
        let (n, _) = self.fc.dims2()?;
        let (m, c) = self.positions.dims2()?;
        if c != 3 || m != n * self.n_iterations {
            return Err(Error::Malformed(format!(
                "positions {:?} do not match {n} patches over {} iterations",
                self.positions.shape(),
                self.n_iterations
            )));
        }
        if self.fc.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Malformed("FC entry outside [-1, 1]".into()));
        }
        Ok(())
    }
}

/// `n` voxel coordinates, each axis uniform over `0..dim`, drawn x, y, z.
pub fn sample_patch_centers(dims: SpatialDims, n: usize, seed: u64) -> Result<Vec<[usize; 3]>> {
    if n == 0 {
        return Err(Error::validation("need at least one patch centre"));
    }
    let mut rng = seeded(seed);
    Ok((0..n).map(|_| draw_center(&mut rng, dims)).collect())
}

fn draw_center(rng: &mut SeededRng, dims: SpatialDims) -> [usize; 3] {
    let x = rng.random_range(0..dims[0]);
    let y = rng.random_range(0..dims[1]);
    let z = rng.random_range(0..dims[2]);
    [x, y, z]
}

/// Cube of edge `size` centred on `center`, shifted inward where it would
/// cross the volume border.
pub fn patch_around(center: [usize; 3], size: usize, dims: SpatialDims) -> Result<PatchSpec> {
    if size == 0 || dims.iter().any(|&d| size > d) {
        return Err(Error::validation(format!(
            "patch size {size} does not fit spatial dims {dims:?}"
        )));
    }
    let start = std::array::from_fn(|a| center[a].saturating_sub(size / 2).min(dims[a] - size));
    Ok(PatchSpec { start, size })
}

fn region_mean(volume: &FmriVolume, voxels: &[usize]) -> Vec<f64> {
    let s_len = volume.spatial_len();
    let values = volume.values();
    let n = voxels.len() as f64;
    (0..volume.timepoints())
        .map(|t| {
            let frame = &values[t * s_len..(t + 1) * s_len];
            voxels.iter().map(|&s| f64::from(frame[s])).sum::<f64>() / n
        })
        .collect()
}

fn check_pair(volume: &FmriVolume, mask: &GrayMatterMask) -> Result<()> {
    if volume.spatial_dims() != mask.dims() {
        return Err(Error::Shape {
            op: "volume/mask",
            lhs: volume.spatial_dims().to_vec(),
            rhs: mask.dims().to_vec(),
        });
    }
    Ok(())
}

/// Mean signal over the voxels where both the patch cube and the mask are set.
pub fn patch_mean_signal(
    volume: &FmriVolume,
    mask: &GrayMatterMask,
    spec: &PatchSpec,
) -> Result<Vec<f64>> {
    check_pair(volume, mask)?;
    if !spec.fits(mask.dims()) {
        return Err(Error::validation(format!(
            "patch {spec:?} does not fit inside {:?}",
            mask.dims()
        )));
    }
    let m = mask.values();
    let voxels: Vec<usize> = spec.voxels(mask.dims()).filter(|&i| m[i]).collect();
    if voxels.is_empty() {
        return Err(Error::EmptyPatch {
            start: spec.start,
            size: spec.size,
        });
    }
    Ok(region_mean(volume, &voxels))
}

/// Indicator-weighted mean signal over an arbitrary region.
pub fn anchor_mean_signal(volume: &FmriVolume, region: &[bool]) -> Result<Vec<f64>> {
    if region.len() != volume.spatial_len() {
        return Err(Error::Shape {
            op: "anchor_mean_signal",
            lhs: volume.spatial_dims().to_vec(),
            rhs: vec![region.len()],
        });
    }
    let voxels: Vec<usize> = (0..region.len()).filter(|&i| region[i]).collect();
    if voxels.is_empty() {
        return Err(Error::validation("anchor region is empty"));
    }
    Ok(region_mean(volume, &voxels))
}

/// Region of an anchor: its cube intersected with gray matter, or the bare
/// cube when the two do not meet (possible only for grid anchors with `tau = 0`).
pub fn anchor_region(spec: &PatchSpec, mask: &GrayMatterMask) -> Vec<bool> {
    let dims = mask.dims();
    let m = mask.values();
    let mut region = vec![false; m.len()];
    let mut any = false;
    for i in spec.voxels(dims) {
        if m[i] {
            region[i] = true;
            any = true;
        }
    }
    if !any {
        for i in spec.voxels(dims) {
            region[i] = true;
        }
    }
    region
}

pub fn anchor_signals(
    volume: &FmriVolume,
    mask: &GrayMatterMask,
    anchors: &AnchorSet,
) -> Result<Vec<Vec<f64>>> {
    check_pair(volume, mask)?;
    if anchors.dims != mask.dims() {
        return Err(Error::Shape {
            op: "anchor_signals",
            lhs: anchors.dims.to_vec(),
            rhs: mask.dims().to_vec(),
        });
    }
    anchors
        .anchors
        .iter()
        .map(|a| anchor_mean_signal(volume, &anchor_region(a, mask)))
        .collect()
}

/// Pearson correlation; a zero-variance input gives 0.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "pearson",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.len() < 2 {
        return Err(Error::validation("pearson needs at least 2 observations"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// `C[i][j] = pearson(patch i, anchor j)`.
pub fn build_fc_matrix(patches: &[PatchSample], anchor_signals: &[Vec<f64>]) -> Result<Tensor> {
    if patches.is_empty() || anchor_signals.is_empty() {
        return Err(Error::validation("FC matrix needs patches and anchors"));
    }
    let mut data = Vec::with_capacity(patches.len() * anchor_signals.len());
    for p in patches {
        for a in anchor_signals {
            data.push(pearson(&p.mean_signal, a)?);
        }
    }
    Tensor::new(vec![patches.len(), anchor_signals.len()], data)
}

/// Draws `n` patches of one size, redrawing centres whose cube misses gray matter.
pub fn sample_patches(
    volume: &FmriVolume,
    mask: &GrayMatterMask,
    n: usize,
    size: usize,
    rng: &mut SeededRng,
    max_attempts: usize,
) -> Result<Vec<PatchSample>> {
    check_pair(volume, mask)?;
    if n == 0 {
        return Err(Error::validation("need at least one patch"));
    }
    let dims = mask.dims();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut placed = false;
        for _ in 0..max_attempts {
            let spec = patch_around(draw_center(rng, dims), size, dims)?;
            match patch_mean_signal(volume, mask, &spec) {
                Ok(mean_signal) => {
                    let c = spec.center();
                    let position = std::array::from_fn(|a| c[a] / dims[a] as f64);
                    out.push(PatchSample {
                        spec,
                        mean_signal,
                        position,
                    });
                    placed = true;
                    break;
                }
                Err(Error::EmptyPatch { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        if !placed {
            return Err(Error::NoValidPlacement {
                requested: n,
                achieved: out.len(),
                attempts: max_attempts,
            });
        }
    }
    Ok(out)
}

fn positions_tensor(patches: &[PatchSample]) -> Tensor {
    let data = patches.iter().flat_map(|p| p.position).collect();
    Tensor::new(vec![patches.len(), 3], data).expect("n×3")
}

/// Single-scale representation: `n_patches` patches of one size.
pub fn random_sampling_representation(
    volume: &FmriVolume,
    mask: &GrayMatterMask,
    anchors: &AnchorSet,
    n_patches: usize,
    patch_size: usize,
    seed: u64,
) -> Result<FunctionRepresentation> {
    let signals = anchor_signals(volume, mask, anchors)?;
    let mut rng = seeded(seed);
    let patches = sample_patches(volume, mask, n_patches, patch_size, &mut rng, DEFAULT_MAX_ATTEMPTS)?;
    Ok(FunctionRepresentation {
        fc: build_fc_matrix(&patches, &signals)?,
        positions: positions_tensor(&patches),
        patch_sizes_used: vec![patch_size],
        n_iterations: 1,
        seed,
    })
}

/// Seed of iteration `i` of iterative sampling; iteration 0 uses `seed` itself.
pub fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    stream_seed(seed, iteration as u64)
}

/// Multi-scale representation: one pass per size with fresh patches.
///
/// The aggregated FC matrix is `(Σ_i FC_i) / |sizes|`, summed in iteration
/// order; positions are the per-iteration position matrices stacked in order.
pub fn iterative_sampling_representation(
    volume: &FmriVolume,
    mask: &GrayMatterMask,
    anchors: &AnchorSet,
    n_patches_per_iter: usize,
    sizes: &[usize],
    seed: u64,
) -> Result<FunctionRepresentation> {
    if sizes.is_empty() {
        return Err(Error::validation("iterative sampling needs at least one patch size"));
    }
    let dims = mask.dims();
    if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || dims.iter().any(|&d| s > d)) {
        return Err(Error::validation(format!(
            "patch size {bad} does not fit spatial dims {dims:?}"
        )));
    }
    let signals = anchor_signals(volume, mask, anchors)?;
    let mut fc_sum = vec![0.0; n_patches_per_iter * signals.len()];
    let mut positions = Vec::with_capacity(sizes.len() * n_patches_per_iter * 3);
    for (i, &size) in sizes.iter().enumerate() {
        let mut rng = seeded(iteration_seed(seed, i));
        let patches = sample_patches(
            volume,
            mask,
            n_patches_per_iter,
            size,
            &mut rng,
            DEFAULT_MAX_ATTEMPTS,
        )?;
        let fc = build_fc_matrix(&patches, &signals)?;
        fc_sum.iter_mut().zip(fc.data()).for_each(|(s, v)| *s += v);
        positions.extend(patches.iter().flat_map(|p| p.position));
    }
    let k = sizes.len() as f64;
    let fc: Vec<f64> = fc_sum.into_iter().map(|s| s / k).collect();
    Ok(FunctionRepresentation {
        fc: Tensor::new(vec![n_patches_per_iter, signals.len()], fc)?,
        positions: Tensor::new(vec![sizes.len() * n_patches_per_iter, 3], positions)?,
        patch_sizes_used: sizes.to_vec(),
        n_iterations: sizes.len(),
        seed,
    })
}

// ── File format ─────────────────────────────────────────────────────
//
// `ABFRFEAT` | u32 header length | JSON header | f64 LE payload (fc, then positions)

const REP_MAGIC: &[u8; 8] = b"ABFRFEAT";

#[derive(Debug, Serialize, Deserialize)]
struct RepHeader {
    n_patches: usize,
    n_anchors: usize,
    n_position_rows: usize,
    patch_sizes_used: Vec<usize>,
    n_iterations: usize,
    seed: u64,
    anchor_ref: Option<String>,
}

pub fn encode_representation(rep: &FunctionRepresentation, anchor_ref: Option<&str>) -> Result<Vec<u8>> {
    let header = RepHeader {
        n_patches: rep.n_patches(),
        n_anchors: rep.n_anchors(),
        n_position_rows: rep.positions.shape()[0],
        patch_sizes_used: rep.patch_sizes_used.clone(),
        n_iterations: rep.n_iterations,
        seed: rep.seed,
        anchor_ref: anchor_ref.map(str::to_string),
    };
    let json = serde_json::to_vec(&header)?;
    let json_len = u32::try_from(json.len()).map_err(|_| Error::validation("header too large"))?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * (rep.fc.len() + rep.positions.len()));
    out.extend_from_slice(REP_MAGIC);
    out.extend_from_slice(&json_len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in rep.fc.data().iter().chain(rep.positions.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_representation(bytes: &[u8]) -> Result<FunctionRepresentation> {
    if bytes.len() < 8 || &bytes[..8] != REP_MAGIC {
        return Err(Error::BadMagic("function representation".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            expected: 12,
            found: bytes.len(),
        });
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12 + json_len;
    if bytes.len() < body {
        return Err(Error::Truncated {
            expected: body,
            found: bytes.len(),
        });
    }
    let header: RepHeader = serde_json::from_slice(&bytes[12..body])?;
    let fc_len = header
        .n_patches
        .checked_mul(header.n_anchors)
        .ok_or_else(|| Error::DimOverflow(vec![header.n_patches as u64, header.n_anchors as u64]))?;
    let pos_len = header
        .n_position_rows
        .checked_mul(3)
        .ok_or_else(|| Error::DimOverflow(vec![header.n_position_rows as u64, 3]))?;
    let expected = fc_len
        .checked_add(pos_len)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(body))
        .ok_or_else(|| Error::DimOverflow(vec![fc_len as u64, pos_len as u64]))?;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let floats: Vec<f64> = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let rep = FunctionRepresentation {
        fc: Tensor::new(vec![header.n_patches, header.n_anchors], floats[..fc_len].to_vec())?,
        positions: Tensor::new(vec![header.n_position_rows, 3], floats[fc_len..].to_vec())?,
        patch_sizes_used: header.patch_sizes_used,
        n_iterations: header.n_iterations,
        seed: header.seed,
    };
    rep.validate()?;
    Ok(rep)
}

pub fn write_representation(
    path: &Path,
    rep: &FunctionRepresentation,
    anchor_ref: Option<&str>,
) -> Result<()> {
    fs::write(path, encode_representation(rep, anchor_ref)?).map_err(|e| Error::io(path, e))
}

pub fn read_representation(path: &Path) -> Result<FunctionRepresentation> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_representation(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{random_anchor_selection, AnchorMethod};

    fn constant_volume(dims: [usize; 4], c: f32) -> FmriVolume {
        FmriVolume::new(dims, vec![c; dims.iter().product()]).unwrap()
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(pearson(&x, &[2.0; 4]).unwrap(), 0.0);
        assert!(pearson(&x, &[1.0, 2.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn two_voxel_patch_mean() {
        let dims = [5, 4, 4, 4];
        let mut values = vec![0f32; 5 * 64];
        let mask = GrayMatterMask::from_fn([4, 4, 4], |x, y, z| (x, y, z) == (0, 0, 0) || (x, y, z) == (1, 1, 1));
        for t in 0..5 {
            values[t * 64] = 1.0;
            values[t * 64 + crate::volume::spatial_index([4, 4, 4], 1, 1, 1)] = 3.0;
        }
        let vol = FmriVolume::new(dims, values).unwrap();
        let spec = PatchSpec { start: [0, 0, 0], size: 2 };
        assert_eq!(patch_mean_signal(&vol, &mask, &spec).unwrap(), vec![2.0; 5]);
    }

    #[test]
    fn constant_volume_gives_constant_mean() {
        let vol = constant_volume([3, 4, 4, 4], 7.5);
        let mask = GrayMatterMask::full([4, 4, 4]);
        let spec = PatchSpec { start: [1, 1, 1], size: 3 };
        assert_eq!(patch_mean_signal(&vol, &mask, &spec).unwrap(), vec![7.5; 3]);
        let region = anchor_region(&spec, &mask);
        assert_eq!(anchor_mean_signal(&vol, &region).unwrap(), vec![7.5; 3]);
    }

    #[test]
    fn empty_patch_and_region_errors() {
        let vol = constant_volume([3, 4, 4, 4], 1.0);
        let mask = GrayMatterMask::empty([4, 4, 4]);
        let spec = PatchSpec { start: [0, 0, 0], size: 2 };
        assert!(matches!(
            patch_mean_signal(&vol, &mask, &spec),
            Err(Error::EmptyPatch { .. })
        ));
        assert!(anchor_mean_signal(&vol, &vec![false; 64]).is_err());
        // a grid anchor outside gray matter falls back to its bare cube
        assert_eq!(anchor_region(&spec, &mask).iter().filter(|&&b| b).count(), 8);
    }

    #[test]
    fn patches_shift_inward_at_borders() {
        let p = patch_around([0, 15, 7], 8, [16, 16, 16]).unwrap();
        assert_eq!(p.start, [0, 8, 3]);
        assert!(p.fits([16; 3]));
        assert!(patch_around([0, 0, 0], 17, [16; 3]).is_err());
    }

    #[test]
    fn center_sampling_is_deterministic_and_rejects_zero() {
        assert!(sample_patch_centers([8; 3], 0, 1).is_err());
        assert_eq!(
            sample_patch_centers([8; 3], 20, 4).unwrap(),
            sample_patch_centers([8; 3], 20, 4).unwrap()
        );
    }

    #[test]
    fn single_patch_equal_to_single_anchor() {
        // one timepoint-varying volume, full mask, anchor = the whole box = the patch
        let dims = [6, 4, 4, 4];
        let values = (0..6 * 64).map(|i| ((i / 64) as f32).powi(2) + (i % 64) as f32 * 0.01).collect();
        let vol = FmriVolume::new(dims, values).unwrap();
        let mask = GrayMatterMask::full([4; 3]);
        let anchors = AnchorSet {
            method: AnchorMethod::Random { seed: 0, max_attempts: 1 },
            tau: 1,
            patch_size: 4,
            dims: [4; 3],
            anchors: vec![PatchSpec { start: [0; 3], size: 4 }],
        };
        let rep = random_sampling_representation(&vol, &mask, &anchors, 1, 4, 3).unwrap();
        assert_eq!(rep.fc.shape(), &[1, 1]);
        assert!((rep.fc.data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(rep.positions.data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn representation_shapes_and_file_round_trip() {
        let dims = [16, 12, 12, 12];
        let values = (0..dims.iter().product::<usize>())
            .map(|i| ((i * 7919) % 1013) as f32 * 0.01)
            .collect();
        let vol = FmriVolume::new(dims, values).unwrap();
        let mask = GrayMatterMask::inscribed_ellipsoid([12; 3]);
        let anchors = random_anchor_selection(&mask, 4, 5, 32, 2, 1000).unwrap();
        let rep = iterative_sampling_representation(&vol, &mask, &anchors, 7, &[4, 6], 11).unwrap();
        assert_eq!(rep.fc.shape(), &[7, 5]);
        assert_eq!(rep.positions.shape(), &[14, 3]);
        assert_eq!(rep.token_positions().shape(), &[7, 3]);

        let bytes = encode_representation(&rep, Some("anchors.json")).unwrap();
        assert_eq!(decode_representation(&bytes).unwrap(), rep);
        assert!(matches!(
            decode_representation(&bytes[..bytes.len() - 8]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(decode_representation(b"nonsense"), Err(Error::BadMagic(_))));
    }

    #[test]
    fn oversize_iteration_is_rejected() {
        let vol = constant_volume([3, 8, 8, 8], 1.0);
        let mask = GrayMatterMask::full([8; 3]);
        let anchors = random_anchor_selection(&mask, 2, 1, 1, 0, 10).unwrap();
        assert!(iterative_sampling_representation(&vol, &mask, &anchors, 2, &[4, 12], 0).is_err());
        assert!(iterative_sampling_representation(&vol, &mask, &anchors, 2, &[], 0).is_err());
    }
}
