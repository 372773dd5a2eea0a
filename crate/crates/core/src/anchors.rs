//! Anchor patch placement: a fixed grid, or randomized starts validated
//! against the gray-matter mask.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, SeededRng};
use crate::volume::{GrayMatterMask, SpatialDims};

pub const DEFAULT_MAX_ATTEMPTS: usize = 1000;

/// A cube of edge `size` whose lowest corner is `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchSpec {
    pub start: [usize; 3],
    pub size: usize,
}

impl PatchSpec {
    pub fn fits(&self, dims: SpatialDims) -> bool {
        self.size > 0 && (0..3).all(|a| self.start[a] + self.size <= dims[a])
    }

    /// Geometric centre in voxel coordinates.
    pub fn center(&self) -> [f64; 3] {
        self.start.map(|s| s as f64 + self.size as f64 / 2.0)
    }

    /// Linear spatial indices of every voxel in the cube.
    pub fn voxels(&self, dims: SpatialDims) -> impl Iterator<Item = usize> + '_ {
        let [sx, sy, sz] = self.start;
        let p = self.size;
        (sx..sx + p).flat_map(move |x| {
            (sy..sy + p).flat_map(move |y| (sz..sz + p).map(move |z| (x * dims[1] + y) * dims[2] + z))
        })
    }
}

/// `⌈p³ / 2⌉`.
pub fn default_tau(patch_size: usize) -> usize {
    patch_size.pow(3).div_ceil(2)
}

/// Number of mask-positive voxels inside the patch cube.
pub fn patch_overlap(patch: &PatchSpec, mask: &GrayMatterMask) -> Result<usize> {
    if !patch.fits(mask.dims()) {
        return Err(Error::validation(format!(
            "patch {patch:?} does not fit inside {:?}",
            mask.dims()
        )));
    }
    let values = mask.values();
    Ok(patch.voxels(mask.dims()).filter(|&i| values[i]).count())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnchorMethod {
    Grid { stride: [usize; 3], offset: [usize; 3] },
    Random { seed: u64, max_attempts: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub method: AnchorMethod,
    pub tau: usize,
    pub patch_size: usize,
    pub dims: SpatialDims,
    pub anchors: Vec<PatchSpec>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let set: Self = serde_json::from_slice(&text)?;
        if let Some(bad) = set.anchors.iter().find(|a| !a.fits(set.dims)) {
            return Err(Error::Malformed(format!(
                "anchor {bad:?} lies outside {:?}",
                set.dims
            )));
        }
        Ok(set)
    }
}

fn check_patch_size(mask: &GrayMatterMask, patch_size: usize) -> Result<()> {
    let dims = mask.dims();
    if patch_size == 0 || dims.iter().any(|&d| patch_size > d) {
        return Err(Error::validation(format!(
            "patch size {patch_size} does not fit spatial dims {dims:?}"
        )));
    }
    Ok(())
}

/// Anchors at `bbox_min + offset + k·stride` on every axis, wherever the
/// cube stays inside the mask's bounding box, in lexicographic (x, y, z)
/// order. Positions with overlap below `tau` are dropped; `tau = 0` keeps them all.
pub fn grid_anchor_selection(
    mask: &GrayMatterMask,
    patch_size: usize,
    stride: [usize; 3],
    offset: [usize; 3],
    tau: usize,
) -> Result<AnchorSet> {
    check_patch_size(mask, patch_size)?;
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::validation("grid stride must be at least 1"));
    }
    if (0..3).any(|a| offset[a] >= stride[a]) {
        return Err(Error::validation(format!(
            "grid offset {offset:?} must be smaller than stride {stride:?}"
        )));
    }
    let (lo, hi) = mask
        .bounding_box()
        .ok_or_else(|| Error::validation("gray-matter mask is empty"))?;
    let axis = |a: usize| -> Vec<usize> {
        (0..)
            .map(|k| lo[a] + offset[a] + k * stride[a])
            .take_while(|&s| s + patch_size <= hi[a])
            .collect()
    };
    let (xs, ys, zs) = (axis(0), axis(1), axis(2));
    let mut anchors = Vec::new();
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                let spec = PatchSpec {
                    start: [x, y, z],
                    size: patch_size,
                };
                if tau == 0 || patch_overlap(&spec, mask)? >= tau {
                    anchors.push(spec);
                }
            }
        }
    }
    if anchors.is_empty() {
        return Err(Error::validation(format!(
            "no grid anchor of size {patch_size} fits the mask's bounding box with tau {tau}"
        )));
    }
    Ok(AnchorSet {
        method: AnchorMethod::Grid { stride, offset },
        tau,
        patch_size,
        dims: mask.dims(),
        anchors,
    })
}

/// Inclusive per-axis range of admissible starts: `[min, max − p]` over the
/// half-open bounding box, clamped so the cube stays inside the volume.
pub fn start_ranges(mask: &GrayMatterMask, patch_size: usize) -> Option<[(usize, usize); 3]> {
    let (lo, hi) = mask.bounding_box()?;
    let dims = mask.dims();
    Some(std::array::from_fn(|a| {
        let last = dims[a] - patch_size;
        let min = lo[a].min(last);
        let max = hi[a].saturating_sub(patch_size).clamp(min, last);
        (min, max)
    }))
}

/// Draws one candidate start: x, then y, then z, each uniform over its
/// inclusive range.
pub fn draw_start(rng: &mut SeededRng, ranges: &[(usize, usize); 3]) -> [usize; 3] {
    let x = rng.random_range(ranges[0].0..=ranges[0].1);
    let y = rng.random_range(ranges[1].0..=ranges[1].1);
    let z = rng.random_range(ranges[2].0..=ranges[2].1);
    [x, y, z]
}

/// Randomized anchors: each start is drawn uniformly within the mask's
/// bounding box and redrawn until its overlap reaches `tau`.
///
/// Draw order is fixed: anchors in sequence, attempts in sequence, and
/// within an attempt the x, y, z coordinates (see [`draw_start`]).
pub fn random_anchor_selection(
    mask: &GrayMatterMask,
    patch_size: usize,
    n_anchors: usize,
    tau: usize,
    seed: u64,
    max_attempts: usize,
) -> Result<AnchorSet> {
    check_patch_size(mask, patch_size)?;
    if n_anchors == 0 {
        return Err(Error::validation("need at least one anchor"));
    }
    if tau > patch_size.pow(3) {
        return Err(Error::validation(format!(
            "tau {tau} exceeds the patch volume {}",
            patch_size.pow(3)
        )));
    }
    let no_placement = |achieved| Error::NoValidPlacement {
        requested: n_anchors,
        achieved,
        attempts: max_attempts,
    };
    let ranges = start_ranges(mask, patch_size).ok_or_else(|| no_placement(0))?;
    let mut rng = seeded(seed);
    let mut anchors = Vec::with_capacity(n_anchors);
    while anchors.len() < n_anchors {
        let mut placed = false;
        for _ in 0..max_attempts {
            let spec = PatchSpec {
                start: draw_start(&mut rng, &ranges),
                size: patch_size,
            };
            if patch_overlap(&spec, mask)? >= tau {
                anchors.push(spec);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(no_placement(anchors.len()));
        }
    }
    Ok(AnchorSet {
        method: AnchorMethod::Random { seed, max_attempts },
        tau,
        patch_size,
        dims: mask.dims(),
        anchors,
    })
}
