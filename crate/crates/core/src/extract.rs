//! Cohort-wide feature extraction and the on-disk feature cache.
//!
//! Anchors are selected once on the cohort's shared mask; each subject then
//! gets its own representation, seeded by its index.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::{
    default_tau, grid_anchor_selection, random_anchor_selection, AnchorSet, DEFAULT_MAX_ATTEMPTS,
};
use crate::error::{Error, Result};
use crate::features::{
    iterative_sampling_representation, random_sampling_representation, read_representation,
    write_representation, DEFAULT_PATCHES_PER_ITERATION, DEFAULT_PATCH_SIZES,
};
use crate::rng::{stream_seed, subject_seed};
use crate::train::Dataset;
use crate::volume::{FmriVolume, GrayMatterMask};

const FEATURES_FORMAT: &str = "abfr-features-v1";
pub const FEATURES_MANIFEST: &str = "features.json";
pub const ANCHORS_FILE: &str = "anchors.json";
const ANCHOR_STREAM: u64 = 0xA;
const PATCH_STREAM: u64 = 0xB;

/// Anchor selection method, as named in result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Grid,
    Random,
}

/// Patch sampling method, as named in result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Patching {
    Random,
    Iterative,
}

macro_rules! lowercase_names {
    ($ty:ty { $($variant:ident => $name:literal),+ }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $name),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok(Self::$variant),)+
                    _ => Err(Error::validation(format!("unknown {} '{s}'", stringify!($ty).to_lowercase()))),
                }
            }
        }
    };
}

lowercase_names!(Sampling { Grid => "grid", Random => "random" });
lowercase_names!(Patching { Random => "random", Iterative => "iterative" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionSpec {
    pub sampling: Sampling,
    pub patching: Patching,
    /// Random selection only.
    pub n_anchors: usize,
    pub anchor_patch_size: usize,
    /// Grid selection; defaults to half the anchor size.
    pub grid_stride: Option<[usize; 3]>,
    /// Defaults to `⌈p³/2⌉`.
    pub tau: Option<usize>,
    /// Random patching uses the first size; iterative uses all, in order.
    pub patch_sizes: Vec<usize>,
    pub n_patches: usize,
    pub seed: u64,
}

impl Default for ExtractionSpec {
    fn default() -> Self {
        Self {
            sampling: Sampling::Random,
            patching: Patching::Iterative,
            n_anchors: 16,
            anchor_patch_size: 8,
            grid_stride: None,
            tau: None,
            patch_sizes: DEFAULT_PATCH_SIZES.to_vec(),
            n_patches: DEFAULT_PATCHES_PER_ITERATION,
            seed: 0,
        }
    }
}

impl ExtractionSpec {
    pub fn tau(&self) -> usize {
        self.tau.unwrap_or_else(|| default_tau(self.anchor_patch_size))
    }

    pub fn stride(&self) -> [usize; 3] {
        self.grid_stride
            .unwrap_or([self.anchor_patch_size.div_ceil(2).max(1); 3])
    }

    pub fn anchor_seed(&self) -> u64 {
        stream_seed(self.seed, ANCHOR_STREAM)
    }

    /// Patch seed of subject `i`.
    pub fn subject_patch_seed(&self, i: usize) -> u64 {
        subject_seed(stream_seed(self.seed, PATCH_STREAM), i)
    }

    pub fn select_anchors(&self, mask: &GrayMatterMask) -> Result<AnchorSet> {
        match self.sampling {
            Sampling::Grid => grid_anchor_selection(
                mask,
                self.anchor_patch_size,
                self.stride(),
                [0; 3],
                self.tau(),
            ),
            Sampling::Random => random_anchor_selection(
                mask,
                self.anchor_patch_size,
                self.n_anchors,
                self.tau(),
                self.anchor_seed(),
                DEFAULT_MAX_ATTEMPTS,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub anchors: AnchorSet,
    pub dataset: Dataset,
}

/// Representations for every subject, computed in parallel.
pub fn extract_features(
    volumes: &[&FmriVolume],
    mask: &GrayMatterMask,
    labels: &[usize],
    spec: &ExtractionSpec,
) -> Result<Extracted> {
    if spec.patch_sizes.is_empty() {
        return Err(Error::validation("need at least one patch size"));
    }
    let anchors = spec.select_anchors(mask)?;
    let reps = volumes
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let seed = spec.subject_patch_seed(i);
            match spec.patching {
                Patching::Random => random_sampling_representation(
                    v,
                    mask,
                    &anchors,
                    spec.n_patches,
                    spec.patch_sizes[0],
                    seed,
                ),
                Patching::Iterative => iterative_sampling_representation(
                    v,
                    mask,
                    &anchors,
                    spec.n_patches,
                    &spec.patch_sizes,
                    seed,
                ),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Extracted {
        anchors,
        dataset: Dataset::new(reps, labels.to_vec())?,
    })
}

pub fn extract_cohort(cohort: &crate::synthetic::SyntheticCohort, spec: &ExtractionSpec) -> Result<Extracted> {
    let volumes: Vec<&FmriVolume> = cohort.subjects.iter().map(|s| &s.volume).collect();
    extract_features(&volumes, &cohort.mask, &cohort.labels(), spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub file: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesManifest {
    pub format: String,
    pub spec: ExtractionSpec,
    pub anchors_file: String,
    /// Where the volumes came from, if known.
    pub cohort: Option<String>,
    pub subjects: Vec<FeatureEntry>,
}

/// Writes `anchors.json`, `subject_NNN.frep` and `features.json` into `dir`.
pub fn write_features(
    dir: &Path,
    extracted: &Extracted,
    spec: &ExtractionSpec,
    cohort: Option<&str>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    extracted.anchors.save(&dir.join(ANCHORS_FILE))?;
    let mut subjects = Vec::with_capacity(extracted.dataset.len());
    for (i, (rep, &label)) in extracted
        .dataset
        .reps
        .iter()
        .zip(&extracted.dataset.labels)
        .enumerate()
    {
        let file = format!("subject_{i:03}.frep");
        write_representation(&dir.join(&file), rep, Some(ANCHORS_FILE))?;
        subjects.push(FeatureEntry { file, label });
    }
    let manifest = FeaturesManifest {
        format: FEATURES_FORMAT.into(),
        spec: spec.clone(),
        anchors_file: ANCHORS_FILE.into(),
        cohort: cohort.map(str::to_string),
        subjects,
    };
    let path = dir.join(FEATURES_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub manifest: FeaturesManifest,
    pub anchors: AnchorSet,
    pub dataset: Dataset,
}

/// Reads a feature cache from its manifest or the directory holding it.
pub fn read_features(path: &Path) -> Result<FeatureSet> {
    let manifest_path = if path.is_dir() {
        path.join(FEATURES_MANIFEST)
    } else {
        path.to_path_buf()
    };
    let text = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: FeaturesManifest = serde_json::from_slice(&text)?;
    if manifest.format != FEATURES_FORMAT {
        return Err(Error::BadMagic(manifest_path.display().to_string()));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let anchors = AnchorSet::load(&base.join(&manifest.anchors_file))?;
    let reps = manifest
        .subjects
        .iter()
        .map(|e| read_representation(&base.join(&e.file)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(r) = reps.iter().find(|r| r.n_anchors() != anchors.len()) {
        return Err(Error::Malformed(format!(
            "representation has {} anchor columns but the anchor set has {}",
            r.n_anchors(),
            anchors.len()
        )));
    }
    let labels = manifest.subjects.iter().map(|e| e.label).collect();
    Ok(FeatureSet {
        anchors,
        dataset: Dataset::new(reps, labels)?,
        manifest,
    })
}
