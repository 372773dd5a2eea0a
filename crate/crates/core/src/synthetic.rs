//! Labeled synthetic cohorts with class-dependent connectivity.
//!
//! The spatial box is split into octants. Each subject draws `L` latent
//! signals (Gaussian noise smoothed by a moving average of width `T/8`,
//! standardized). Octant `r` mixes them with weights
//!
//! ```text
//! control: e_{r mod L} + jitter
//! asd:     e_{r mod L} + effect_size · e_{(r+1) mod L} + jitter
//! ```
//!
//! where `jitter` is fresh per subject. Every voxel adds white noise, and
//! voxels outside the gray-matter ellipsoid carry noise only. With
//! `effect_size = 0` both classes share one generating distribution.

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, subject_seed, SeededRng};
use crate::volume::{read_volume, write_volume, FmriVolume, GrayMatterMask};

pub const CONTROL: usize = 0;
pub const ASD: usize = 1;

const BASELINE: f64 = 100.0;
const COHORT_FORMAT: &str = "abfr-cohort-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticParams {
    pub n_subjects: usize,
    /// `(T, X, Y, Z)`
    pub dims: [usize; 4],
    pub n_latent_signals: usize,
    pub effect_size: f64,
    pub seed: u64,
    /// Fraction of subjects labeled ASD; 0.5 alternates labels.
    pub asd_fraction: f64,
    pub noise_std: f64,
    pub weight_jitter: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_subjects: 40,
            dims: [32, 16, 16, 16],
            n_latent_signals: 8,
            effect_size: 2.0,
            seed: 0,
            asd_fraction: 0.5,
            noise_std: 1.0,
            weight_jitter: 0.3,
        }
    }
}

impl SyntheticParams {
    fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::validation("a cohort needs at least 2 subjects"));
        }
        if self.dims[0] < 2 {
            return Err(Error::validation("volumes need at least 2 timepoints"));
        }
        if self.dims[0] < 16 {
            return Err(Error::validation(format!(
                "synthetic volumes need T >= 16, got {}",
                self.dims[0]
            )));
        }
        if self.dims[1..].iter().any(|&d| d < 2) {
            return Err(Error::validation(format!(
                "degenerate spatial dims {:?}",
                &self.dims[1..]
            )));
        }
        if self.n_latent_signals < 2 {
            return Err(Error::validation("need at least 2 latent signals"));
        }
        if !(self.effect_size >= 0.0 && self.effect_size.is_finite()) {
            return Err(Error::validation("effect size must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.asd_fraction) {
            return Err(Error::validation("asd_fraction must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0 && self.weight_jitter >= 0.0) {
            return Err(Error::validation("noise levels must be non-negative"));
        }
        Ok(())
    }

    /// Label of subject `i`: ASD whenever `⌊(i+1)·f⌋` steps past `⌊i·f⌋`.
    pub fn label(&self, i: usize) -> usize {
        let f = self.asd_fraction;
        if ((i + 1) as f64 * f).floor() > (i as f64 * f).floor() {
            ASD
        } else {
            CONTROL
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub volume: FmriVolume,
    pub label: usize,
}

/// Subjects sharing one gray-matter mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub params: SyntheticParams,
    pub mask: GrayMatterMask,
    pub subjects: Vec<Subject>,
}

impl SyntheticCohort {
    pub fn labels(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

pub fn generate_synthetic_cohort(params: &SyntheticParams) -> Result<SyntheticCohort> {
    params.validate()?;
    let [_, x, y, z] = params.dims;
    let mask = GrayMatterMask::inscribed_ellipsoid([x, y, z]);
    let subjects = (0..params.n_subjects)
        .map(|i| {
            let label = params.label(i);
            let mut rng = seeded(subject_seed(params.seed, i));
            let volume = generate_subject(params, &mask, label, &mut rng)?;
            Ok(Subject { volume, label })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCohort {
        params: params.clone(),
        mask,
        subjects,
    })
}

fn octant(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    usize::from(2 * x >= dims[0]) * 4 + usize::from(2 * y >= dims[1]) * 2 + usize::from(2 * z >= dims[2])
}

fn generate_subject(
    params: &SyntheticParams,
    mask: &GrayMatterMask,
    label: usize,
    rng: &mut SeededRng,
) -> Result<FmriVolume> {
    let [t_len, xd, yd, zd] = params.dims;
    let latents = params.n_latent_signals;
    let mut latent: Vec<Vec<f64>> = (0..latents).map(|_| smooth_signal(t_len, rng)).collect();
    orthonormalize(&mut latent);

    let weights: Vec<Vec<f64>> = (0..8)
        .map(|r| {
            (0..latents)
                .map(|l| {
                    let mut w = if l == r % latents { 1.0 } else { 0.0 };
                    if label == ASD && l == (r + 1) % latents {
                        w += params.effect_size;
                    }
                    let jitter: f64 = StandardNormal.sample(rng);
                    w + params.weight_jitter * jitter
                })
                .collect()
        })
        .collect();
    let region_signal: Vec<Vec<f64>> = weights
        .iter()
        .map(|w| {
            (0..t_len)
                .map(|t| w.iter().zip(&latent).map(|(wl, s)| wl * s[t]).sum())
                .collect()
        })
        .collect();

    let spatial = xd * yd * zd;
    let mut values = vec![0f32; t_len * spatial];
    let mut s = 0;
    for x in 0..xd {
        for y in 0..yd {
            for z in 0..zd {
                let signal = mask
                    .get(x, y, z)
                    .then(|| &region_signal[octant([xd, yd, zd], x, y, z)]);
                for t in 0..t_len {
                    let noise: f64 = StandardNormal.sample(rng);
                    let v = BASELINE + signal.map_or(0.0, |sig| sig[t]) + params.noise_std * noise;
                    values[t * spatial + s] = v as f32;
                }
                s += 1;
            }
        }
    }
    FmriVolume::new(params.dims, values)
}

/// Gram-Schmidt over zero-mean series, keeping unit population variance.
///
/// Independent draws of length `T` still correlate by chance (roughly
/// `±1/√(T/window)`); removing that leaves the mixing weights as the only
/// source of inter-regional correlation. Needs `T > L` to stay full rank.
fn orthonormalize(signals: &mut [Vec<f64>]) {
    let t = signals.first().map_or(0, Vec::len) as f64;
    for k in 0..signals.len() {
        for j in 0..k {
            let dot: f64 = signals[k].iter().zip(&signals[j]).map(|(a, b)| a * b).sum::<f64>() / t;
            let (head, tail) = signals.split_at_mut(k);
            tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = (signals[k].iter().map(|v| v * v).sum::<f64>() / t).sqrt();
        if norm > 1e-12 {
            signals[k].iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Standardized moving average (window `max(1, T/8)`) of white noise.
fn smooth_signal(t_len: usize, rng: &mut SeededRng) -> Vec<f64> {
    let window = (t_len / 8).max(1);
    let raw: Vec<f64> = (0..t_len + window - 1)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    let smoothed: Vec<f64> = raw
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let mean = smoothed.iter().sum::<f64>() / t_len as f64;
    let sd = (smoothed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t_len as f64).sqrt();
    smoothed.iter().map(|v| (v - mean) / sd.max(1e-12)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub format: String,
    pub generator: SyntheticParams,
    pub subjects: Vec<CohortEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    /// Relative to the manifest's directory.
    pub file: String,
    pub label: usize,
}

pub const COHORT_MANIFEST: &str = "cohort.json";

/// Writes `subject_NNN.abfr` files plus `cohort.json` into `dir`.
pub fn write_cohort(cohort: &SyntheticCohort, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(cohort.len());
    for (i, s) in cohort.subjects.iter().enumerate() {
        let file = format!("subject_{i:03}.abfr");
        write_volume(&dir.join(&file), &s.volume, &cohort.mask)?;
        entries.push(CohortEntry {
            file,
            label: s.label,
        });
    }
    let manifest = CohortManifest {
        format: COHORT_FORMAT.to_string(),
        generator: cohort.params.clone(),
        subjects: entries,
    };
    let path = dir.join(COHORT_MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a cohort from its manifest (or the directory holding `cohort.json`).
pub fn read_cohort(path: &Path) -> Result<SyntheticCohort> {
    let manifest_path = if path.is_dir() {
        path.join(COHORT_MANIFEST)
    } else {
        path.to_path_buf()
    };
    let text = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CohortManifest = serde_json::from_slice(&text)?;
    if manifest.format != COHORT_FORMAT {
        return Err(Error::BadMagic(manifest_path.display().to_string()));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut mask: Option<GrayMatterMask> = None;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let (volume, m) = read_volume(&base.join(&entry.file))?;
        match &mask {
            Some(existing) if *existing != m => {
                return Err(Error::Malformed(format!(
                    "{} has a different gray-matter mask than the rest of the cohort",
                    entry.file
                )))
            }
            Some(_) => {}
            None => mask = Some(m),
        }
        if entry.label > ASD {
            return Err(Error::Malformed(format!("label {} for {}", entry.label, entry.file)));
        }
        subjects.push(Subject {
            volume,
            label: entry.label,
        });
    }
    let mask = mask.ok_or_else(|| Error::Malformed("cohort lists no subjects".into()))?;
    Ok(SyntheticCohort {
        params: manifest.generator,
        mask,
        subjects,
    })
}
