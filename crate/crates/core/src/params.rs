//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint is a pair of files: `<stem>.json` lists every parameter's
//! name, shape and offset, and `<stem>.bin` holds the values as consecutive
//! little-endian `f64`s in manifest order.

use std::fs;
use std::ops::Index;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Tape leaves for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Var>);

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let n = value.len();
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: vec![0.0; n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bindings {
        Bindings(
            self.params
                .iter()
                .map(|p| tape.param(p.value.clone()))
                .collect(),
        )
    }

    /// Adds the tape's leaf gradients into the stored gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape, bindings: &Bindings) {
        for (p, &var) in self.params.iter_mut().zip(&bindings.0) {
            if let Some(g) = tape.grad(var) {
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Every value, in registration order, as raw bytes. Used for bitwise comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn save_checkpoint(&self, stem: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for p in &self.params {
            entries.push(CheckpointEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += p.value.len();
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            dtype: "f64-le".to_string(),
            total_scalars: offset,
            entries,
        };
        let (json_path, bin_path) = checkpoint_paths(stem);
        fs::write(&json_path, serde_json::to_vec_pretty(&manifest)?)
            .map_err(|e| Error::io(&json_path, e))?;
        fs::write(&bin_path, self.to_le_bytes()).map_err(|e| Error::io(&bin_path, e))?;
        Ok(())
    }

    /// Overwrites parameter values from a checkpoint with matching names and shapes.
    pub fn load_checkpoint(&mut self, stem: &Path) -> Result<()> {
        let (json_path, bin_path) = checkpoint_paths(stem);
        let text = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::BadMagic(json_path.display().to_string()));
        }
        let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let expected = manifest.total_scalars * 8;
        if blob.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: blob.len(),
            });
        }
        if manifest.entries.len() != self.params.len() {
            return Err(Error::Malformed(format!(
                "checkpoint has {} parameters, model has {}",
                manifest.entries.len(),
                self.params.len()
            )));
        }
        for (p, e) in self.params.iter_mut().zip(&manifest.entries) {
            if p.name != e.name || p.value.shape() != e.shape.as_slice() {
                return Err(Error::Malformed(format!(
                    "parameter {} {:?} does not match checkpoint entry {} {:?}",
                    p.name,
                    p.value.shape(),
                    e.name,
                    e.shape
                )));
            }
            let n = p.value.len();
            let end = e.offset + n;
            if end > manifest.total_scalars {
                return Err(Error::Truncated {
                    expected: end * 8,
                    found: blob.len(),
                });
            }
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                let at = (e.offset + i) * 8;
                *v = f64::from_le_bytes(blob[at..at + 8].try_into().expect("8 bytes"));
            }
        }
        Ok(())
    }
}

const CHECKPOINT_FORMAT: &str = "abfr-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    dtype: String,
    total_scalars: usize,
    entries: Vec<CheckpointEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}
