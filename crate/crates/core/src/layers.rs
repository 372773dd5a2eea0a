//! Affine and normalization layers shared by the embedding and encoder.

use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::kan::LAYER_NORM_EPS;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// `y = x·W (+ b)` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let uni = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let w: Vec<f64> = (0..in_dim * out_dim).map(|_| uni.sample(rng)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(vec![in_dim, out_dim], w).expect("in×out"),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn forward(&self, tape: &Tape, params: &Bindings, x: Var) -> Result<Var> {
        let y = tape.matmul(x, params[self.weight])?;
        match self.bias {
            Some(b) => tape.add_row_bias(y, params[b]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &Tape, params: &Bindings, x: Var) -> Result<Var> {
        tape.layer_norm(x, params[self.gain], params[self.bias], LAYER_NORM_EPS)
    }
}
