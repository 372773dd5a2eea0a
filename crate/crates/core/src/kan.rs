//! Kolmogorov-Arnold layers with a reflectional switch basis.
//!
//! Every edge `i → j` carries a learnable univariate function
//!
//! ```text
//! φ_{j,i}(x) = w_b[j,i]·silu(x) + Σ_k c[j,i,k]·b_k(x),   b_k(x) = 1 − tanh²((x − g_k)/h)
//! ```
//!
//! and node `j` sums its incoming edges. The knots `g_k` form one uniform grid
//! shared by all edges; `h` is half the knot spacing.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_GRID_SIZE: usize = 8;
pub const DEFAULT_GRID_RANGE: f64 = 2.0;
pub const DEFAULT_DROP_PATH_RATE: f64 = 0.1;
const COEFF_INIT_STD: f64 = 0.1;

/// Reflectional switch basis centred on `knot`; even about the knot, peak 1.
pub fn rswaf_basis(x: f64, knot: f64, width: f64) -> f64 {
    let t = ((x - knot) / width).tanh();
    1.0 - t * t
}

/// `d/dx` of [`rswaf_basis`].
pub fn rswaf_basis_derivative(x: f64, knot: f64, width: f64) -> f64 {
    let t = ((x - knot) / width).tanh();
    -2.0 * t * (1.0 - t * t) / width
}

/// `G` knots evenly spaced over `[-range, range]`.
pub fn uniform_grid(size: usize, range: f64) -> Vec<f64> {
    match size {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..size)
            .map(|k| -range + 2.0 * range * k as f64 / (size - 1) as f64)
            .collect(),
    }
}

/// Basis evaluations laid out `[x_0: b_0..b_G, x_1: b_0..b_G, ...]`.
pub(crate) fn basis_matrix(x: &[f64], grid: &[f64], width: f64) -> Vec<f64> {
    x.iter()
        .flat_map(|&v| grid.iter().map(move |&g| rswaf_basis(v, g, width)))
        .collect()
}

pub(crate) fn basis_derivative_matrix(x: &[f64], grid: &[f64], width: f64) -> Vec<f64> {
    x.iter()
        .flat_map(|&v| grid.iter().map(move |&g| rswaf_basis_derivative(v, g, width)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KanSettings {
    pub grid_size: usize,
    pub grid_range: f64,
    /// Include the `w_b·silu(x)` residual path on every edge.
    pub base_path: bool,
}

impl Default for KanSettings {
    fn default() -> Self {
        Self {
            grid_size: DEFAULT_GRID_SIZE,
            grid_range: DEFAULT_GRID_RANGE,
            base_path: true,
        }
    }
}

/// One layer of KAN edges (`in_dim × out_dim` learnable functions).
#[derive(Debug, Clone)]
pub struct RswafEdgeBank {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: Vec<f64>,
    pub width: f64,
    /// `out_dim × in_dim × G`
    pub coeffs: ParamId,
    /// `out_dim × in_dim`
    pub base_weight: Option<ParamId>,
}

impl RswafEdgeBank {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        settings: &KanSettings,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::validation("KAN layer widths must be positive"));
        }
        if settings.grid_size < 2 || !(settings.grid_range > 0.0) {
            return Err(Error::validation(
                "KAN grid needs at least 2 knots over a positive range",
            ));
        }
        let grid = uniform_grid(settings.grid_size, settings.grid_range);
        let width = 0.5 * (grid[1] - grid[0]);
        let g = grid.len();

        let normal = Normal::new(0.0, COEFF_INIT_STD).expect("valid std");
        let coeffs: Vec<f64> = (0..out_dim * in_dim * g).map(|_| normal.sample(rng)).collect();
        let coeffs = store.add(
            format!("{name}.coeffs"),
            Tensor::new(vec![out_dim, in_dim, g], coeffs)?,
        );
        let base_weight = if settings.base_path {
            let bound = 1.0 / (in_dim as f64).sqrt();
            let uni = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
            let w: Vec<f64> = (0..out_dim * in_dim).map(|_| uni.sample(rng)).collect();
            Some(store.add(
                format!("{name}.base_weight"),
                Tensor::new(vec![out_dim, in_dim], w)?,
            ))
        } else {
            None
        };
        Ok(Self {
            in_dim,
            out_dim,
            grid,
            width,
            coeffs,
            base_weight,
        })
    }

    pub fn parameter_count(&self) -> usize {
        let base = if self.base_weight.is_some() { 1 } else { 0 };
        self.out_dim * self.in_dim * (self.grid.len() + base)
    }

    /// `x: batch × in_dim → batch × out_dim`.
    pub fn forward(&self, tape: &Tape, params: &Bindings, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Shape {
                op: "kan_layer_forward",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        tape.kan_layer(
            x,
            params[self.coeffs],
            self.base_weight.map(|id| params[id]),
            &self.grid,
            self.width,
        )
    }
}

/// Stochastic depth applied to a residual branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropPath {
    rate: f64,
}

impl DropPath {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::validation(format!(
                "drop-path rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(Self { rate })
    }

    /// Drops every branch in training mode. Only for exercising the pure-residual path.
    #[doc(hidden)]
    pub fn always_drop() -> Self {
        Self { rate: 1.0 }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Per-sample keep factors: `1/(1-rate)` with probability `1-rate`, else 0.
    pub fn sample_factors(&self, samples: usize, rng: &mut SeededRng) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..samples)
            .map(|_| {
                if keep > 0.0 && rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// `branch` holds `samples` equally sized row blocks, one per sample.
    /// Eval mode (or rate 0) is the identity and consumes no randomness.
    pub fn apply(
        &self,
        tape: &Tape,
        branch: Var,
        samples: usize,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        if !training || self.rate == 0.0 {
            return Ok(branch);
        }
        let rows = tape.shape(branch)[0];
        if samples == 0 || rows % samples != 0 {
            return Err(Error::validation(format!(
                "{rows} rows do not split into {samples} samples"
            )));
        }
        let per = rows / samples;
        let factors = self
            .sample_factors(samples, rng)
            .into_iter()
            .flat_map(|f| std::iter::repeat_n(f, per))
            .collect();
        tape.scale_rows(branch, factors)
    }
}

/// Pre-norm residual block whose feed-forward is a stack of KAN layers.
#[derive(Debug, Clone)]
pub struct KanBlock {
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub layers: Vec<RswafEdgeBank>,
    pub drop_path: DropPath,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl KanBlock {
    /// `widths` lists every layer boundary, e.g. `[d, d]` or `[d, 2d, d]`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        widths: &[usize],
        settings: &KanSettings,
        drop_path_rate: f64,
    ) -> Result<Self> {
        if widths.len() < 2 || widths[0] != *widths.last().expect("nonempty") {
            return Err(Error::validation(
                "KAN block widths must start and end at the token width",
            ));
        }
        let d = widths[0];
        let norm_gain = store.add(format!("{name}.norm.gain"), Tensor::full(&[d], 1.0));
        let norm_bias = store.add(format!("{name}.norm.bias"), Tensor::zeros(&[d]));
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                RswafEdgeBank::new(store, rng, &format!("{name}.kan{i}"), w[0], w[1], settings)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            norm_gain,
            norm_bias,
            layers,
            drop_path: DropPath::new(drop_path_rate)?,
        })
    }

    pub fn width(&self) -> usize {
        self.layers[0].in_dim
    }

    /// The residual branch `kan(layer_norm(tokens))` without the skip connection.
    pub fn branch(&self, tape: &Tape, params: &Bindings, tokens: Var) -> Result<Var> {
        let mut h = tape.layer_norm(
            tokens,
            params[self.norm_gain],
            params[self.norm_bias],
            LAYER_NORM_EPS,
        )?;
        for layer in &self.layers {
            h = layer.forward(tape, params, h)?;
        }
        Ok(h)
    }

    /// `tokens + drop_path(kan(layer_norm(tokens)))`, applied tokenwise.
    pub fn forward(
        &self,
        tape: &Tape,
        params: &Bindings,
        tokens: Var,
        samples: usize,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let shape = tape.shape(tokens);
        if shape.len() != 2 || shape[1] != self.width() {
            return Err(Error::Shape {
                op: "kan_block_forward",
                lhs: shape,
                rhs: vec![self.width()],
            });
        }
        let branch = self.branch(tape, params, tokens)?;
        let branch = self.drop_path.apply(tape, branch, samples, training, rng)?;
        tape.add(tokens, branch)
    }
}

/// Classification head: KAN layers ending in two logits.
#[derive(Debug, Clone)]
pub struct KanHead {
    pub layers: Vec<RswafEdgeBank>,
}

impl KanHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        widths: &[usize],
        settings: &KanSettings,
    ) -> Result<Self> {
        if widths.len() < 2 || *widths.last().expect("nonempty") != 2 {
            return Err(Error::validation("KAN head must end in 2 outputs"));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                RswafEdgeBank::new(store, rng, &format!("{name}.kan{i}"), w[0], w[1], settings)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// `class_tokens: batch × d → batch × 2`.
    pub fn forward(&self, tape: &Tape, params: &Bindings, class_tokens: Var) -> Result<Var> {
        let mut h = class_tokens;
        for layer in &self.layers {
            h = layer.forward(tape, params, h)?;
        }
        Ok(h)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(RswafEdgeBank::parameter_count).sum()
    }
}
