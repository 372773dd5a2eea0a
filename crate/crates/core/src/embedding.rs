//! Fusing function descriptions (FC rows) with position descriptions into tokens.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::FunctionRepresentation;
use crate::layers::Linear;
use crate::params::{Bindings, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// `token = fc·W_fc + b + pos·W_pos`
    #[default]
    Sum,
    /// `token = [fc·W_fc + b | pos·W_pos]`, the position part taking `d/2` columns.
    Concat,
}

/// Embedded tokens of one subject, `N × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub d_model: usize,
}

/// Learnable projections `A → d` (affine) and `3 → d` (linear, no bias).
#[derive(Debug, Clone)]
pub struct TokenEmbedding {
    pub fusion: Fusion,
    pub d_model: usize,
    pub proj_fc: Linear,
    pub proj_pos: Linear,
}

impl TokenEmbedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        n_anchors: usize,
        d_model: usize,
        fusion: Fusion,
    ) -> Result<Self> {
        if n_anchors == 0 || d_model == 0 {
            return Err(Error::validation("embedding widths must be positive"));
        }
        let (fc_width, pos_width) = match fusion {
            Fusion::Sum => (d_model, d_model),
            Fusion::Concat => {
                if d_model < 2 {
                    return Err(Error::validation("concat fusion needs d_model >= 2"));
                }
                (d_model - d_model / 2, d_model / 2)
            }
        };
        Ok(Self {
            fusion,
            d_model,
            proj_fc: Linear::new(store, rng, "embed.fc", n_anchors, fc_width, true),
            proj_pos: Linear::new(store, rng, "embed.pos", 3, pos_width, false),
        })
    }

    pub fn n_anchors(&self) -> usize {
        self.proj_fc.in_dim
    }

    /// `fc: N × A`, `positions: N × 3` → `N × d_model`.
    pub fn forward(&self, tape: &Tape, params: &Bindings, fc: Var, positions: Var) -> Result<Var> {
        let fc_shape = tape.shape(fc);
        if fc_shape.len() != 2 || fc_shape[1] != self.n_anchors() {
            return Err(Error::Shape {
                op: "embed_tokens",
                lhs: fc_shape,
                rhs: vec![self.n_anchors(), self.d_model],
            });
        }
        let pos_shape = tape.shape(positions);
        if pos_shape != [fc_shape[0], 3] {
            return Err(Error::Shape {
                op: "embed_tokens",
                lhs: fc_shape,
                rhs: pos_shape,
            });
        }
        let f = self.proj_fc.forward(tape, params, fc)?;
        let p = self.proj_pos.forward(tape, params, positions)?;
        match self.fusion {
            Fusion::Sum => tape.add(f, p),
            Fusion::Concat => tape.concat_cols(&[f, p]),
        }
    }

    /// Token sequence of one representation, without gradient tracking.
    pub fn embed(&self, store: &ParamStore, rep: &FunctionRepresentation) -> Result<TokenSequence> {
        let tape = Tape::new();
        let params = store.bind(&tape);
        let fc = tape.constant(rep.fc.clone());
        let pos = tape.constant(rep.token_positions());
        let out = self.forward(&tape, &params, fc, pos)?;
        Ok(TokenSequence {
            tokens: tape.value(out),
            d_model: self.d_model,
        })
    }
}
