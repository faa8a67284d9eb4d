//! Dense reverse-mode differentiation, recurrent encoders, and optimization.

mod adam;
pub mod gradcheck;
mod graph;
mod lstm;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Graph, Var, PROB_CLAMP};
pub use lstm::{BiLstm, CellState, LstmCarry, LstmDirection, ProjectionCache, FORGET_BIAS};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tensor::{argmax, dot, log_softmax, sigmoid, softmax, Tensor};

use rand::Rng;

/// Hidden width of every LSTM direction.
pub const HIDDEN: usize = 64;
/// Gradients are rescaled to this global L2 norm before each optimizer step.
pub const CLIP_NORM: f64 = 5.0;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("non-finite value produced by {op}")]
    NumericalFault { op: &'static str },
    #[error("cannot encode an empty sequence")]
    EmptySequence,
    #[error("backward already ran on this graph; call zero_grad first")]
    BackwardTwice,
    #[error("backward root must be scalar, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("unknown parameter {0}")]
    MissingParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Weight and bias of an affine layer `y = W·x + b`, `W: d_out × d_in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register<R: Rng>(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{prefix}.w"), d_out, d_in, d_in, rng);
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(1, d_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, NnError> {
        g.linear(x, self.w, self.b)
    }

    pub fn forward_plain(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.value(self.w);
        let b = store.value(self.b).data();
        let k = w.cols();
        (0..w.rows()).map(|j| tensor::dot(x, &w.data()[j * k..(j + 1) * k]) + b[j]).collect()
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.w).cols()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.w).rows()
    }
}
