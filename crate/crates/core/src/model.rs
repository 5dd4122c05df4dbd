//! The interface meta-learning procedures use to talk to a network.

use crate::error::Result;
use crate::params::ParamTree;
use crate::tensor::Tensor;

/// A labelled batch of images `[B, C, H, W]` (or feature rows `[B, D]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// What [`Model::evaluate`] should compute besides the loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Need {
    pub grads: bool,
    pub activations: bool,
}

impl Need {
    pub const LOSS: Need = Need {
        grads: false,
        activations: false,
    };
    pub const GRADS: Need = Need {
        grads: true,
        activations: false,
    };
}

/// Result of one forward (and optionally backward) pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub logits: Tensor,
    pub grads: Option<ParamTree>,
    /// Post-block activations `[B, C, H, W]` of each routed layer.
    pub activations: Vec<Tensor>,
}

impl Evaluation {
    /// Fraction of rows whose argmax logit equals the label.
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let classes = self.logits.shape()[1];
        let correct = self
            .logits
            .data()
            .chunks_exact(classes)
            .zip(labels)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        correct as f64 / labels.len() as f64
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// A differentiable classifier over a [`ParamTree`].
pub trait Model: Sync {
    fn evaluate(&self, params: &ParamTree, batch: &Batch, need: Need) -> Result<Evaluation>;
}
