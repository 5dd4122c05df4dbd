//! Small closed-form models for checking meta-gradients.

use crate::error::Result;
use crate::model::{Batch, Evaluation, Model, Need};
use crate::params::{ParamKind, ParamTree};
use crate::tensor::{Tape, Tensor};

/// `L(θ) = ½‖θ‖²`, independent of the data. Its Hessian is the identity.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticProbe;

impl QuadraticProbe {
    pub fn params(values: &[f64]) -> ParamTree {
        let mut t = ParamTree::new();
        t.insert(0, ParamKind::FcWeight, Tensor::new([values.len()], values.to_vec()).expect("1-d"))
            .expect("fresh tree");
        t
    }
}

impl Model for QuadraticProbe {
    fn evaluate(&self, params: &ParamTree, batch: &Batch, need: Need) -> Result<Evaluation> {
        Ok(Evaluation {
            loss: 0.5 * params.dot(params),
            logits: Tensor::zeros([batch.len(), 2]),
            grads: need.grads.then(|| params.clone()),
            activations: Vec::new(),
        })
    }
}

/// `3 → tanh(8) → 2` classifier with 50 parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct TinyMlp;

impl TinyMlp {
    pub const INPUTS: usize = 3;
    pub const HIDDEN: usize = 8;
    pub const CLASSES: usize = 2;

    pub fn params(seed: u64) -> ParamTree {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::seed::rng(seed, &[crate::seed::stream::INIT]);
        let mut draw = |shape: &[usize], scale: f64| {
            Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
        };
        let mut t = ParamTree::new();
        let (i, h, o) = (Self::INPUTS, Self::HIDDEN, Self::CLASSES);
        t.insert(0, ParamKind::FcWeight, draw(&[h, i], 0.8)).unwrap();
        t.insert(0, ParamKind::FcBias, draw(&[h], 0.3)).unwrap();
        t.insert(1, ParamKind::FcWeight, draw(&[o, h], 0.8)).unwrap();
        t.insert(1, ParamKind::FcBias, draw(&[o], 0.3)).unwrap();
        t
    }

    /// `n` random points with random binary labels.
    pub fn batch(seed: u64, n: usize) -> Batch {
        use rand::Rng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = crate::seed::rng(seed, &[crate::seed::stream::SAMPLE]);
        let images = Tensor::from_fn([n, Self::INPUTS], |_| StandardNormal.sample(&mut rng));
        let labels = (0..n).map(|_| rng.random_range(0..Self::CLASSES)).collect();
        Batch { images, labels }
    }
}

/// Dense Hessian of the loss by central differences of the analytic
/// gradient, one coordinate at a time, symmetrized.
pub fn dense_hessian(model: &dyn Model, theta: &ParamTree, batch: &Batch, step: f64) -> Result<Vec<Vec<f64>>> {
    let base = theta.to_flat();
    let n = base.len();
    let grad_at = |flat: &[f64]| -> Result<Vec<f64>> {
        let mut p = theta.clone();
        p.set_flat(flat)?;
        Ok(model
            .evaluate(&p, batch, Need::GRADS)?
            .grads
            .expect("gradients requested")
            .to_flat())
    };
    let mut h = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut x = base.clone();
        x[j] = base[j] + step;
        let plus = grad_at(&x)?;
        x[j] = base[j] - step;
        let minus = grad_at(&x)?;
        for i in 0..n {
            h[i][j] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (h[i][j] + h[j][i]);
            h[i][j] = m;
            h[j][i] = m;
        }
    }
    Ok(h)
}

impl Model for TinyMlp {
    fn evaluate(&self, params: &ParamTree, batch: &Batch, need: Need) -> Result<Evaluation> {
        let tape = Tape::new();
        let vars = params.to_tape(&tape);
        let x = tape.leaf(batch.images.clone());
        let h = x
            .linear(&vars.get(0, ParamKind::FcWeight)?, &vars.get(0, ParamKind::FcBias)?)?
            .tanh();
        let logits = h.linear(&vars.get(1, ParamKind::FcWeight)?, &vars.get(1, ParamKind::FcBias)?)?;
        let loss = logits.softmax_cross_entropy(&batch.labels)?;
        let grads = if need.grads {
            tape.backward(loss)?;
            Some(vars.grads(&tape, params))
        } else {
            None
        };
        Ok(Evaluation {
            loss: loss.value().item().expect("scalar"),
            logits: (*logits.value()).clone(),
            grads,
            activations: Vec::new(),
        })
    }
}
