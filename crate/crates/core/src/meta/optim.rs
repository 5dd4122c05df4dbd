//! Outer-loop optimizers.

use crate::backbone::text_enum;
use crate::error::{Error, Result};
use crate::params::ParamTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

text_enum!(OptimizerKind { Sgd => "sgd", Adam => "adam" });

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Plain gradient descent or Adam over a flattened [`ParamTree`].
///
/// Elements whose update flag is false are left untouched, moments included,
/// so a frozen filter does not drift on stale momentum.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, adam: None }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one descent step to `params` along `grad`.
    pub fn step(&mut self, params: &mut ParamTree, grad: &ParamTree, update: Option<&[Vec<bool>]>) -> Result<()> {
        if !params.same_layout(grad) {
            return Err(Error::Config("gradient layout differs from parameters".into()));
        }
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, (p, g)) in params.entries_mut().iter_mut().zip(grad.entries()).enumerate() {
                    let flags = update.map(|u| &u[i]);
                    for (k, (pv, gv)) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()).enumerate() {
                        if flags.is_none_or(|f| f[k]) {
                            *pv -= lr * gv;
                        }
                    }
                }
            }
            OptimizerKind::Adam => {
                let n = params.num_params();
                let state = self.adam.get_or_insert_with(|| AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                });
                state.t += 1;
                let bc1 = 1.0 - BETA1.powi(state.t);
                let bc2 = 1.0 - BETA2.powi(state.t);
                let mut offset = 0;
                for (i, (p, g)) in params.entries_mut().iter_mut().zip(grad.entries()).enumerate() {
                    let flags = update.map(|u| &u[i]);
                    for (k, (pv, gv)) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()).enumerate() {
                        if flags.is_none_or(|f| f[k]) {
                            let j = offset + k;
                            state.m[j] = BETA1 * state.m[j] + (1.0 - BETA1) * gv;
                            state.v[j] = BETA2 * state.v[j] + (1.0 - BETA2) * gv * gv;
                            let m_hat = state.m[j] / bc1;
                            let v_hat = state.v[j] / bc2;
                            *pv -= lr * m_hat / (v_hat.sqrt() + EPS);
                        }
                    }
                    offset += p.tensor.numel();
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;

    fn tree(v: &[f64]) -> ParamTree {
        let mut t = ParamTree::new();
        t.insert(0, ParamKind::FcWeight, Tensor::new([v.len()], v.to_vec()).unwrap())
            .unwrap();
        t
    }

    #[test]
    fn sgd_step() {
        let mut p = tree(&[1.0, 2.0]);
        Optimizer::new(OptimizerKind::Sgd, 0.5)
            .step(&mut p, &tree(&[2.0, -2.0]), None)
            .unwrap();
        assert_eq!(p, tree(&[0.0, 3.0]));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = tree(&[1.0, 2.0]);
        Optimizer::new(OptimizerKind::Adam, 0.1)
            .step(&mut p, &tree(&[3.0, -0.5]), None)
            .unwrap();
        let d = p.get(0, ParamKind::FcWeight).unwrap().data();
        assert!((d[0] - 0.9).abs() < 1e-7);
        assert!((d[1] - 2.1).abs() < 1e-7);
    }

    #[test]
    fn frozen_elements_do_not_move() {
        let mut p = tree(&[1.0, 2.0]);
        let flags = vec![vec![true, false]];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1);
        opt.step(&mut p, &tree(&[1.0, 1.0]), None).unwrap();
        let before = p.get(0, ParamKind::FcWeight).unwrap().data()[1];
        opt.step(&mut p, &tree(&[0.0, 0.0]), Some(&flags)).unwrap();
        assert_eq!(p.get(0, ParamKind::FcWeight).unwrap().data()[1], before);
    }
}
