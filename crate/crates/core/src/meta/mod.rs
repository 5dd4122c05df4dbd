//! Inner-loop adaptation, the outer meta-update and meta-test evaluation.
//!
//! With routing enabled every inner step runs a single forward/backward pass
//! on the support set and uses that one gradient snapshot twice: first to
//! update the BN scale/shift parameters, then (after scoring filters by the
//! updated `γ`) to update only the selected filters' conv parameters and the
//! classifier. With every fraction at 1.0 this is exactly one joint SGD
//! step, i.e. plain MAML.

mod optim;
pub mod probe;

pub use optim::{Optimizer, OptimizerKind};

use rayon::prelude::*;

use crate::backbone::text_enum;
use crate::episodes::Task;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, Need};
use crate::params::ParamTree;
use crate::routing::{self, RoutingConfig, RoutingMask};
use crate::tensor::Tensor;

/// How the outer gradient treats the dependence of `θ'` on `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// `∇θ' L(θ')`, i.e. `dθ'/dθ` taken as the identity.
    FirstOrder,
    /// `(I − ηH)∇θ' L(θ')` with a finite-difference Hessian-vector product.
    FdHvp,
}

text_enum!(GradMode { FirstOrder => "first_order", FdHvp => "fd_hvp" });

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps_train: usize,
    pub inner_steps_eval: usize,
    pub meta_batch_size: usize,
    pub outer_optimizer: OptimizerKind,
    pub grad_mode: GradMode,
    pub fd_epsilon: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            inner_lr: 0.4,
            outer_lr: 1e-3,
            inner_steps_train: 1,
            inner_steps_eval: 3,
            meta_batch_size: 4,
            outer_optimizer: OptimizerKind::Adam,
            grad_mode: GradMode::FirstOrder,
            fd_epsilon: 1e-4,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.inner_steps_train == 0 || self.inner_steps_eval == 0 {
            return bad("inner steps must be at least 1");
        }
        if self.meta_batch_size == 0 {
            return bad("meta batch size must be at least 1");
        }
        if !(self.fd_epsilon > 0.0) {
            return bad("fd epsilon must be positive");
        }
        if self.grad_mode == GradMode::FdHvp && self.inner_steps_train != 1 {
            return bad("fd_hvp meta-gradients require inner_steps_train = 1");
        }
        Ok(())
    }
}

/// Where a computation sits in the run, for error reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ctx {
    pub iteration: usize,
    pub task: usize,
}

fn finite(value: f64, what: &'static str, ctx: Ctx) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence {
            iteration: ctx.iteration,
            task: ctx.task,
            what,
            last_checkpoint: None,
        })
    }
}

/// Outcome of adapting `θ` to one task's support set.
#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub adapted: ParamTree,
    /// Mask of the last inner step (routing only).
    pub mask: Option<RoutingMask>,
    pub support_loss_pre: f64,
    pub support_loss_post: f64,
    /// Raw support gradient of the last inner step, before masking.
    pub grad_snapshot: ParamTree,
}

/// Adapts a deep copy of `theta` to `support` with `steps` inner steps.
pub fn inner_adapt(
    model: &dyn Model,
    theta: &ParamTree,
    support: &Batch,
    steps: usize,
    hp: &HyperParams,
    routing: &RoutingConfig,
    ctx: Ctx,
) -> Result<AdaptResult> {
    if steps == 0 {
        return Err(Error::Config("inner adaptation needs at least one step".into()));
    }
    let mut adapted = theta.clone();
    let mut mask = None;
    let mut loss_pre = f64::NAN;
    let mut snapshot = None;
    let need = Need {
        grads: true,
        activations: routing.enabled && routing.criterion == routing::Criterion::ActivationAbs,
    };
    for step in 0..steps {
        let eval = model.evaluate(&adapted, support, need)?;
        let loss = finite(eval.loss, "support loss", ctx)?;
        if step == 0 {
            loss_pre = loss;
        }
        let grads = eval.grads.expect("gradients requested");
        if routing.enabled {
            adapted.axpy_where(-hp.inner_lr, &grads, |e| e.kind.is_bn())?;
            let acts = need.activations.then_some(eval.activations.as_slice());
            let m = routing::build_mask(&adapted, routing, acts, Some(ctx.task))?;
            let masked = routing::mask_gradients(&grads, &m)?;
            adapted.axpy_where(-hp.inner_lr, &masked, |e| !e.kind.is_bn())?;
            mask = Some(m);
        } else {
            adapted.axpy(-hp.inner_lr, &grads)?;
        }
        snapshot = Some(grads);
    }
    let post = model.evaluate(&adapted, support, Need::LOSS)?;
    Ok(AdaptResult {
        adapted,
        mask,
        support_loss_pre: loss_pre,
        support_loss_post: finite(post.loss, "adapted support loss", ctx)?,
        grad_snapshot: snapshot.expect("at least one step"),
    })
}

/// Full single-step meta-gradient `g − η·H·(M g)` at `theta`.
///
/// `H` is the support-loss Hessian at `theta`, approximated by a central
/// difference of gradients along the unit direction of `M g`; `M` zeroes
/// the conv slices the inner step froze (identity without a mask).
pub fn meta_gradient_fd_hvp(
    model: &dyn Model,
    theta: &ParamTree,
    support: &Batch,
    g_val: &ParamTree,
    inner_mask: Option<&RoutingMask>,
    hp: &HyperParams,
) -> Result<ParamTree> {
    if hp.inner_steps_train != 1 {
        return Err(Error::Config("fd_hvp meta-gradients require inner_steps_train = 1".into()));
    }
    let direction = match inner_mask {
        Some(m) => routing::mask_gradients(g_val, m)?,
        None => g_val.clone(),
    };
    let norm = direction.norm();
    if norm < 1e-12 {
        return Ok(g_val.clone());
    }
    let eps = hp.fd_epsilon;
    let probe = |sign: f64| -> Result<ParamTree> {
        let mut p = theta.clone();
        p.axpy(sign * eps / norm, &direction)?;
        Ok(model.evaluate(&p, support, Need::GRADS)?.grads.expect("gradients requested"))
    };
    let mut hvp = probe(1.0)?;
    hvp.axpy(-1.0, &probe(-1.0)?)?;
    hvp.scale(norm / (2.0 * eps));
    let mut out = g_val.clone();
    out.axpy(-hp.inner_lr, &hvp)?;
    Ok(out)
}

/// Per-task result of a meta-update.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub support_loss_pre: f64,
    pub support_loss_post: f64,
    pub query_loss: f64,
    pub query_accuracy: f64,
    pub mask: Option<RoutingMask>,
}

#[derive(Debug, Clone)]
pub struct OuterStep {
    pub tasks: Vec<TaskOutcome>,
    /// Summed (and, with outer routing, masked) meta-gradient that was applied.
    pub meta_gradient: ParamTree,
    pub outer_mask: Option<RoutingMask>,
}

struct TaskGradient {
    outcome: TaskOutcome,
    gradient: ParamTree,
    scores: Option<Vec<Vec<f64>>>,
}

fn task_meta_gradient(
    model: &dyn Model,
    theta: &ParamTree,
    support: &Batch,
    query: &Batch,
    hp: &HyperParams,
    routing: &RoutingConfig,
    ctx: Ctx,
) -> Result<TaskGradient> {
    let adapt = inner_adapt(model, theta, support, hp.inner_steps_train, hp, routing, ctx)?;
    let outer_acts = routing.enabled && routing.apply_to_outer && routing.criterion == routing::Criterion::ActivationAbs;
    let eval = model.evaluate(
        &adapt.adapted,
        query,
        Need {
            grads: true,
            activations: outer_acts,
        },
    )?;
    let query_loss = finite(eval.loss, "query loss", ctx)?;
    let query_accuracy = eval.accuracy(&query.labels);
    let g_val = eval.grads.expect("gradients requested");
    let gradient = match hp.grad_mode {
        GradMode::FirstOrder => g_val,
        GradMode::FdHvp => meta_gradient_fd_hvp(model, theta, support, &g_val, adapt.mask.as_ref(), hp)?,
    };
    let scores = if outer_acts {
        Some(routing::extract_scores(&adapt.adapted, routing.criterion, Some(&eval.activations))?)
    } else {
        None
    };
    Ok(TaskGradient {
        outcome: TaskOutcome {
            support_loss_pre: adapt.support_loss_pre,
            support_loss_post: adapt.support_loss_post,
            query_loss,
            query_accuracy,
            mask: adapt.mask,
        },
        gradient,
        scores,
    })
}

/// Meta-gradient of a single task given as a support/query pair.
pub fn task_gradient(
    model: &dyn Model,
    theta: &ParamTree,
    support: &Batch,
    query: &Batch,
    hp: &HyperParams,
    routing: &RoutingConfig,
) -> Result<ParamTree> {
    Ok(task_meta_gradient(model, theta, support, query, hp, routing, Ctx::default())?.gradient)
}

/// Summed meta-gradient over `tasks` at `theta`, without updating anything.
///
/// Tasks adapt in parallel; the sum is taken in task order so the result
/// does not depend on the thread count.
pub fn meta_gradient(
    model: &dyn Model,
    theta: &ParamTree,
    tasks: &[Task],
    hp: &HyperParams,
    routing: &RoutingConfig,
    iteration: usize,
) -> Result<(ParamTree, Vec<TaskOutcome>, Option<Vec<Vec<f64>>>)> {
    if tasks.is_empty() {
        return Err(Error::Config("a meta-batch needs at least one task".into()));
    }
    let per_task: Vec<TaskGradient> = tasks
        .par_iter()
        .enumerate()
        .map(|(task, t)| task_meta_gradient(model, theta, &t.support, &t.query, hp, routing, Ctx { iteration, task }))
        .collect::<Result<_>>()?;
    let mut total = theta.zeros_like();
    for t in &per_task {
        total.axpy(1.0, &t.gradient)?;
    }
    let scores: Option<Vec<_>> = per_task.iter().map(|t| t.scores.clone()).collect();
    let scores = scores.map(|s| routing::mean_scores(&s));
    Ok((total, per_task.into_iter().map(|t| t.outcome).collect(), scores))
}

/// One meta-update of `theta` from a batch of tasks.
pub fn outer_step(
    model: &dyn Model,
    theta: &mut ParamTree,
    optimizer: &mut Optimizer,
    tasks: &[Task],
    hp: &HyperParams,
    routing: &RoutingConfig,
    iteration: usize,
) -> Result<OuterStep> {
    let (mut grad, outcomes, act_scores) = meta_gradient(model, theta, tasks, hp, routing, iteration)?;
    if !grad.is_finite() {
        return Err(Error::Divergence {
            iteration,
            task: 0,
            what: "meta-gradient",
            last_checkpoint: None,
        });
    }
    let mut outer_mask = None;
    let mut flags = None;
    if routing.enabled && routing.apply_to_outer {
        let mask = match act_scores {
            Some(scores) => routing::mask_from_scores(theta, routing, &scores, None)?,
            None => routing::build_mask(theta, routing, None, None)?,
        };
        routing::mask_gradients_in_place(&mut grad, &mask)?;
        flags = Some(mask.element_mask(theta)?);
        outer_mask = Some(mask);
    }
    optimizer.step(theta, &grad, flags.as_deref())?;
    if !theta.is_finite() {
        return Err(Error::Divergence {
            iteration,
            task: 0,
            what: "parameters after the outer step",
            last_checkpoint: None,
        });
    }
    Ok(OuterStep {
        tasks: outcomes,
        meta_gradient: grad,
        outer_mask,
    })
}

/// Accuracy summary over evaluation episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean: f64,
    /// Sample standard deviation of per-episode accuracy.
    pub std: f64,
    /// Half-width of the normal-approximation 95% confidence interval.
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len();
        let mean = accuracies.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let std = var.sqrt();
        Self {
            episodes: n,
            mean,
            std,
            ci95: 1.96 * std / (n as f64).sqrt(),
            accuracies,
        }
    }
}

/// Adapts to each episode's support set with `inner_steps_eval` steps and
/// scores argmax predictions on its query set. `theta` is never modified.
pub fn meta_test<F>(
    model: &dyn Model,
    theta: &ParamTree,
    episodes: usize,
    sample: F,
    hp: &HyperParams,
    routing: &RoutingConfig,
) -> Result<EvalReport>
where
    F: Fn(usize) -> Result<Task> + Sync,
{
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let accuracies = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let task = sample(i)?;
            let ctx = Ctx { iteration: 0, task: i };
            let adapt = inner_adapt(model, theta, &task.support, hp.inner_steps_eval, hp, routing, ctx)?;
            let eval = model.evaluate(&adapt.adapted, &task.query, Need::LOSS)?;
            Ok(eval.accuracy(&task.query.labels))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_accuracies(accuracies))
}

/// A batch with no content, for data-independent probe models.
pub fn empty_batch() -> Batch {
    Batch {
        images: Tensor::zeros([1, 1]),
        labels: vec![0],
    }
}

#[cfg(test)]
mod tests {
    use super::probe::QuadraticProbe;
    use super::*;

    fn sgd_hp(eta: f64) -> HyperParams {
        HyperParams {
            inner_lr: eta,
            outer_optimizer: OptimizerKind::Sgd,
            ..HyperParams::default()
        }
    }

    #[test]
    fn quadratic_inner_step_contracts() {
        let theta = QuadraticProbe::params(&[1.0, -2.0, 0.5]);
        let r = inner_adapt(
            &QuadraticProbe,
            &theta,
            &empty_batch(),
            1,
            &sgd_hp(0.1),
            &RoutingConfig::disabled(),
            Ctx::default(),
        )
        .unwrap();
        let mut expect = theta.clone();
        expect.scale(0.9);
        assert!(r.adapted.max_abs_diff(&expect) < 1e-15);
        assert_eq!(r.grad_snapshot, theta);
    }

    #[test]
    fn quadratic_meta_gradients_match_closed_forms() {
        let theta = QuadraticProbe::params(&[1.0, -2.0, 0.5]);
        let b = empty_batch();
        for (mode, factor) in [(GradMode::FirstOrder, 0.7), (GradMode::FdHvp, 0.49)] {
            let hp = HyperParams {
                grad_mode: mode,
                ..sgd_hp(0.3)
            };
            let g = task_gradient(&QuadraticProbe, &theta, &b, &b, &hp, &RoutingConfig::disabled()).unwrap();
            let mut expect = theta.clone();
            expect.scale(factor);
            assert!(g.max_abs_diff(&expect) < 1e-9, "{mode}");
        }
    }

    #[test]
    fn fd_hvp_of_zero_is_zero() {
        let theta = QuadraticProbe::params(&[1.0, 2.0]);
        let zero = theta.zeros_like();
        let g = meta_gradient_fd_hvp(&QuadraticProbe, &theta, &empty_batch(), &zero, None, &sgd_hp(0.1)).unwrap();
        assert_eq!(g, zero);
    }

    #[test]
    fn fd_hvp_rejects_multi_step() {
        let theta = QuadraticProbe::params(&[1.0]);
        let hp = HyperParams {
            inner_steps_train: 2,
            ..sgd_hp(0.1)
        };
        assert!(meta_gradient_fd_hvp(&QuadraticProbe, &theta, &empty_batch(), &theta, None, &hp).is_err());
        assert!(HyperParams {
            grad_mode: GradMode::FdHvp,
            ..hp
        }
        .validate()
        .is_err());
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let theta = QuadraticProbe::params(&[f64::INFINITY]);
        let err = inner_adapt(
            &QuadraticProbe,
            &theta,
            &empty_batch(),
            1,
            &sgd_hp(0.1),
            &RoutingConfig::disabled(),
            Ctx { iteration: 7, task: 2 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { iteration: 7, task: 2, .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn report_statistics() {
        let r = EvalReport::from_accuracies(vec![0.2, 0.4]);
        assert!((r.mean - 0.3).abs() < 1e-15);
        assert!((r.std - 0.1414213562373095).abs() < 1e-12);
        assert!((r.ci95 - 1.96 * r.std / 2f64.sqrt()).abs() < 1e-15);
    }
}
