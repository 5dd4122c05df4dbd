//! Central finite-difference verification of every differentiable op.
//!
//! Each check draws random shapes and values, differentiates a scalar
//! projection of the op's output on a [`Tape`], and compares every gradient
//! entry against `(f(x + h) − f(x − h)) / 2h` evaluated with forward passes
//! only. Inputs are drawn away from the kinks of `relu` and `maxpool2x2`,
//! where finite differences are meaningless.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};

/// Tolerances for a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub seeds: u64,
    pub step: f64,
    pub rel_tol: f64,
    /// Entries whose analytic gradient is below this magnitude are compared
    /// in absolute terms against the same bound.
    pub abs_floor: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            seeds: 100,
            step: 1e-5,
            rel_tol: 1e-5,
            abs_floor: 1e-8,
        }
    }
}

/// Outcome of checking one op across all seeds.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: u64,
    pub entries: usize,
    pub max_rel_err: f64,
    pub failures: usize,
    /// First failing entry, for diagnostics.
    pub first_failure: Option<String>,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// A randomized check: fixed inputs plus a graph builder over them.
pub struct Case {
    pub inputs: Vec<Tensor>,
    /// Which inputs are differentiated (the rest are constants).
    pub trainable: Vec<bool>,
    pub build: Builder,
}

/// Graph builder mapping the case's input variables to a scalar loss.
pub type Builder = Box<dyn for<'t> Fn(&[Var<'t>]) -> Var<'t>>;

fn builder<F>(f: F) -> Builder
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t> + 'static,
{
    Box::new(f)
}

impl Case {
    fn evaluate(&self, inputs: &[Tensor]) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        (self.build)(&vars).value().item().expect("gradcheck graphs end in a scalar")
    }

    fn analytic(&self) -> Vec<Option<Tensor>> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = self
            .inputs
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| if tr { tape.param(t.clone()) } else { tape.leaf(t.clone()) })
            .collect();
        let loss = (self.build)(&vars);
        tape.backward(loss).expect("scalar loss");
        vars.iter().map(|v| tape.grad(*v)).collect()
    }
}

/// Central-difference gradient of `case` with respect to input `which`.
pub fn numeric_gradient(case: &Case, which: usize, step: f64) -> Vec<f64> {
    let mut inputs = case.inputs.clone();
    (0..inputs[which].numel())
        .map(|i| {
            let orig = inputs[which].data()[i];
            inputs[which].data_mut()[i] = orig + step;
            let plus = case.evaluate(&inputs);
            inputs[which].data_mut()[i] = orig - step;
            let minus = case.evaluate(&inputs);
            inputs[which].data_mut()[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Error of one entry and whether it is within tolerance. Tiny analytic
/// gradients are judged by absolute error.
pub fn entry_error(analytic: f64, numeric: f64, cfg: &CheckConfig) -> (f64, bool) {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < cfg.abs_floor {
        return (diff, diff <= cfg.abs_floor);
    }
    let rel = diff / analytic.abs().max(numeric.abs());
    (rel, rel <= cfg.rel_tol)
}

fn check_case(op: &'static str, seed: u64, case: &Case, cfg: &CheckConfig, report: &mut OpReport) {
    let analytic = case.analytic();
    for (which, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        let numeric = numeric_gradient(case, which, cfg.step);
        for (i, (&a, &n)) in grad.data().iter().zip(&numeric).enumerate() {
            let (err, ok) = entry_error(a, n, cfg);
            report.entries += 1;
            if a.abs() >= cfg.abs_floor {
                report.max_rel_err = report.max_rel_err.max(err);
            }
            if !ok {
                report.failures += 1;
                report
                    .first_failure
                    .get_or_insert_with(|| format!("{op} seed {seed}: input {which} entry {i}: analytic {a:e}, numeric {n:e}"));
            }
        }
    }
}

/// Names of all ops covered by [`check_all`].
pub const OPS: &[&str] = &[
    "add",
    "mul",
    "scale",
    "sum",
    "reshape",
    "relu",
    "tanh",
    "conv2d",
    "batchnorm_train",
    "maxpool2x2",
    "spatial_mean",
    "linear",
    "softmax_cross_entropy",
    "conv_bn_relu_linear_ce",
];

/// Checks one named op over `cfg.seeds` random cases.
pub fn check_op(op: &'static str, cfg: &CheckConfig) -> OpReport {
    let mut report = OpReport {
        op,
        cases: 0,
        entries: 0,
        max_rel_err: 0.0,
        failures: 0,
        first_failure: None,
    };
    for seed in 0..cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ (seed << 8) ^ fxhash(op));
        let case = make_case(op, &mut rng);
        check_case(op, seed, &case, cfg, &mut report);
        report.cases += 1;
    }
    report
}

/// Runs [`check_op`] for every entry of [`OPS`].
pub fn check_all(cfg: &CheckConfig) -> Vec<OpReport> {
    OPS.iter().map(|op| check_op(op, cfg)).collect()
}

fn fxhash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3))
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Values bounded away from zero, for inputs feeding a `relu`.
fn off_kink_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(0.05..1.5);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Distinct values spaced well apart so no pooling window has a near tie.
fn distinct_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).expect("shape matches")
}

fn projection<'t>(out: Var<'t>, weights: &Var<'t>) -> Var<'t> {
    out.mul(weights).expect("projection shape").sum()
}

fn make_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let dim = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.random_range(lo..=hi);
    match op {
        "add" | "mul" => {
            let shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
            let inputs = vec![
                normal_tensor(rng, &shape, 1.0),
                normal_tensor(rng, &shape, 1.0),
                normal_tensor(rng, &shape, 1.0),
            ];
            let build = if op == "add" {
                builder(|v| projection(v[0].add(&v[1]).unwrap(), &v[2]))
            } else {
                builder(|v| projection(v[0].mul(&v[1]).unwrap(), &v[2]))
            };
            Case {
                inputs,
                trainable: vec![true, true, false],
                build,
            }
        }
        "scale" | "sum" | "reshape" | "tanh" | "relu" => {
            let shape = [dim(rng, 1, 3), dim(rng, 2, 6)];
            let x = if op == "relu" {
                off_kink_tensor(rng, &shape)
            } else {
                normal_tensor(rng, &shape, 1.0)
            };
            let n = shape[0] * shape[1];
            let proj_shape: Vec<usize> = if op == "reshape" { vec![n] } else { shape.to_vec() };
            let build = match op {
                "scale" => builder(|v| projection(v[0].scale(-1.7), &v[1])),
                "sum" => builder(|v| v[0].sum().scale(1.3)),
                "reshape" => builder(move |v| projection(v[0].reshape([n]).unwrap(), &v[1])),
                "tanh" => builder(|v| projection(v[0].tanh(), &v[1])),
                _ => builder(|v| projection(v[0].relu(), &v[1])),
            };
            Case {
                inputs: vec![x, normal_tensor(rng, &proj_shape, 1.0)],
                trainable: vec![true, false],
                build,
            }
        }
        "conv2d" => {
            let (b, cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = dim(rng, 1, 3);
            let stride = dim(rng, 1, 2);
            let pad = dim(rng, 0, 1);
            let h = dim(rng, k.max(3), 6);
            let w = dim(rng, k.max(3), 6);
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (w + 2 * pad - k) / stride + 1;
            Case {
                inputs: vec![
                    normal_tensor(rng, &[b, cin, h, w], 1.0),
                    normal_tensor(rng, &[cout, cin, k, k], 0.5),
                    normal_tensor(rng, &[cout], 0.5),
                    normal_tensor(rng, &[b, cout, ho, wo], 1.0),
                ],
                trainable: vec![true, true, true, false],
                build: builder(move |v| projection(v[0].conv2d(&v[1], &v[2], stride, pad).unwrap(), &v[3])),
            }
        }
        "batchnorm_train" => {
            let (b, c) = (dim(rng, 2, 3), dim(rng, 1, 3));
            let (h, w) = (dim(rng, 1, 4), dim(rng, 1, 4));
            Case {
                inputs: vec![
                    normal_tensor(rng, &[b, c, h, w], 1.0),
                    Tensor::from_fn([c], |_| rng.random_range(0.5..1.5)),
                    normal_tensor(rng, &[c], 0.5),
                    normal_tensor(rng, &[b, c, h, w], 1.0),
                ],
                trainable: vec![true, true, true, false],
                build: builder(|v| projection(v[0].batchnorm_train(&v[1], &v[2], 1e-5).unwrap(), &v[3])),
            }
        }
        "maxpool2x2" => {
            let (b, c) = (dim(rng, 1, 2), dim(rng, 1, 3));
            let (h, w) = (dim(rng, 2, 7), dim(rng, 2, 7));
            Case {
                inputs: vec![distinct_tensor(rng, &[b, c, h, w]), normal_tensor(rng, &[b, c, h / 2, w / 2], 1.0)],
                trainable: vec![true, false],
                build: builder(|v| projection(v[0].maxpool2x2().unwrap(), &v[1])),
            }
        }
        "spatial_mean" => {
            let (b, c) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let (h, w) = (dim(rng, 1, 4), dim(rng, 1, 4));
            Case {
                inputs: vec![normal_tensor(rng, &[b, c, h, w], 1.0), normal_tensor(rng, &[b, c], 1.0)],
                trainable: vec![true, false],
                build: builder(|v| projection(v[0].spatial_mean().unwrap(), &v[1])),
            }
        }
        "linear" => {
            let (b, i, o) = (dim(rng, 1, 4), dim(rng, 1, 6), dim(rng, 1, 5));
            Case {
                inputs: vec![
                    normal_tensor(rng, &[b, i], 1.0),
                    normal_tensor(rng, &[o, i], 0.5),
                    normal_tensor(rng, &[o], 0.5),
                    normal_tensor(rng, &[b, o], 1.0),
                ],
                trainable: vec![true, true, true, false],
                build: builder(|v| projection(v[0].linear(&v[1], &v[2]).unwrap(), &v[3])),
            }
        }
        "softmax_cross_entropy" => {
            let (b, n) = (dim(rng, 1, 5), dim(rng, 2, 6));
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
            Case {
                inputs: vec![normal_tensor(rng, &[b, n], 2.0)],
                trainable: vec![true],
                build: builder(move |v| v[0].softmax_cross_entropy(&labels).unwrap()),
            }
        }
        "conv_bn_relu_linear_ce" => composite_case(rng),
        other => panic!("unknown gradcheck op {other}"),
    }
}

fn composite_pre_activation<'t>(v: &[Var<'t>]) -> Var<'t> {
    v[0].conv2d(&v[1], &v[2], 1, 1)
        .and_then(|h| h.batchnorm_train(&v[3], &v[4], 1e-5))
        .expect("valid composite shapes")
}

/// conv → BN → relu → flatten → linear → cross-entropy on a 2×1×6×6 input.
///
/// Redraws until every relu input sits at least 1e-3 away from zero.
pub fn composite_case(rng: &mut ChaCha8Rng) -> Case {
    loop {
        let inputs = vec![
            normal_tensor(rng, &[2, 1, 6, 6], 1.0),
            normal_tensor(rng, &[2, 1, 3, 3], 0.5),
            normal_tensor(rng, &[2], 0.1),
            Tensor::from_fn([2], |_| rng.random_range(0.5..1.5)),
            normal_tensor(rng, &[2], 0.3),
            normal_tensor(rng, &[3, 72], 0.2),
            normal_tensor(rng, &[3], 0.1),
        ];
        let tape = Tape::new();
        let v: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let margin = composite_pre_activation(&v)
            .value()
            .data()
            .iter()
            .fold(f64::INFINITY, |m, x| m.min(x.abs()));
        if margin < 1e-3 {
            continue;
        }
        let labels = vec![rng.random_range(0..3), rng.random_range(0..3)];
        return Case {
            inputs,
            trainable: vec![false, true, true, true, true, true, true],
            build: builder(move |v| {
                composite_pre_activation(v)
                    .relu()
                    .flatten()
                    .and_then(|h| h.linear(&v[5], &v[6]))
                    .and_then(|h| h.softmax_cross_entropy(&labels))
                    .unwrap()
            }),
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_error_switches_to_absolute_for_tiny_gradients() {
        let cfg = CheckConfig::default();
        assert!(entry_error(1e-10, 5e-9, &cfg).1);
        assert!(!entry_error(1e-10, 5e-8, &cfg).1);
        assert!(entry_error(1.0, 1.0 + 5e-6, &cfg).1);
        assert!(!entry_error(1.0, 1.0 + 5e-5, &cfg).1);
    }

    #[test]
    fn few_seeds_pass_for_every_op() {
        let cfg = CheckConfig {
            seeds: 3,
            ..CheckConfig::default()
        };
        for report in check_all(&cfg) {
            assert!(report.passed(), "{:?}", report);
        }
    }
}
