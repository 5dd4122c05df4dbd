//! End-to-end acceptance checks. Prints one PASS/FAIL/SKIPPED line per
//! criterion and exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use nrml::backbone::{Backbone, BackboneConfig, BlockOrder};
use nrml::episodes::{sample_task, split_classes_with, synthetic_tasks, Split, SplitSizes, SyntheticSpec, TaskShape};
use nrml::harness::{self, EvalRequest, RunConfig};
use nrml::meta::{inner_adapt, outer_step, Ctx, HyperParams, Optimizer, OptimizerKind};
use nrml::params::{ParamKind, ParamTree};
use nrml::routing::{RoutingConfig, DEFAULT_SCHEDULE};
use nrml::tensor::gradcheck::CheckConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORDERS: [BlockOrder; 2] = [BlockOrder::ConvReluBn, BlockOrder::ConvBnRelu];

enum Verdict {
    Pass(String),
    Fail(String),
    Skipped(String),
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_correctness() -> nrml::Result<Verdict> {
    let cfg = CheckConfig::default();
    assert_eq!((cfg.step, cfg.rel_tol), (1e-5, 1e-5));
    let start = Instant::now();
    let report = harness::cmd_gradcheck(&cfg)?;
    let elapsed = start.elapsed();
    let worst = report.ops.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let min_seeds = report.ops.iter().map(|r| r.cases).min().unwrap_or(0);
    let ok = report.ops.iter().all(|r| r.passed())
        && report.negative_controls.iter().all(|c| c.detected())
        && min_seeds >= 100
        && elapsed <= Duration::from_secs(120);
    Ok(verdict(
        ok,
        format!(
            "{} ops x {min_seeds} seeds, max rel err {worst:.2e} (tol 1e-5), {} faults detected, {}",
            report.ops.len(),
            report.negative_controls.len(),
            secs(elapsed)
        ),
    ))
}

fn small_index(seed: u64) -> nrml::Result<nrml::episodes::ClassIndex> {
    split_classes_with(synthetic_tasks(&SyntheticSpec::new(30, 28, seed))?, SplitSizes::new(20, 5, 5), seed)
}

fn maml_reduction() -> nrml::Result<Verdict> {
    let start = Instant::now();
    let index = small_index(1)?;
    let hp = HyperParams {
        outer_optimizer: OptimizerKind::Sgd,
        outer_lr: 0.05,
        meta_batch_size: 2,
        ..HyperParams::default()
    };
    let mut worst: f64 = 0.0;
    for order in ORDERS {
        let model = Backbone::new(BackboneConfig {
            channels: [16; 4],
            block_order: order,
            ..BackboneConfig::omniglot(5)
        })?;
        let run = |routing: &RoutingConfig| -> nrml::Result<Vec<ParamTree>> {
            let mut theta = model.init(2)?;
            let mut opt = Optimizer::new(hp.outer_optimizer, hp.outer_lr);
            let mut out = Vec::new();
            for it in 0..10u64 {
                let tasks = (0..hp.meta_batch_size as u64)
                    .map(|t| sample_task(&index, Split::Train, TaskShape::new(5, 1, 5), it * 10 + t))
                    .collect::<nrml::Result<Vec<_>>>()?;
                outer_step(&model, &mut theta, &mut opt, &tasks, &hp, routing, it as usize)?;
                out.push(theta.clone());
            }
            Ok(out)
        };
        let maml = run(&RoutingConfig::disabled())?;
        let full = run(&RoutingConfig::with_schedule(vec![1.0; 4]))?;
        for (a, b) in maml.iter().zip(&full) {
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    let elapsed = start.elapsed();
    Ok(verdict(
        worst <= 1e-12 && elapsed <= Duration::from_secs(60),
        format!(
            "max abs diff {worst:.1e} over 10 iterations x 2 block orders (tol 1e-12), {}",
            secs(elapsed)
        ),
    ))
}

fn freeze_invariant() -> nrml::Result<Verdict> {
    let index = small_index(3)?;
    let routing = RoutingConfig::with_schedule(DEFAULT_SCHEDULE.to_vec());
    let hp = HyperParams::default();
    let mut tasks = 0;
    let mut violations = 0;
    let mut counts_ok = true;
    for order in ORDERS {
        let model = Backbone::new(BackboneConfig {
            block_order: order,
            ..BackboneConfig::omniglot(5)
        })?;
        let mut theta = model.init(3)?;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in theta.conv_layers() {
            for g in theta.get_mut(l, ParamKind::BnGamma).expect("conv layer has gamma").data_mut() {
                *g = rng.random_range(0.5..1.5);
            }
        }
        for t in 0..1000u64 {
            let task = sample_task(&index, Split::Train, TaskShape::new(5, 1, 1), t)?;
            let r = inner_adapt(&model, &theta, &task.support, 1, &hp, &routing, Ctx::default())?;
            let mask = r.mask.expect("routing enabled");
            counts_ok &= mask.selection_counts() == [45, 39, 20, 13];
            for l in theta.conv_layers() {
                let lm = mask.layer(l).expect("mask covers every conv layer");
                let (w0, w1) = (
                    theta.require(l, ParamKind::ConvWeight)?,
                    r.adapted.require(l, ParamKind::ConvWeight)?,
                );
                let (b0, b1) = (theta.require(l, ParamKind::ConvBias)?, r.adapted.require(l, ParamKind::ConvBias)?);
                for j in (0..lm.channels).filter(|&j| !lm.contains(j)) {
                    let s = theta.filter_slice(l, j)?;
                    let moved = s.weight.clone().any(|i| w0.data()[i].to_bits() != w1.data()[i].to_bits())
                        || b0.data()[s.bias].to_bits() != b1.data()[s.bias].to_bits();
                    violations += usize::from(moved);
                }
            }
            tasks += 1;
        }
    }
    Ok(verdict(
        violations == 0 && counts_ok,
        format!(
            "{tasks} adapted tasks, {violations} frozen filters moved, counts [45, 39, 20, 13] {}",
            if counts_ok { "held" } else { "violated" }
        ),
    ))
}

fn meta_gradient_oracles() -> nrml::Result<Verdict> {
    let checks = harness::probe_checks()?;
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.1e} (tol {:.0e})", c.name, c.error, c.tolerance))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(verdict(checks.iter().all(|c| c.passed()) && checks.len() == 3, detail))
}

/// Configuration shared by the synthetic end-to-end and determinism criteria.
fn synthetic_config(out: &Path, order: BlockOrder, routing: bool) -> nrml::Result<RunConfig> {
    RunConfig::parse(&format!(
        "seed = 0
out = {}
dataset.name = synthetic
dataset.synthetic.classes = 60
dataset.split = 40,10,10
task.n = 5
task.k_tr = 1
task.k_val = 5
backbone.channels = 32
backbone.block_order = {order}
meta.meta_batch_size = 4
meta.inner_lr = 0.8
meta.inner_steps_train = 2
meta.inner_steps_eval = 5
meta.outer_lr = 0.003
routing.enabled = {routing}
training.iterations = 3000
training.eval_every = 1000
training.eval_episodes = 100
",
        out.display()
    ))
}

fn test_accuracy(checkpoint: &Path, episodes: usize) -> nrml::Result<f64> {
    let rows = harness::cmd_eval(&EvalRequest::new(checkpoint, episodes))?;
    Ok(rows[0].report.as_ref().expect("trained shape is evaluable").mean)
}

fn synthetic_end_to_end(root: &Path) -> nrml::Result<Verdict> {
    let mut ok = true;
    let mut parts = Vec::new();
    for order in ORDERS {
        for routing in [false, true] {
            let start = Instant::now();
            let out = root.join(format!("{order}_{}", if routing { "nrml" } else { "baseline" }));
            let summary = harness::cmd_train(&synthetic_config(&out, order, routing)?)?;
            let acc = test_accuracy(&summary.final_checkpoint, 600)?;
            ok &= acc >= 0.90;
            parts.push(format!(
                "{order} {} {:.2}% ({})",
                if routing { "nrml" } else { "baseline" },
                100.0 * acc,
                secs(start.elapsed())
            ));
        }
    }
    Ok(verdict(
        ok,
        format!("600-episode test accuracy (need >= 90%): {}", parts.join(", ")),
    ))
}

fn determinism(root: &Path) -> nrml::Result<Verdict> {
    let first = root.join(format!("{}_nrml", BlockOrder::ConvReluBn));
    let second = root.join("rerun");
    harness::cmd_train(&synthetic_config(&second, BlockOrder::ConvReluBn, true)?)?;
    let mut differing = Vec::new();
    for f in [harness::METRICS_FILE, harness::MASKS_FILE, harness::VAL_FILE] {
        if fs::read(first.join(f)).ok() != fs::read(second.join(f)).ok() {
            differing.push(f);
        }
    }
    Ok(verdict(
        differing.is_empty(),
        if differing.is_empty() {
            "metrics.csv, masks.csv, val.csv byte-identical across two seeded runs".into()
        } else {
            format!("differing files: {}", differing.join(", "))
        },
    ))
}

fn omniglot(root: &Path) -> nrml::Result<Verdict> {
    let Some(data) = std::env::var_os("OMNIGLOT_ROOT") else {
        return Ok(Verdict::Skipped("OMNIGLOT_ROOT not set".into()));
    };
    let mut accs = Vec::new();
    for routing in [false, true] {
        let out = root.join(format!("omniglot_{routing}"));
        let cfg = RunConfig::parse(&format!(
            "out = {}
dataset.name = omniglot
dataset.root = {}
task.n = 5
task.k_tr = 1
meta.meta_batch_size = 8
routing.enabled = {routing}
training.iterations = 2000
training.eval_every = 1000
",
            out.display(),
            Path::new(&data).display()
        ))?;
        let summary = harness::cmd_train(&cfg)?;
        accs.push(test_accuracy(&summary.final_checkpoint, 600)?);
    }
    Ok(verdict(
        accs.iter().all(|&a| a >= 0.80),
        format!(
            "baseline {:.2}%, nrml {:.2}% (need >= 80%), delta {:+.2} points",
            100.0 * accs[0],
            100.0 * accs[1],
            100.0 * (accs[1] - accs[0])
        ),
    ))
}

fn mini_imagenet_structure(root: &Path) -> nrml::Result<Verdict> {
    let data = root.join("mini");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for c in 0..10 {
        let dir = data.join(format!("n{c:08}"));
        fs::create_dir_all(&dir).map_err(|e| nrml::Error::io(&dir, e))?;
        let tint: [u8; 3] = rng.random();
        for s in 0..8 {
            let path = dir.join(format!("{s}.png"));
            image::RgbImage::from_fn(84, 84, |x, y| {
                let v = ((x * (c + 1) + y * (s + 2)) % 64) as u8;
                image::Rgb(tint.map(|t| t.wrapping_add(v)))
            })
            .save(&path)
            .map_err(|e| nrml::Error::Ingestion {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
    }
    let out = root.join("mini_run");
    let cfg = RunConfig::parse(&format!(
        "out = {}
dataset.name = mini_imagenet
dataset.root = {}
dataset.split = 5,0,5
task.n = 5
task.k_tr = 1
task.k_val = 2
meta.meta_batch_size = 2
training.iterations = 50
training.eval_every = 25
",
        out.display(),
        data.display()
    ))?;
    let summary = harness::cmd_train(&cfg)?;
    let mut req = EvalRequest::new(&summary.final_checkpoint, 5);
    req.sweep = true;
    let rows = harness::cmd_eval(&req)?;
    let csv = fs::read_to_string(out.join(harness::EVAL_FILE)).map_err(|e| nrml::Error::io(out.join(harness::EVAL_FILE), e))?;
    let evaluated = rows.iter().filter(|r| r.report.is_some()).count();
    Ok(verdict(
        summary.records == 100 && rows.len() == 8 && csv.lines().count() == 9,
        format!(
            "{} training tasks over 50 iterations, sweep table with {} rows ({evaluated} evaluated)",
            summary.records,
            rows.len()
        ),
    ))
}

fn chance_level() -> nrml::Result<Verdict> {
    let mut parts = Vec::new();
    let mut ok = true;
    for order in ORDERS {
        for (n, lo, hi) in [(5, 0.17, 0.23), (20, 0.035, 0.065)] {
            let cfg = RunConfig::parse(&format!(
                "dataset.synthetic.classes = 60
dataset.synthetic.signal = 0
dataset.split = 20,20,20
task.n = {n}
task.k_tr = 1
task.k_val = 15
backbone.channels = 16
backbone.block_order = {order}
"
            ))?;
            let model = Backbone::new(cfg.backbone.clone())?;
            let theta = model.init(cfg.seed)?;
            let index = harness::prepare_data(&cfg)?;
            let report = harness::evaluate_split(
                &model,
                &theta,
                &index,
                Split::Test,
                cfg.task,
                600,
                cfg.seed,
                0,
                &cfg.hyper,
                &cfg.routing,
            )?;
            ok &= (lo..=hi).contains(&report.mean);
            parts.push(format!("{order} N={n} {:.4} in [{lo}, {hi}]", report.mean));
        }
    }
    Ok(verdict(ok, parts.join(", ")))
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let synthetic = work.path().join("synthetic");
    let criteria: Vec<(&str, Box<dyn Fn() -> nrml::Result<Verdict>>)> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("MAML reduction", Box::new(maml_reduction)),
        ("freeze invariant", Box::new(freeze_invariant)),
        ("meta-gradient oracles", Box::new(meta_gradient_oracles)),
        ("synthetic end-to-end", Box::new(|| synthetic_end_to_end(&synthetic))),
        ("reduced Omniglot", Box::new(|| omniglot(work.path()))),
        ("mini-ImageNet structure", Box::new(|| mini_imagenet_structure(work.path()))),
        ("determinism", Box::new(|| determinism(&synthetic))),
        ("chance level", Box::new(chance_level)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let line = match check() {
            Ok(Verdict::Pass(d)) => format!("PASS criterion {} ({name}): {d}", i + 1),
            Ok(Verdict::Skipped(d)) => format!("SKIPPED criterion {} ({name}): {d}", i + 1),
            Ok(Verdict::Fail(d)) => {
                failed += 1;
                format!("FAIL criterion {} ({name}): {d}", i + 1)
            }
            Err(e) => {
                failed += 1;
                format!("FAIL criterion {} ({name}): error: {e}", i + 1)
            }
        };
        println!("{line}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
