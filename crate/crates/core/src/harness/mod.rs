//! Training, evaluation and verification commands behind the `nrml` binary.
//!
//! A training run writes into its output directory:
//!
//! | file | content |
//! |------|---------|
//! | `config.resolved` | every configuration key with its resolved value |
//! | `metrics.csv` | one [`EpisodeRecord`] per task per meta-iteration |
//! | `masks.csv` | selected filters of every inner-loop mask (routing runs) |
//! | `val.csv` | periodic meta-validation accuracy |
//! | `checkpoints/iter_NNNNNN.nrml`, `checkpoints/final.nrml` | parameters |

pub mod checkpoint;
pub mod config;
pub mod metrics;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::backbone::{Backbone, BLOCKS};
use crate::episodes::{load_dataset, sample_task, split_classes_with, synthetic_tasks, ClassIndex, DatasetName, Split, Task, TaskShape};
use crate::error::{Error, Result};
use crate::meta::probe::{dense_hessian, QuadraticProbe, TinyMlp};
use crate::meta::{self, EvalReport, GradMode, HyperParams, Optimizer, OptimizerKind};
use crate::model::{Model, Need};
use crate::params::ParamTree;
use crate::routing::{self, LayerReuse, RoutingConfig, RoutingMask};
use crate::seed::{self, stream};
use crate::tensor::fault::{self, FaultyOp};
use crate::tensor::gradcheck::{self, CheckConfig, OpReport};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Assignments, RunConfig};
pub use metrics::EpisodeRecord;

pub const CONFIG_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MASKS_FILE: &str = "masks.csv";
pub const VAL_FILE: &str = "val.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const STATS_FILE: &str = "routing_stats.csv";
pub const REUSE_FILE: &str = "routing_reuse.csv";
pub const FINAL_CHECKPOINT: &str = "final.nrml";

/// Builds the split class index a configuration describes.
pub fn prepare_data(cfg: &RunConfig) -> Result<ClassIndex> {
    let index = match cfg.dataset.name {
        DatasetName::Synthetic => synthetic_tasks(&cfg.dataset.synthetic)?,
        name => {
            let root = cfg
                .dataset
                .root
                .as_deref()
                .ok_or_else(|| Error::Config(format!("dataset.root is required for {name}")))?;
            load_dataset(root, name)?.with_input(cfg.backbone.input)?
        }
    };
    let index = index.with_rotations(cfg.dataset.rotations);
    split_classes_with(index, cfg.dataset.split, seed::derive(cfg.seed, &[stream::SPLIT]))
}

/// Seed of the `i`-th evaluation episode drawn from `split`.
pub fn episode_seed(run_seed: u64, split: Split, tag: u64, i: usize) -> u64 {
    let s = match split {
        Split::Train => stream::TRAIN_TASK,
        Split::Val => stream::VAL_TASK,
        Split::Test => stream::TEST_TASK,
    };
    seed::derive(run_seed, &[s, tag, i as u64])
}

/// Meta-test over `episodes` tasks of `split`; episode `i` uses
/// [`episode_seed`]`(run_seed, split, tag, i)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_split(
    model: &dyn Model,
    theta: &ParamTree,
    index: &ClassIndex,
    split: Split,
    shape: TaskShape,
    episodes: usize,
    run_seed: u64,
    tag: u64,
    hp: &HyperParams,
    routing: &RoutingConfig,
) -> Result<EvalReport> {
    meta::meta_test(
        model,
        theta,
        episodes,
        |i| sample_task(index, split, shape, episode_seed(run_seed, split, tag, i)),
        hp,
        routing,
    )
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn with_checkpoint(e: Error, last: &Option<PathBuf>) -> Error {
    match e {
        Error::Divergence { iteration, task, what, .. } => Error::Divergence {
            iteration,
            task,
            what,
            last_checkpoint: last.clone(),
        },
        other => other,
    }
}

/// What a finished training run produced.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub final_checkpoint: PathBuf,
    pub params: ParamTree,
    pub records: usize,
    pub validation: Vec<(usize, EvalReport)>,
}

/// Runs meta-training as configured.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = cfg.out.clone();
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_text())?;

    let index = prepare_data(cfg)?;
    let model = Backbone::new(cfg.backbone.clone())?;
    let mut theta = model.init(seed::derive(cfg.seed, &[stream::INIT]))?;
    let mut optimizer = Optimizer::new(cfg.hyper.outer_optimizer, cfg.hyper.outer_lr);
    let has_val = index.split_classes(Split::Val).len() >= cfg.task.n_way;

    let mut metrics = metrics::CsvWriter::create(&out.join(METRICS_FILE), metrics::METRICS_HEADER)?;
    let mut masks = if cfg.routing.enabled {
        Some(metrics::CsvWriter::create(&out.join(MASKS_FILE), metrics::MASKS_HEADER)?)
    } else {
        None
    };
    let mut val = metrics::CsvWriter::create(&out.join(VAL_FILE), metrics::VAL_HEADER)?;
    let mut validation = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;
    let mut previous: Option<RoutingMask> = None;
    let mut records = 0;

    for it in 0..cfg.training.iterations {
        let started = Instant::now();
        let tasks: Vec<Task> = (0..cfg.hyper.meta_batch_size)
            .into_par_iter()
            .map(|t| sample_task(&index, Split::Train, cfg.task, episode_seed(cfg.seed, Split::Train, it as u64, t)))
            .collect::<Result<_>>()?;
        let step = meta::outer_step(&model, &mut theta, &mut optimizer, &tasks, &cfg.hyper, &cfg.routing, it)
            .map_err(|e| with_checkpoint(e, &last_checkpoint))?;
        let ms = if cfg.wall_clock {
            started.elapsed().as_millis() as u64 / cfg.hyper.meta_batch_size as u64
        } else {
            0
        };
        for (t, outcome) in step.tasks.iter().enumerate() {
            let mask = match &outcome.mask {
                Some(m) => m.clone(),
                None => RoutingMask::full(&theta)?,
            };
            let mut selected = [0; BLOCKS];
            let mut jaccard = [f64::NAN; BLOCKS];
            for (l, lm) in mask.layers.iter().enumerate().take(BLOCKS) {
                selected[l] = lm.selected.len();
                if let Some(p) = &previous {
                    jaccard[l] = routing::jaccard(&p.layers[l].selected, &lm.selected);
                }
            }
            let record = EpisodeRecord {
                iteration: it,
                task: t,
                support_loss_pre: outcome.support_loss_pre,
                support_loss_post: outcome.support_loss_post,
                query_loss: outcome.query_loss,
                query_accuracy: outcome.query_accuracy,
                selected,
                jaccard,
                ms,
            };
            metrics.line(&record.csv_line())?;
            records += 1;
            if let Some(w) = masks.as_mut() {
                for line in metrics::mask_lines(it, t, &mask) {
                    w.line(&line)?;
                }
            }
            previous = Some(mask);
        }

        let done = it + 1;
        let periodic = cfg.training.eval_every > 0 && done % cfg.training.eval_every == 0;
        if periodic && done < cfg.training.iterations {
            let path = ckpt_dir.join(format!("iter_{done:06}.nrml"));
            save_checkpoint(&path, &theta)?;
            last_checkpoint = Some(path);
        }
        if periodic || done == cfg.training.iterations {
            if has_val {
                let report = evaluate_split(
                    &model,
                    &theta,
                    &index,
                    Split::Val,
                    cfg.task,
                    cfg.training.eval_episodes,
                    cfg.seed,
                    done as u64,
                    &cfg.hyper,
                    &cfg.routing,
                )
                .map_err(|e| with_checkpoint(e, &last_checkpoint))?;
                val.line(&metrics::val_line(done, &report))?;
                eprintln!(
                    "iter {done}: val acc {:.4} ± {:.4} over {} episodes",
                    report.mean, report.ci95, report.episodes
                );
                validation.push((done, report));
            }
            metrics.flush()?;
            val.flush()?;
            if let Some(w) = masks.as_mut() {
                w.flush()?;
            }
        }
    }
    let final_checkpoint = ckpt_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &theta)?;
    metrics.flush()?;
    val.flush()?;
    if let Some(w) = masks.as_mut() {
        w.flush()?;
    }
    Ok(TrainSummary {
        out,
        final_checkpoint,
        params: theta,
        records,
        validation,
    })
}

/// Inputs of the `eval` command.
#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    pub episodes: usize,
    pub sweep: bool,
    /// Defaults to the `config.resolved` of the run that wrote the checkpoint.
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Where `eval.csv` goes; defaults to the run directory.
    pub out: Option<PathBuf>,
}

impl EvalRequest {
    pub fn new(checkpoint: impl Into<PathBuf>, episodes: usize) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            episodes,
            sweep: false,
            config: None,
            overrides: Vec::new(),
            out: None,
        }
    }
}

/// One `(N, K_tr, K_val)` row of an evaluation table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub shape: TaskShape,
    /// `None` when the row could not run; `status` says why.
    pub report: Option<EvalReport>,
    pub status: String,
}

/// The evaluation grid: `(N, K_tr)` in `(5,1),(5,5),(20,1),(20,5)` by `K_val` in `{5, 15}`.
pub fn sweep_shapes() -> Vec<TaskShape> {
    let mut out = Vec::new();
    for (n, k) in [(5, 1), (5, 5), (20, 1), (20, 5)] {
        for q in [5, 15] {
            out.push(TaskShape::new(n, k, q));
        }
    }
    out
}

/// Run directory a checkpoint belongs to (`<run>/checkpoints/x.nrml`).
pub fn run_dir_of(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    if parent.join(CONFIG_FILE).is_file() {
        return parent.to_path_buf();
    }
    parent.parent().unwrap_or(parent).to_path_buf()
}

fn eval_config(req: &EvalRequest) -> Result<RunConfig> {
    let path = req.config.clone().unwrap_or_else(|| run_dir_of(&req.checkpoint).join(CONFIG_FILE));
    if !path.is_file() {
        return Err(Error::Config(format!(
            "no configuration found at {}; pass --config",
            path.display()
        )));
    }
    let mut a = Assignments::read(&path)?;
    for o in &req.overrides {
        a.set_pair(o)?;
    }
    RunConfig::from_assignments(&a)
}

fn row_blocker(index: &ClassIndex, shape: TaskShape, trained_n: usize) -> Option<String> {
    if shape.n_way != trained_n {
        return Some(format!("skipped: checkpoint classifier is {trained_n}-way"));
    }
    let pool = index.split_classes(Split::Test);
    if pool.len() < shape.n_way {
        return Some(format!("skipped: test split has {} classes", pool.len()));
    }
    let need = shape.k_support + shape.k_query;
    let fewest = pool.iter().map(|&c| index.classes()[c].samples.len()).min().unwrap_or(0);
    if fewest < need {
        return Some(format!("skipped: a test class has {fewest} samples, needs {need}"));
    }
    None
}

/// Evaluates a checkpoint on the test split.
pub fn cmd_eval(req: &EvalRequest) -> Result<Vec<EvalRow>> {
    let cfg = eval_config(req)?;
    let model = Backbone::new(cfg.backbone.clone())?;
    let template = model.init(0)?;
    let theta = load_checkpoint(&req.checkpoint, &template)?;
    let index = prepare_data(&cfg)?;
    let shapes = if req.sweep { sweep_shapes() } else { vec![cfg.task] };
    let mut rows = Vec::new();
    for shape in shapes {
        let row = match row_blocker(&index, shape, cfg.backbone.n_way) {
            Some(status) => EvalRow {
                shape,
                report: None,
                status,
            },
            None => {
                let report = evaluate_split(
                    &model,
                    &theta,
                    &index,
                    Split::Test,
                    shape,
                    req.episodes,
                    cfg.seed,
                    0,
                    &cfg.hyper,
                    &cfg.routing,
                )?;
                EvalRow {
                    shape,
                    report: Some(report),
                    status: "ok".into(),
                }
            }
        };
        rows.push(row);
    }
    let out = req.out.clone().unwrap_or_else(|| run_dir_of(&req.checkpoint));
    create_dir(&out)?;
    write_file(&out.join(EVAL_FILE), &eval_csv(&rows))?;
    Ok(rows)
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("n_way,k_tr,k_val,episodes,mean,std,ci95,status\n");
    for r in rows {
        let t = r.shape;
        match &r.report {
            Some(e) => {
                s += &format!(
                    "{},{},{},{},{},{},{},{}\n",
                    t.n_way, t.k_support, t.k_query, e.episodes, e.mean, e.std, e.ci95, r.status
                )
            }
            None => s += &format!("{},{},{},0,,,,{}\n", t.n_way, t.k_support, t.k_query, r.status),
        }
    }
    s
}

/// Human-readable evaluation table.
pub fn eval_table(rows: &[EvalRow]) -> String {
    let mut s = format!("{:>5} {:>5} {:>6}  {:>22}\n", "N", "K_tr", "K_val", "accuracy (95% CI)");
    for r in rows {
        let t = r.shape;
        let cell = match &r.report {
            Some(e) => format!("{:.2}% ± {:.2}% (std {:.2}%)", 100.0 * e.mean, 100.0 * e.ci95, 100.0 * e.std),
            None => r.status.clone(),
        };
        s += &format!("{:>5} {:>5} {:>6}  {cell}\n", t.n_way, t.k_support, t.k_query);
    }
    s
}

/// A named scalar check with its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCheck {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl ProbeCheck {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

/// Outcome of a deliberately corrupted backward pass.
#[derive(Debug, Clone)]
pub struct NegativeControl {
    pub corrupted: FaultyOp,
    pub report: OpReport,
}

impl NegativeControl {
    /// The checker flagged the corrupted op.
    pub fn detected(&self) -> bool {
        !self.report.passed()
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
    pub negative_controls: Vec<NegativeControl>,
    pub probes: Vec<ProbeCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
            && self.negative_controls.iter().all(NegativeControl::detected)
            && self.probes.iter().all(ProbeCheck::passed)
    }

    pub fn lines(&self) -> Vec<String> {
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let mut out = Vec::new();
        for r in &self.ops {
            let mut line = format!(
                "{} {:<24} cases={} entries={} max_rel_err={:.3e}",
                verdict(r.passed()),
                r.op,
                r.cases,
                r.entries,
                r.max_rel_err
            );
            if let Some(f) = &r.first_failure {
                line += &format!(" first failure: {f}");
            }
            out.push(line);
        }
        for c in &self.negative_controls {
            out.push(format!(
                "{} negative control: corrupted {:?} backward -> {} reports {} failures",
                verdict(c.detected()),
                c.corrupted,
                c.report.op,
                c.report.failures
            ));
        }
        for p in &self.probes {
            out.push(format!(
                "{} {:<24} err={:.3e} tol={:.0e}",
                verdict(p.passed()),
                p.name,
                p.error,
                p.tolerance
            ));
        }
        out
    }
}

fn probe_hp(mode: GradMode, eta: f64) -> HyperParams {
    HyperParams {
        inner_lr: eta,
        grad_mode: mode,
        outer_optimizer: OptimizerKind::Sgd,
        ..HyperParams::default()
    }
}

/// Meta-gradient checks against closed forms (quadratic) and a dense
/// finite-difference Hessian (50-parameter MLP).
pub fn probe_checks() -> Result<Vec<ProbeCheck>> {
    let eta = 0.3;
    let off = RoutingConfig::disabled();
    let theta = QuadraticProbe::params(&[1.0, -2.0, 0.5, 3.0]);
    let empty = meta::empty_batch();
    let mut checks = Vec::new();
    for (name, mode, factor) in [
        ("quadratic first_order", GradMode::FirstOrder, 1.0 - eta),
        ("quadratic fd_hvp", GradMode::FdHvp, (1.0 - eta) * (1.0 - eta)),
    ] {
        let g = meta::task_gradient(&QuadraticProbe, &theta, &empty, &empty, &probe_hp(mode, eta), &off)?;
        let mut expect = theta.clone();
        expect.scale(factor);
        checks.push(ProbeCheck {
            name,
            error: g.max_abs_diff(&expect),
            tolerance: 1e-6,
        });
    }

    let theta = TinyMlp::params(11);
    let support = TinyMlp::batch(1, 16);
    let query = TinyMlp::batch(2, 16);
    let hp = probe_hp(GradMode::FdHvp, eta);
    let got = meta::task_gradient(&TinyMlp, &theta, &support, &query, &hp, &off)?.to_flat();
    let adapted = meta::inner_adapt(&TinyMlp, &theta, &support, 1, &hp, &off, meta::Ctx::default())?.adapted;
    let g_val = TinyMlp
        .evaluate(&adapted, &query, Need::GRADS)?
        .grads
        .expect("gradients requested")
        .to_flat();
    let h = dense_hessian(&TinyMlp, &theta, &support, 1e-5)?;
    let expect: Vec<f64> = (0..g_val.len())
        .map(|i| g_val[i] - eta * h[i].iter().zip(&g_val).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let diff = got.iter().zip(&expect).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = expect.iter().map(|b| b * b).sum::<f64>().sqrt();
    checks.push(ProbeCheck {
        name: "mlp fd_hvp vs dense H",
        error: diff / norm,
        tolerance: 1e-4,
    });
    Ok(checks)
}

/// Finite-difference sweep of every op, fault-injection negative controls,
/// and the meta-gradient probes.
pub fn cmd_gradcheck(cfg: &CheckConfig) -> Result<GradcheckReport> {
    let ops = gradcheck::check_all(cfg);
    let control_cfg = CheckConfig { seeds: 5, ..*cfg };
    let negative_controls = [
        (FaultyOp::Conv2d, "conv2d"),
        (FaultyOp::BatchNorm, "batchnorm_train"),
        (FaultyOp::Linear, "linear"),
    ]
    .into_iter()
    .map(|(op, name)| {
        let _guard = fault::corrupt(op);
        NegativeControl {
            corrupted: op,
            report: gradcheck::check_op(name, &control_cfg),
        }
    })
    .collect();
    Ok(GradcheckReport {
        ops,
        negative_controls,
        probes: probe_checks()?,
    })
}

/// Reuse statistics of a routing run's inner-loop masks.
pub fn cmd_stats(run: &Path) -> Result<Vec<LayerReuse>> {
    let path = run.join(MASKS_FILE);
    if !path.is_file() {
        return Err(Error::Ingestion {
            path,
            reason: "no routing masks in this run (was routing enabled?)".into(),
        });
    }
    let masks = metrics::read_masks(&path)?;
    let stats = routing::routing_stats(&masks)?;
    let mut s = String::from(metrics::STATS_HEADER) + "\n";
    for l in metrics::stats_lines(&stats) {
        s += &l;
        s.push('\n');
    }
    write_file(&run.join(STATS_FILE), &s)?;
    let mut r = String::from(metrics::REUSE_HEADER) + "\n";
    for l in metrics::reuse_lines(&stats) {
        r += &l;
        r.push('\n');
    }
    write_file(&run.join(REUSE_FILE), &r)?;
    Ok(stats)
}
