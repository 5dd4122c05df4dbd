//! Run configuration: flat `key = value` files with dotted keys.
//!
//! ```text
//! # comment
//! dataset.name = synthetic
//! routing.p = 0.7,0.6,0.3,0.2
//! ```
//!
//! Later assignments win, so command-line overrides are simply applied
//! after the file. [`RunConfig::to_text`] writes every key with its
//! resolved value and parses back to the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneConfig, InputShape, Variant, BLOCKS};
use crate::episodes::{DatasetName, SplitSizes, SyntheticSpec, TaskShape};
use crate::error::{Error, Result};
use crate::meta::HyperParams;
use crate::routing::RoutingConfig;

/// Every key the parser accepts, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "dataset.name",
    "dataset.root",
    "dataset.split",
    "dataset.rotations",
    "dataset.synthetic.classes",
    "dataset.synthetic.samples_per_class",
    "dataset.synthetic.noise_std",
    "dataset.synthetic.max_shift",
    "dataset.synthetic.signal",
    "dataset.synthetic.seed",
    "task.n",
    "task.k_tr",
    "task.k_val",
    "backbone.variant",
    "backbone.channels",
    "backbone.downsampling",
    "backbone.block_order",
    "backbone.head",
    "backbone.input_channels",
    "backbone.input_size",
    "backbone.bn_epsilon",
    "meta.inner_lr",
    "meta.outer_lr",
    "meta.inner_steps_train",
    "meta.inner_steps_eval",
    "meta.meta_batch_size",
    "meta.outer_optimizer",
    "meta.grad_mode",
    "meta.fd_epsilon",
    "routing.enabled",
    "routing.p",
    "routing.criterion",
    "routing.apply_to_outer",
    "training.iterations",
    "training.eval_every",
    "training.eval_episodes",
    "metrics.wall_clock",
];

/// Raw assignments, validated against [`KEYS`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignments(BTreeMap<String, String>);

impl Assignments {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)));
            };
            out.set(k.trim(), v.trim())?;
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        let Some(v) = self.0.get(key) else { return Ok(None) };
        v.split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
            .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub name: DatasetName,
    pub root: Option<PathBuf>,
    pub split: SplitSizes,
    pub rotations: bool,
    /// Only used when `name` is synthetic; its image size follows the backbone input.
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub iterations: usize,
    /// Checkpoint and validation period; 0 means only at the end.
    pub eval_every: usize,
    pub eval_episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub task: TaskShape,
    pub backbone: BackboneConfig,
    pub hyper: HyperParams,
    pub routing: RoutingConfig,
    pub training: TrainingConfig,
    /// Record wall-clock milliseconds in the metrics CSV. Off keeps reruns
    /// byte-identical.
    pub wall_clock: bool,
}

fn default_split(classes: usize) -> SplitSizes {
    let held_out = classes / 6;
    SplitSizes::new(classes - 2 * held_out, held_out, held_out)
}

impl RunConfig {
    pub fn from_assignments(a: &Assignments) -> Result<Self> {
        let seed: u64 = a.or("seed", 0)?;
        let name: DatasetName = a.or("dataset.name", DatasetName::Synthetic)?;
        let task = TaskShape::new(a.or("task.n", 5)?, a.or("task.k_tr", 1)?, a.or("task.k_val", 15)?);

        let default_variant = match name {
            DatasetName::Omniglot => Variant::Omniglot,
            DatasetName::MiniImagenet => Variant::MiniImagenet,
            DatasetName::Synthetic | DatasetName::Custom => Variant::Custom,
        };
        let mut backbone = BackboneConfig::for_variant(a.or("backbone.variant", default_variant)?, task.n_way);
        if let Some(ch) = a.list("backbone.channels")? {
            let ch: Vec<usize> = ch.iter().map(|&c| c as usize).collect();
            backbone.channels = match ch.len() {
                1 => [ch[0]; BLOCKS],
                BLOCKS => ch.try_into().unwrap(),
                n => return Err(Error::Config(format!("backbone.channels needs 1 or {BLOCKS} values, got {n}"))),
            };
        }
        backbone.downsampling = a.or("backbone.downsampling", backbone.downsampling)?;
        backbone.block_order = a.or("backbone.block_order", backbone.block_order)?;
        backbone.head = a.or("backbone.head", backbone.head)?;
        let size = a.or("backbone.input_size", backbone.input.height)?;
        backbone.input = InputShape {
            channels: a.or("backbone.input_channels", backbone.input.channels)?,
            height: size,
            width: size,
        };
        backbone.bn_epsilon = a.or("backbone.bn_epsilon", backbone.bn_epsilon)?;

        let mut synthetic = SyntheticSpec::new(a.or("dataset.synthetic.classes", 60)?, size, a.or("dataset.synthetic.seed", seed)?);
        synthetic.samples_per_class = a.or("dataset.synthetic.samples_per_class", synthetic.samples_per_class)?;
        synthetic.noise_std = a.or("dataset.synthetic.noise_std", synthetic.noise_std)?;
        synthetic.max_shift = a.or("dataset.synthetic.max_shift", synthetic.max_shift)?;
        synthetic.signal = a.or("dataset.synthetic.signal", synthetic.signal)?;
        let split = match a.get("dataset.split")? {
            Some(s) => s,
            None => name.standard_split().unwrap_or_else(|| default_split(synthetic.classes)),
        };
        let root = a.get::<String>("dataset.root")?.filter(|r| !r.is_empty()).map(PathBuf::from);

        let d = HyperParams::default();
        let hyper = HyperParams {
            inner_lr: a.or("meta.inner_lr", d.inner_lr)?,
            outer_lr: a.or("meta.outer_lr", d.outer_lr)?,
            inner_steps_train: a.or("meta.inner_steps_train", d.inner_steps_train)?,
            inner_steps_eval: a.or("meta.inner_steps_eval", d.inner_steps_eval)?,
            meta_batch_size: a.or("meta.meta_batch_size", d.meta_batch_size)?,
            outer_optimizer: a.or("meta.outer_optimizer", d.outer_optimizer)?,
            grad_mode: a.or("meta.grad_mode", d.grad_mode)?,
            fd_epsilon: a.or("meta.fd_epsilon", d.fd_epsilon)?,
        };
        let r = RoutingConfig::default();
        let routing = RoutingConfig {
            enabled: a.or("routing.enabled", r.enabled)?,
            p_schedule: match a.list("routing.p")? {
                Some(p) if p.len() == 1 => vec![p[0]; BLOCKS],
                Some(p) => p,
                None => r.p_schedule,
            },
            criterion: a.or("routing.criterion", r.criterion)?,
            apply_to_outer: a.or("routing.apply_to_outer", r.apply_to_outer)?,
        };
        let config = RunConfig {
            seed,
            out: a.or("out", PathBuf::from("runs/default"))?,
            dataset: DatasetConfig {
                name,
                root,
                split,
                rotations: a.or("dataset.rotations", false)?,
                synthetic,
            },
            task,
            backbone,
            hyper,
            routing,
            training: TrainingConfig {
                iterations: a.or("training.iterations", 1000)?,
                eval_every: a.or("training.eval_every", 500)?,
                eval_episodes: a.or("training.eval_episodes", 100)?,
            },
            wall_clock: a.or("metrics.wall_clock", false)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_assignments(&Assignments::parse(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.backbone.validate()?;
        self.hyper.validate()?;
        self.routing.validate(BLOCKS)?;
        if self.dataset.name == DatasetName::Synthetic {
            if self.dataset.split.total() != self.dataset.synthetic.classes {
                return Err(Error::Config(format!(
                    "dataset.split {} does not add up to {} synthetic classes",
                    self.dataset.split, self.dataset.synthetic.classes
                )));
            }
            if self.backbone.input.channels != 1 {
                return Err(Error::Config("synthetic images are single-channel".into()));
            }
        } else if self.dataset.root.is_none() {
            return Err(Error::Config(format!("dataset.root is required for {}", self.dataset.name)));
        }
        if self.training.eval_episodes == 0 {
            return Err(Error::Config("training.eval_episodes must be at least 1".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let join = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(",");
        let s = &self.dataset.synthetic;
        let b = &self.backbone;
        let h = &self.hyper;
        let values: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("dataset.name", self.dataset.name.to_string()),
            (
                "dataset.root",
                self.dataset.root.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("dataset.split", self.dataset.split.to_string()),
            ("dataset.rotations", self.dataset.rotations.to_string()),
            ("dataset.synthetic.classes", s.classes.to_string()),
            ("dataset.synthetic.samples_per_class", s.samples_per_class.to_string()),
            ("dataset.synthetic.noise_std", s.noise_std.to_string()),
            ("dataset.synthetic.max_shift", s.max_shift.to_string()),
            ("dataset.synthetic.signal", s.signal.to_string()),
            ("dataset.synthetic.seed", s.seed.to_string()),
            ("task.n", self.task.n_way.to_string()),
            ("task.k_tr", self.task.k_support.to_string()),
            ("task.k_val", self.task.k_query.to_string()),
            ("backbone.variant", b.variant.to_string()),
            ("backbone.channels", join(&mut b.channels.iter().map(|c| c.to_string()))),
            ("backbone.downsampling", b.downsampling.to_string()),
            ("backbone.block_order", b.block_order.to_string()),
            ("backbone.head", b.head.to_string()),
            ("backbone.input_channels", b.input.channels.to_string()),
            ("backbone.input_size", b.input.height.to_string()),
            ("backbone.bn_epsilon", b.bn_epsilon.to_string()),
            ("meta.inner_lr", h.inner_lr.to_string()),
            ("meta.outer_lr", h.outer_lr.to_string()),
            ("meta.inner_steps_train", h.inner_steps_train.to_string()),
            ("meta.inner_steps_eval", h.inner_steps_eval.to_string()),
            ("meta.meta_batch_size", h.meta_batch_size.to_string()),
            ("meta.outer_optimizer", h.outer_optimizer.to_string()),
            ("meta.grad_mode", h.grad_mode.to_string()),
            ("meta.fd_epsilon", h.fd_epsilon.to_string()),
            ("routing.enabled", self.routing.enabled.to_string()),
            ("routing.p", join(&mut self.routing.p_schedule.iter().map(|p| p.to_string()))),
            ("routing.criterion", self.routing.criterion.to_string()),
            ("routing.apply_to_outer", self.routing.apply_to_outer.to_string()),
            ("training.iterations", self.training.iterations.to_string()),
            ("training.eval_every", self.training.eval_every.to_string()),
            ("training.eval_episodes", self.training.eval_episodes.to_string()),
            ("metrics.wall_clock", self.wall_clock.to_string()),
        ];
        debug_assert_eq!(values.iter().map(|(k, _)| *k).collect::<Vec<_>>(), KEYS);
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BlockOrder;
    use crate::meta::{GradMode, OptimizerKind};

    #[test]
    fn defaults_resolve_and_round_trip() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.dataset.split, SplitSizes::new(40, 10, 10));
        assert_eq!(c.routing.p_schedule, vec![0.7, 0.6, 0.3, 0.2]);
        assert_eq!(c.backbone.channels, [64; 4]);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn file_keys_and_overrides() {
        let mut a = Assignments::parse(
            "# run\nseed = 9\nbackbone.channels = 32\nbackbone.block_order = conv_bn_relu\n\
             meta.outer_optimizer = sgd # trailing\nmeta.grad_mode = fd_hvp\nrouting.p = 1.0\n",
        )
        .unwrap();
        a.set_pair("seed=11").unwrap();
        let c = RunConfig::from_assignments(&a).unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.dataset.synthetic.seed, 11);
        assert_eq!(c.backbone.channels, [32; 4]);
        assert_eq!(c.backbone.block_order, BlockOrder::ConvBnRelu);
        assert_eq!(c.hyper.outer_optimizer, OptimizerKind::Sgd);
        assert_eq!(c.hyper.grad_mode, GradMode::FdHvp);
        assert_eq!(c.routing.p_schedule, vec![1.0; 4]);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in [
            "nonsense",
            "no.such.key = 1",
            "task.n = five",
            "routing.p = 0.5,1.5,0.5,0.5",
            "backbone.channels = 8,8",
            "dataset.split = 10,10,10",
            "dataset.name = omniglot",
            "meta.grad_mode = fd_hvp\nmeta.inner_steps_train = 2",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_) | Error::Routing(_)), "{text}: {err}");
            assert_eq!(err.exit_code(), 1);
        }
    }
}
