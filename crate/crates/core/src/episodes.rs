//! Class indices, class splits and N-way K-shot task sampling.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use walkdir::WalkDir;

use crate::backbone::{text_enum, InputShape};
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::seed::{self, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetName {
    Omniglot,
    MiniImagenet,
    Synthetic,
    Custom,
}

text_enum!(DatasetName {
    Omniglot => "omniglot",
    MiniImagenet => "mini_imagenet",
    Synthetic => "synthetic",
    Custom => "custom",
});

impl DatasetName {
    /// Published class split sizes, where the dataset has one.
    pub fn standard_split(self) -> Option<SplitSizes> {
        match self {
            DatasetName::Omniglot => Some(SplitSizes::new(1200, 100, 323)),
            DatasetName::MiniImagenet => Some(SplitSizes::new(64, 16, 20)),
            DatasetName::Synthetic | DatasetName::Custom => None,
        }
    }

    /// Image geometry fed to the network by default.
    pub fn default_input(self) -> InputShape {
        match self {
            DatasetName::MiniImagenet => InputShape {
                channels: 3,
                height: 84,
                width: 84,
            },
            _ => InputShape {
                channels: 1,
                height: 28,
                width: 28,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

text_enum!(Split { Train => "train", Val => "val", Test => "test" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        Self { train, val, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

impl FromStr for SplitSizes {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::Config(format!("split sizes must be three integers, got {s:?}")))?;
        match parts[..] {
            [train, val, test] => Ok(Self::new(train, val, test)),
            _ => Err(Error::Config(format!("split sizes must be three integers, got {s:?}"))),
        }
    }
}

impl fmt::Display for SplitSizes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.train, self.val, self.test)
    }
}

/// Parameters of the procedural task distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub noise_std: f64,
    pub max_shift: i64,
    /// Template amplitude; 0 makes every class pure noise.
    pub signal: f64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, image_size: usize, seed: u64) -> Self {
        Self {
            classes,
            samples_per_class: 20,
            image_size,
            seed,
            noise_std: 0.1,
            max_shift: 2,
            signal: 1.0,
        }
    }
}

/// Where a sample's pixels come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleRef {
    File(PathBuf),
    Synthetic { class: usize, index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    pub name: String,
    pub samples: Vec<SampleRef>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Directory { root: PathBuf },
    Synthetic { spec: SyntheticSpec, templates: Vec<Vec<f64>> },
}

/// Every class of a dataset with its samples and split assignment.
///
/// Immutable once split; images are decoded when a task needs them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassIndex {
    name: DatasetName,
    classes: Vec<ClassEntry>,
    source: Source,
    input: InputShape,
    rotate: bool,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn ingestion(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Indexes `root/<class>/<images>`; nested layouts such as
/// `root/<alphabet>/<character>/<images>` are flattened so that every leaf
/// directory is one class.
pub fn load_dataset(root: &Path, name: DatasetName) -> Result<ClassIndex> {
    if !root.is_dir() {
        return Err(ingestion(root, "dataset root does not exist or is not a directory"));
    }
    let mut classes = Vec::new();
    for entry in WalkDir::new(root).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(|e| ingestion(root, e.to_string()))?;
        if !entry.file_type().is_dir() {
            continue;
        }
        let dir = entry.path();
        let mut has_subdir = false;
        let mut files = Vec::new();
        for child in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let child = child.map_err(|e| Error::io(dir, e))?;
            let path = child.path();
            if path.is_dir() {
                has_subdir = true;
            } else if is_image(&path) {
                files.push(path);
            }
        }
        if has_subdir {
            continue;
        }
        if files.is_empty() {
            return Err(ingestion(dir, "class directory contains no images"));
        }
        files.sort();
        let name = dir.strip_prefix(root).unwrap_or(dir).to_string_lossy().replace('\\', "/");
        classes.push(ClassEntry {
            name,
            samples: files.into_iter().map(SampleRef::File).collect(),
            split: None,
        });
    }
    if classes.is_empty() {
        return Err(ingestion(root, "no class directories found"));
    }
    Ok(ClassIndex {
        name,
        classes,
        source: Source::Directory { root: root.to_path_buf() },
        input: name.default_input(),
        rotate: false,
    })
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Procedural classes: each is a smooth random template; samples add a
/// random integer shift and Gaussian pixel noise, clamped to `[0, 1]`.
pub fn synthetic_tasks(spec: &SyntheticSpec) -> Result<ClassIndex> {
    if spec.classes < 25 {
        return Err(Error::Config(format!(
            "synthetic distribution needs at least 25 classes, got {}",
            spec.classes
        )));
    }
    if spec.image_size < 8 || spec.samples_per_class == 0 {
        return Err(Error::Config(
            "synthetic images must be at least 8x8 with one sample per class".into(),
        ));
    }
    if !(spec.noise_std >= 0.0) || spec.max_shift < 0 || !(0.0..=1.0).contains(&spec.signal) {
        return Err(Error::Config(
            "synthetic noise, shift and signal must be non-negative (signal ≤ 1)".into(),
        ));
    }
    let templates = (0..spec.classes).map(|c| template(spec, c)).collect();
    let classes = (0..spec.classes)
        .map(|class| ClassEntry {
            name: format!("synthetic_{class:04}"),
            samples: (0..spec.samples_per_class)
                .map(|index| SampleRef::Synthetic { class, index })
                .collect(),
            split: None,
        })
        .collect();
    Ok(ClassIndex {
        name: DatasetName::Synthetic,
        classes,
        source: Source::Synthetic {
            spec: spec.clone(),
            templates,
        },
        input: InputShape {
            channels: 1,
            height: spec.image_size,
            width: spec.image_size,
        },
        rotate: false,
    })
}

/// Sum of a few Gaussian blobs, scaled so the brightest pixel is `signal`.
fn template(spec: &SyntheticSpec, class: usize) -> Vec<f64> {
    let n = spec.image_size;
    let mut rng = seed::rng(spec.seed, &[stream::TEMPLATE, class as u64]);
    let mut img = vec![0.0; n * n];
    let margin = n as f64 * 0.15;
    for _ in 0..5 {
        let cy = rng.random_range(margin..n as f64 - margin);
        let cx = rng.random_range(margin..n as f64 - margin);
        let sigma = rng.random_range(1.5..3.5);
        let amp = rng.random_range(0.4..1.0);
        for y in 0..n {
            for x in 0..n {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                img[y * n + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let max = img.iter().copied().fold(0.0, f64::max);
    img.iter_mut().for_each(|v| *v *= spec.signal / max);
    img
}

/// Shifts `template` by `(dy, dx)` with zero fill, adds noise, clamps to `[0, 1]`.
pub fn render_sample(template: &[f64], size: usize, shift: (i64, i64), noise: &[f64]) -> Vec<f64> {
    let n = size as i64;
    (0..n * n)
        .map(|i| {
            let (y, x) = (i / n - shift.0, i % n - shift.1);
            let base = if (0..n).contains(&y) && (0..n).contains(&x) {
                template[(y * n + x) as usize]
            } else {
                0.0
            };
            (base + noise.get(i as usize).copied().unwrap_or(0.0)).clamp(0.0, 1.0)
        })
        .collect()
}

impl ClassIndex {
    pub fn name(&self) -> DatasetName {
        self.name
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn input(&self) -> InputShape {
        self.input
    }

    /// Images are resized to `input` when decoded.
    pub fn with_input(mut self, input: InputShape) -> Result<Self> {
        if matches!(self.source, Source::Synthetic { .. }) && input != self.input {
            return Err(Error::Config(format!(
                "synthetic images are {}x{}x{}, backbone expects {}x{}x{}",
                self.input.channels, self.input.height, self.input.width, input.channels, input.height, input.width
            )));
        }
        self.input = input;
        Ok(self)
    }

    /// Rotates every class of a task by a random multiple of 90°.
    pub fn with_rotations(mut self, rotate: bool) -> Self {
        self.rotate = rotate;
        self
    }

    pub fn rotations(&self) -> bool {
        self.rotate
    }

    pub fn root(&self) -> Option<&Path> {
        match &self.source {
            Source::Directory { root } => Some(root),
            Source::Synthetic { .. } => None,
        }
    }

    pub fn synthetic_template(&self, class: usize) -> Option<&[f64]> {
        match &self.source {
            Source::Synthetic { templates, .. } => templates.get(class).map(Vec::as_slice),
            Source::Directory { .. } => None,
        }
    }

    /// Class ids assigned to `split`, ascending.
    pub fn split_classes(&self, split: Split) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Pixels of one sample as `[C, H, W]` values in `[0, 1]`.
    pub fn load_sample(&self, class: usize, sample: usize) -> Result<Vec<f64>> {
        let entry = self
            .classes
            .get(class)
            .ok_or_else(|| Error::Sampling(format!("class {class} does not exist")))?;
        let sref = entry
            .samples
            .get(sample)
            .ok_or_else(|| Error::Sampling(format!("class {class} has no sample {sample}")))?;
        match (sref, &self.source) {
            (SampleRef::File(path), _) => decode_image(path, self.input),
            (SampleRef::Synthetic { class, index }, Source::Synthetic { spec, templates }) => {
                let mut rng = seed::rng(spec.seed, &[stream::SAMPLE, *class as u64, *index as u64]);
                let shift = (
                    rng.random_range(-spec.max_shift..=spec.max_shift),
                    rng.random_range(-spec.max_shift..=spec.max_shift),
                );
                let noise: Vec<f64> = if spec.noise_std > 0.0 {
                    let normal = Normal::new(0.0, spec.noise_std).expect("valid std");
                    (0..spec.image_size * spec.image_size).map(|_| normal.sample(&mut rng)).collect()
                } else {
                    Vec::new()
                };
                Ok(render_sample(&templates[*class], spec.image_size, shift, &noise))
            }
            (SampleRef::Synthetic { .. }, Source::Directory { .. }) => Err(Error::Sampling("synthetic sample in a directory index".into())),
        }
    }

    /// Decodes every image once, surfacing the first undecodable file.
    pub fn verify_images(&self) -> Result<()> {
        for (c, entry) in self.classes.iter().enumerate() {
            for s in 0..entry.samples.len() {
                self.load_sample(c, s)?;
            }
        }
        Ok(())
    }
}

fn decode_image(path: &Path, input: InputShape) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| ingestion(path, format!("cannot decode image: {e}")))?;
    let (w, h) = (input.width as u32, input.height as u32);
    let resize = |img: image::DynamicImage| {
        if img.width() == w && img.height() == h {
            img
        } else {
            img.resize_exact(w, h, FilterType::Triangle)
        }
    };
    let img = resize(img);
    let plane = input.height * input.width;
    match input.channels {
        1 => Ok(img.to_luma8().pixels().map(|p| p.0[0] as f64 / 255.0).collect()),
        3 => {
            let rgb = img.to_rgb8();
            let mut out = vec![0.0; 3 * plane];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = p.0[c] as f64 / 255.0;
                }
            }
            Ok(out)
        }
        c => Err(ingestion(path, format!("unsupported channel count {c}"))),
    }
}

/// Assigns the published split sizes for `name` with a seeded shuffle.
pub fn split_classes(index: ClassIndex, name: DatasetName, seed: u64) -> Result<ClassIndex> {
    let sizes = name
        .standard_split()
        .ok_or_else(|| Error::Split(format!("{name} has no standard split; pass explicit sizes")))?;
    split_classes_with(index, sizes, seed)
}

/// Assigns `sizes.train` random classes to train, the next `sizes.val` to
/// val and the remainder to test.
pub fn split_classes_with(mut index: ClassIndex, sizes: SplitSizes, seed: u64) -> Result<ClassIndex> {
    let n = index.classes.len();
    if sizes.total() != n {
        return Err(Error::Split(format!(
            "split {sizes} needs {} classes, dataset has {n}",
            sizes.total()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[stream::SPLIT]));
    for (rank, &class) in order.iter().enumerate() {
        index.classes[class].split = Some(if rank < sizes.train {
            Split::Train
        } else if rank < sizes.train + sizes.val {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(index)
}

/// Shape of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskShape {
    pub n_way: usize,
    pub k_support: usize,
    pub k_query: usize,
}

impl TaskShape {
    pub fn new(n_way: usize, k_support: usize, k_query: usize) -> Self {
        Self { n_way, k_support, k_query }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_support == 0 || self.k_query == 0 {
            return Err(Error::Config(format!(
                "task needs n_way ≥ 2 and positive shots, got {}-way {}/{}",
                self.n_way, self.k_support, self.k_query
            )));
        }
        Ok(())
    }
}

/// One episode: support and query sets over the same `n_way` classes,
/// labels relabelled to `0..n_way`.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub shape: TaskShape,
    pub support: Batch,
    pub query: Batch,
    /// Dataset class id behind each label.
    pub classes: Vec<usize>,
    /// `(class, sample)` behind each support row.
    pub support_ids: Vec<(usize, usize)>,
    pub query_ids: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Draws a task from `split`; fully determined by `(index, split, shape, seed)`.
pub fn sample_task(index: &ClassIndex, split: Split, shape: TaskShape, seed: u64) -> Result<Task> {
    shape.validate()?;
    let pool = index.split_classes(split);
    if pool.len() < shape.n_way {
        return Err(Error::Sampling(format!(
            "{split} split has {} classes, task needs {}",
            pool.len(),
            shape.n_way
        )));
    }
    let mut rng = seed::rng(seed, &[]);
    let per_class = shape.k_support + shape.k_query;
    let chosen: Vec<usize> = index::sample(&mut rng, pool.len(), shape.n_way)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let input = index.input;
    let plane = input.channels * input.height * input.width;
    let mut support = Vec::with_capacity(shape.n_way * shape.k_support * plane);
    let mut query = Vec::with_capacity(shape.n_way * shape.k_query * plane);
    let (mut support_ids, mut query_ids) = (Vec::new(), Vec::new());
    let (mut support_labels, mut query_labels) = (Vec::new(), Vec::new());
    for (label, &class) in chosen.iter().enumerate() {
        let available = index.classes[class].samples.len();
        if available < per_class {
            return Err(Error::Sampling(format!(
                "class {} has {available} samples, task needs {per_class}",
                index.classes[class].name
            )));
        }
        let quarter_turns = if index.rotate { rng.random_range(0..4) } else { 0 };
        let picks = index::sample(&mut rng, available, per_class).into_vec();
        for (k, &s) in picks.iter().enumerate() {
            let mut pixels = index.load_sample(class, s)?;
            if quarter_turns > 0 {
                pixels = rotate_quarter_turns(&pixels, input, quarter_turns);
            }
            if k < shape.k_support {
                support.extend_from_slice(&pixels);
                support_ids.push((class, s));
                support_labels.push(label);
            } else {
                query.extend_from_slice(&pixels);
                query_ids.push((class, s));
                query_labels.push(label);
            }
        }
    }
    let dims = |n: usize| [n, input.channels, input.height, input.width];
    Ok(Task {
        shape,
        support: Batch {
            images: Tensor::new(dims(support_labels.len()), support)?,
            labels: support_labels,
        },
        query: Batch {
            images: Tensor::new(dims(query_labels.len()), query)?,
            labels: query_labels,
        },
        classes: chosen,
        support_ids,
        query_ids,
        seed,
    })
}

/// Rotates each `[C, H, W]` plane counter-clockwise by `turns` quarter turns.
fn rotate_quarter_turns(pixels: &[f64], input: InputShape, turns: u32) -> Vec<f64> {
    let n = input.height;
    let plane = n * n;
    let mut cur = pixels.to_vec();
    for _ in 0..turns {
        let mut next = vec![0.0; cur.len()];
        for c in 0..input.channels {
            for y in 0..n {
                for x in 0..n {
                    next[c * plane + (n - 1 - x) * n + y] = cur[c * plane + y * n + x];
                }
            }
        }
        cur = next;
    }
    cur
}

impl Task {
    /// Checks the structural invariants of an episode.
    pub fn validate(&self) -> Result<()> {
        let n = self.shape.n_way;
        let fail = |m: String| Err(Error::Sampling(m));
        if self.classes.len() != n || self.classes.iter().collect::<HashSet<_>>().len() != n {
            return fail("sampled classes are not distinct".into());
        }
        for (batch, ids, k) in [
            (&self.support, &self.support_ids, self.shape.k_support),
            (&self.query, &self.query_ids, self.shape.k_query),
        ] {
            if batch.len() != n * k || ids.len() != n * k {
                return fail(format!("expected {} rows, got {}", n * k, batch.len()));
            }
            let mut counts = vec![0; n];
            for (&label, &(class, _)) in batch.labels.iter().zip(ids) {
                if label >= n || self.classes[label] != class {
                    return fail(format!("label {label} does not map to class {class}"));
                }
                counts[label] += 1;
            }
            if counts.iter().any(|&c| c != k) {
                return fail(format!("per-class counts {counts:?}, expected {k} each"));
            }
        }
        let support: HashSet<_> = self.support_ids.iter().collect();
        if support.len() != self.support_ids.len() {
            return fail("duplicate support sample".into());
        }
        let query: HashSet<_> = self.query_ids.iter().collect();
        if query.len() != self.query_ids.len() || !support.is_disjoint(&query) {
            return fail("support and query samples overlap".into());
        }
        Ok(())
    }
}
