use std::collections::HashSet;
use std::path::Path;

use nrml::backbone::InputShape;
use nrml::episodes::{
    load_dataset, render_sample, sample_task, split_classes, split_classes_with, synthetic_tasks, ClassIndex, DatasetName, Split,
    SplitSizes, SyntheticSpec, TaskShape,
};
use nrml::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synthetic(classes: usize, size: usize, sizes: SplitSizes) -> ClassIndex {
    split_classes_with(synthetic_tasks(&SyntheticSpec::new(classes, size, 7)).unwrap(), sizes, 7).unwrap()
}

fn check_task_invariants(task: &nrml::episodes::Task) {
    let s = task.shape;
    task.validate().unwrap();
    assert_eq!(task.support.labels.len(), s.n_way * s.k_support);
    assert_eq!(task.query.labels.len(), s.n_way * s.k_query);
    for label in 0..s.n_way {
        assert_eq!(task.support.labels.iter().filter(|&&l| l == label).count(), s.k_support);
        assert_eq!(task.query.labels.iter().filter(|&&l| l == label).count(), s.k_query);
    }
    let support: HashSet<_> = task.support_ids.iter().collect();
    let query: HashSet<_> = task.query_ids.iter().collect();
    assert_eq!(support.len(), task.support_ids.len());
    assert_eq!(query.len(), task.query_ids.len());
    assert!(support.is_disjoint(&query));
    // Labels map bijectively onto the sampled classes.
    for (ids, labels) in [(&task.support_ids, &task.support.labels), (&task.query_ids, &task.query.labels)] {
        for ((class, _), &label) in ids.iter().zip(labels.iter()) {
            assert_eq!(task.classes[label], *class);
        }
    }
    assert_eq!(task.classes.iter().collect::<HashSet<_>>().len(), s.n_way);
}

#[test]
fn ten_thousand_tasks_satisfy_the_invariants() {
    let index = synthetic(60, 8, SplitSizes::new(40, 10, 10));
    let train: HashSet<usize> = index.split_classes(Split::Train).into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..10_000u64 {
        let n = rng.random_range(2..=10);
        let k = rng.random_range(1..=5);
        let q = rng.random_range(1..=20 - k);
        let task = sample_task(&index, Split::Train, TaskShape::new(n, k, q), seed).unwrap();
        check_task_invariants(&task);
        assert!(task.classes.iter().all(|c| train.contains(c)));
    }
}

#[test]
fn protocol_sizes() {
    let index = synthetic(60, 8, SplitSizes::new(20, 20, 20));
    let t = sample_task(&index, Split::Test, TaskShape::new(5, 1, 15), 1).unwrap();
    assert_eq!((t.support.len(), t.query.len()), (5, 75));
    let t = sample_task(&index, Split::Test, TaskShape::new(20, 5, 5), 1).unwrap();
    assert_eq!((t.support.len(), t.query.len()), (100, 100));
    assert_eq!(t.support.images.shape(), &[100, 1, 8, 8]);
}

#[test]
fn sampling_is_reproducible_and_rotations_keep_invariants() {
    let index = synthetic(30, 8, SplitSizes::new(20, 5, 5));
    let shape = TaskShape::new(5, 2, 3);
    let a = sample_task(&index, Split::Train, shape, 42).unwrap();
    let b = sample_task(&index, Split::Train, shape, 42).unwrap();
    assert_eq!(a.support, b.support);
    assert_eq!(a.query_ids, b.query_ids);
    assert_ne!(sample_task(&index, Split::Train, shape, 43).unwrap().support_ids, a.support_ids);
    let rotated = index.clone().with_rotations(true);
    for seed in 0..50 {
        check_task_invariants(&sample_task(&rotated, Split::Train, shape, seed).unwrap());
    }
}

#[test]
fn insufficient_classes_or_samples_is_a_sampling_error() {
    let index = synthetic(30, 8, SplitSizes::new(20, 5, 5));
    let err = sample_task(&index, Split::Val, TaskShape::new(6, 1, 1), 0).unwrap_err();
    assert!(matches!(err, Error::Sampling(_)));
    let err = sample_task(&index, Split::Train, TaskShape::new(5, 10, 11), 0).unwrap_err();
    assert!(matches!(err, Error::Sampling(_)));
}

#[test]
fn synthetic_distribution_is_regenerable() {
    let spec = SyntheticSpec::new(40, 28, 7);
    let a = synthetic_tasks(&spec).unwrap();
    let b = synthetic_tasks(&spec).unwrap();
    assert_eq!(a.classes().len(), 40);
    assert_eq!(a, b);
    for c in 0..40 {
        for s in [0, 19] {
            let x = a.load_sample(c, s).unwrap();
            let y = b.load_sample(c, s).unwrap();
            assert_eq!(
                x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
    assert!(synthetic_tasks(&SyntheticSpec::new(24, 28, 7)).is_err());
}

#[test]
fn noiseless_unshifted_sample_is_the_template() {
    let mut spec = SyntheticSpec::new(25, 28, 3);
    spec.noise_std = 0.0;
    spec.max_shift = 0;
    let index = synthetic_tasks(&spec).unwrap();
    for c in [0, 12, 24] {
        let template = index.synthetic_template(c).unwrap();
        assert_eq!(index.load_sample(c, 5).unwrap(), template);
        assert_eq!(render_sample(template, 28, (0, 0), &[]), template);
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn same_class_samples_are_closer_than_cross_class_samples() {
    let index = synthetic_tasks(&SyntheticSpec::new(40, 28, 11)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut within, mut across) = (0.0, 0.0);
    let draws = 1000;
    for _ in 0..draws {
        let c = rng.random_range(0..40);
        let d = (c + rng.random_range(1..40)) % 40;
        let (s1, s2) = (rng.random_range(0..20), rng.random_range(0..20));
        let s2 = if s1 == s2 { (s2 + 1) % 20 } else { s2 };
        let x = index.load_sample(c, s1).unwrap();
        within += l2(&x, &index.load_sample(c, s2).unwrap());
        across += l2(&x, &index.load_sample(d, s2).unwrap());
    }
    let (within, across) = (within / draws as f64, across / draws as f64);
    assert!(within < across, "within {within} across {across}");
}

#[test]
fn published_split_sizes() {
    for (name, classes, expect) in [
        (DatasetName::Omniglot, 1623, (1200, 100, 323)),
        (DatasetName::MiniImagenet, 100, (64, 16, 20)),
    ] {
        let index = synthetic_tasks(&SyntheticSpec::new(classes, 8, 0)).unwrap();
        let a = split_classes(index.clone(), name, 9).unwrap();
        let b = split_classes(index.clone(), name, 9).unwrap();
        assert_eq!(a, b);
        let sizes = [Split::Train, Split::Val, Split::Test].map(|s| a.split_classes(s));
        assert_eq!((sizes[0].len(), sizes[1].len(), sizes[2].len()), expect);
        let all: HashSet<usize> = sizes.iter().flatten().copied().collect();
        assert_eq!(all.len(), classes);
        assert_ne!(split_classes(index, name, 10).unwrap(), a);
    }
    let small = synthetic_tasks(&SyntheticSpec::new(30, 8, 0)).unwrap();
    assert!(matches!(split_classes(small, DatasetName::Omniglot, 0), Err(Error::Split(_))));
}

fn write_png(path: &Path, w: u32, h: u32, rgb: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rgb {
        image::RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
            .save(path)
            .unwrap();
    } else {
        image::GrayImage::from_fn(w, h, |_, _| image::Luma([rng.random()]))
            .save(path)
            .unwrap();
    }
}

#[test]
fn directory_datasets_load_and_decode() {
    let dir = tempfile::tempdir().unwrap();
    for (a, alphabet) in ["alpha", "beta"].iter().enumerate() {
        for c in 0..3 {
            let class = dir.path().join(alphabet).join(format!("char{c}"));
            std::fs::create_dir_all(&class).unwrap();
            for s in 0..4 {
                write_png(&class.join(format!("{s}.png")), 105, 105, false, (a * 100 + c * 10 + s) as u64);
            }
        }
    }
    let index = load_dataset(dir.path(), DatasetName::Omniglot).unwrap();
    assert_eq!(index.classes().len(), 6);
    assert_eq!(index.classes()[0].name, "alpha/char0");
    assert!(index.classes().iter().all(|c| c.samples.len() == 4));
    let x = index.load_sample(0, 0).unwrap();
    assert_eq!(x.len(), 28 * 28);
    assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
    index.verify_images().unwrap();

    let rgb = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(rgb.path().join("n01")).unwrap();
    write_png(&rgb.path().join("n01/a.png"), 100, 90, true, 1);
    let index = load_dataset(rgb.path(), DatasetName::MiniImagenet).unwrap();
    assert_eq!(index.load_sample(0, 0).unwrap().len(), 3 * 84 * 84);
    let index = index
        .with_input(InputShape {
            channels: 3,
            height: 64,
            width: 64,
        })
        .unwrap();
    assert_eq!(index.load_sample(0, 0).unwrap().len(), 3 * 64 * 64);
}

#[test]
fn ingestion_errors_name_the_offending_path() {
    let missing = Path::new("/nonexistent/dataset/root");
    match load_dataset(missing, DatasetName::Omniglot).unwrap_err() {
        Error::Ingestion { path, .. } => assert_eq!(path, missing),
        e => panic!("{e}"),
    }
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_dataset(dir.path(), DatasetName::Omniglot),
        Err(Error::Ingestion { .. })
    ));
    let empty = dir.path().join("empty_class");
    std::fs::create_dir_all(&empty).unwrap();
    match load_dataset(dir.path(), DatasetName::Omniglot).unwrap_err() {
        Error::Ingestion { path, .. } => assert_eq!(path, empty),
        e => panic!("{e}"),
    }
    std::fs::write(empty.join("broken.png"), b"not a png").unwrap();
    let index = load_dataset(dir.path(), DatasetName::Omniglot).unwrap();
    let err = index.verify_images().unwrap_err();
    match &err {
        Error::Ingestion { path, .. } => assert_eq!(path, &empty.join("broken.png")),
        e => panic!("{e}"),
    }
    assert_eq!(err.exit_code(), 3);
}

fn env_root(var: &str) -> Option<std::path::PathBuf> {
    let root = std::env::var_os(var).map(std::path::PathBuf::from);
    if root.is_none() {
        eprintln!("{var} not set; skipping real-dataset check");
    }
    root
}

#[test]
fn real_datasets_when_available() {
    if let Some(root) = env_root("OMNIGLOT_ROOT") {
        let index = load_dataset(&root, DatasetName::Omniglot).unwrap();
        assert_eq!(index.classes().len(), 1623);
        assert!(index.classes().iter().all(|c| c.samples.len() == 20));
    }
    if let Some(root) = env_root("MINI_IMAGENET_ROOT") {
        let index = load_dataset(&root, DatasetName::MiniImagenet).unwrap();
        assert_eq!(index.classes().len(), 100);
        assert!(index.classes().iter().all(|c| c.samples.len() == 600));
    }
}
