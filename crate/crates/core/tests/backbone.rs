use nrml::backbone::{build_backbone, forward, BackboneConfig, BlockOrder, Head, InputShape, Variant, BLOCKS, FC_LAYER};
use nrml::model::{Batch, Model, Need};
use nrml::params::{ParamKind, ParamTree};
use nrml::tensor::{Tensor, TensorError};
use nrml::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(order: BlockOrder, head: Head) -> BackboneConfig {
    BackboneConfig {
        variant: Variant::Custom,
        channels: [6, 5, 4, 3],
        block_order: order,
        head,
        ..BackboneConfig::omniglot(5)
    }
}

fn configs() -> Vec<BackboneConfig> {
    let mut out = Vec::new();
    for order in [BlockOrder::ConvReluBn, BlockOrder::ConvBnRelu] {
        for head in [Head::GlobalAvgPool, Head::Flatten] {
            out.push(small(order, head));
        }
        let mut mp = BackboneConfig::mini_imagenet(5);
        mp.channels = [4; BLOCKS];
        mp.input = InputShape {
            channels: 3,
            height: 32,
            width: 32,
        };
        mp.block_order = order;
        out.push(mp);
    }
    out
}

/// Randomizes every parameter, including γ and β, to exercise all paths.
fn randomized(cfg: &BackboneConfig, seed: u64) -> ParamTree {
    let mut p = build_backbone(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in p.entries_mut() {
        for v in e.tensor.data_mut() {
            *v = match e.kind {
                ParamKind::BnGamma => rng.random_range(0.5..1.5),
                _ => rng.random_range(-0.5..0.5),
            };
        }
    }
    p
}

fn images(cfg: &BackboneConfig, b: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i = cfg.input;
    Tensor::from_fn([b, i.channels, i.height, i.width], |_| rng.random_range(0.0..1.0))
}

fn swap_rows(t: &mut Tensor, a: usize, b: usize, row: usize) {
    let d = t.data_mut();
    for i in 0..row {
        d.swap(a * row + i, b * row + i);
    }
}

/// Swaps input channels `a`,`b` of a `[rows, channels·inner]` matrix.
fn swap_columns(t: &mut Tensor, a: usize, b: usize, inner: usize) {
    let rows = t.shape()[0];
    let cols = t.numel() / rows;
    let d = t.data_mut();
    for r in 0..rows {
        for i in 0..inner {
            d.swap(r * cols + a * inner + i, r * cols + b * inner + i);
        }
    }
}

fn permute_filters(cfg: &BackboneConfig, p: &ParamTree, block: usize, a: usize, b: usize) -> ParamTree {
    let mut q = p.clone();
    let w = q.get_mut(block, ParamKind::ConvWeight).unwrap();
    let row = w.numel() / w.shape()[0];
    swap_rows(w, a, b, row);
    for kind in [ParamKind::ConvBias, ParamKind::BnGamma, ParamKind::BnBeta] {
        swap_rows(q.get_mut(block, kind).unwrap(), a, b, 1);
    }
    if block + 1 < BLOCKS {
        swap_columns(q.get_mut(block + 1, ParamKind::ConvWeight).unwrap(), a, b, 9);
    } else {
        let inner = match cfg.head {
            Head::GlobalAvgPool => 1,
            Head::Flatten => cfg.spatial_sizes()[BLOCKS - 1].pow(2),
        };
        swap_columns(q.get_mut(FC_LAYER, ParamKind::FcWeight).unwrap(), a, b, inner);
    }
    q
}

#[test]
fn filter_permutation_leaves_logits_unchanged() {
    for (n, cfg) in configs().into_iter().enumerate() {
        let p = randomized(&cfg, n as u64);
        let x = images(&cfg, 4, 100 + n as u64);
        let base = forward(&p, &x, &cfg).unwrap();
        for block in 0..BLOCKS {
            let q = permute_filters(&cfg, &p, block, 0, cfg.channels[block] - 1);
            assert_ne!(q, p);
            let y = forward(&q, &x, &cfg).unwrap();
            assert!(y.max_abs_diff(&base) < 1e-12, "config {n} block {block}");
        }
    }
}

#[test]
fn forward_is_pure() {
    for (n, cfg) in configs().into_iter().enumerate() {
        let p = randomized(&cfg, n as u64);
        let x = images(&cfg, 3, 7);
        let (p0, x0) = (p.clone(), x.clone());
        let a = forward(&p, &x, &cfg).unwrap();
        let b = forward(&p, &x, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, cfg.n_way]);
        assert!(a.is_finite());
        assert_eq!((p, x), (p0, x0));
    }
}

#[test]
fn zero_input_yields_fc_bias() {
    for cfg in configs() {
        let mut p = build_backbone(&cfg, 1).unwrap();
        let bias: Vec<f64> = (0..cfg.n_way).map(|i| 0.1 * i as f64 - 0.2).collect();
        p.get_mut(FC_LAYER, ParamKind::FcBias).unwrap().data_mut().copy_from_slice(&bias);
        let x = Tensor::zeros([2, cfg.input.channels, cfg.input.height, cfg.input.width]);
        let y = forward(&p, &x, &cfg).unwrap();
        for row in y.data().chunks(cfg.n_way) {
            assert_eq!(row, bias.as_slice());
        }
    }
}

#[test]
fn single_sample_on_a_one_by_one_block_is_degenerate() {
    let cfg = BackboneConfig {
        variant: Variant::Custom,
        input: InputShape {
            channels: 1,
            height: 16,
            width: 16,
        },
        ..BackboneConfig::omniglot(5)
    };
    assert_eq!(cfg.spatial_sizes(), [8, 4, 2, 1]);
    let p = build_backbone(&cfg, 0).unwrap();
    let err = forward(&p, &images(&cfg, 1, 0), &cfg).unwrap_err();
    assert!(matches!(err, Error::Tensor(TensorError::DegenerateBatch { .. })), "{err}");
    forward(&p, &images(&cfg, 2, 0), &cfg).unwrap();
}

#[test]
fn batch_shape_mismatch_is_a_dimension_error() {
    let cfg = small(BlockOrder::ConvReluBn, Head::GlobalAvgPool);
    let p = build_backbone(&cfg, 0).unwrap();
    let err = forward(&p, &Tensor::zeros([2, 3, 28, 28]), &cfg).unwrap_err();
    assert!(matches!(err, Error::Tensor(TensorError::Dimension { .. })), "{err}");
}

#[test]
fn parameter_counts_match_closed_forms() {
    let omni = BackboneConfig::omniglot(5);
    let expect = (3 * 3 * 64 + 64) + 3 * (3 * 3 * 64 * 64 + 64) + 4 * (64 + 64) + (64 * 5 + 5);
    assert_eq!(build_backbone(&omni, 0).unwrap().num_params(), expect);
    let mini = BackboneConfig::mini_imagenet(5);
    let expect = (3 * 3 * 3 * 32 + 32) + 3 * (3 * 3 * 32 * 32 + 32) + 4 * (32 + 32) + (800 * 5 + 5);
    assert_eq!(build_backbone(&mini, 0).unwrap().num_params(), expect);
    assert_eq!(mini.param_count(), expect);
}

#[test]
fn model_gradients_match_finite_differences_on_a_few_entries() {
    let cfg = small(BlockOrder::ConvBnRelu, Head::Flatten);
    let model = nrml::backbone::Backbone::new(cfg.clone()).unwrap();
    let p = randomized(&cfg, 5);
    let batch = Batch {
        images: images(&cfg, 5, 9),
        labels: vec![0, 1, 2, 3, 4],
    };
    let g = model.evaluate(&p, &batch, Need::GRADS).unwrap().grads.unwrap().to_flat();
    let flat = p.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..40 {
        let i = rng.random_range(0..flat.len());
        let loss_at = |d: f64| {
            let mut f = flat.clone();
            f[i] += d;
            let mut q = p.clone();
            q.set_flat(&f).unwrap();
            model.evaluate(&q, &batch, Need::LOSS).unwrap().loss
        };
        let h = 1e-5;
        let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let err = (numeric - g[i]).abs() / g[i].abs().max(numeric.abs()).max(1e-8);
        assert!(err < 1e-5 || (numeric - g[i]).abs() < 1e-8, "entry {i}: {numeric} vs {}", g[i]);
    }
}
