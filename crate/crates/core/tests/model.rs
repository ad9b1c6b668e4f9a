mod common;

use mfuse::model::MfNetWeights;
use mfuse::ssim::{self, SsimConstants};
use mfuse::{Graph, Image, MfNetConfig};

fn pattern(w: usize, h: usize, phase: f64) -> Image {
    Image::from_fn(w, h, |x, y| {
        0.5 + 0.4 * ((x as f64 * 0.7 + phase).sin() * (y as f64 * 0.45 - phase).cos())
    })
}

fn replay_layers(weights: &MfNetWeights) -> Vec<(Vec<f64>, Vec<f64>, usize)> {
    weights
        .layers()
        .iter()
        .map(|p| {
            let w = p.weight.data().iter().map(|&v| v as f64).collect();
            let b = p.bias.data().iter().map(|&v| v as f64).collect();
            (w, b, p.out_channels())
        })
        .collect()
}

// Sum and selected pixels of the tiny network's output on the 16x16 pattern
// pair below, recorded from this implementation and cross-checked against the
// f64 replay in `forward_matches_layer_by_layer_replay`.
const GOLDEN_SUM: f64 = 103.635_34;
const GOLDEN_PIXELS: [(usize, usize, f64); 3] = [
    (0, 0, 0.595_970_27),
    (7, 9, 0.272_099_26),
    (15, 15, 0.442_480_09),
];

#[test]
fn forward_matches_layer_by_layer_replay() {
    let weights = MfNetWeights::init(&MfNetConfig::tiny()).unwrap();
    let (x1, x2) = (pattern(16, 16, 0.0), pattern(16, 16, 1.3));
    let fused = weights.fuse(&x1, &x2).unwrap();
    let cfg = weights.config();
    let replay = common::replay_network(
        &replay_layers(&weights),
        (cfg.d1, cfg.d2, cfg.d3),
        cfg.lrelu_slope,
        &x1,
        &x2,
    );
    for (a, b) in fused.data().iter().zip(&replay) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
    let sum: f64 = fused.data().iter().sum();
    assert!((sum - GOLDEN_SUM).abs() < 1e-4, "sum {sum}");
    for &(x, y, v) in &GOLDEN_PIXELS {
        assert!((fused.get(x, y) - v).abs() < 1e-6, "pixel ({x}, {y})");
    }
}

#[test]
fn wide_config_matches_replay_on_odd_sizes() {
    let cfg = MfNetConfig {
        channels: 5,
        d1: 1,
        d2: 2,
        d3: 2,
        lrelu_slope: 0.1,
        seed: 9,
    };
    let weights = MfNetWeights::init(&cfg).unwrap();
    let (x1, x2) = (pattern(11, 7, 0.2), pattern(11, 7, 2.0));
    let fused = weights.fuse(&x1, &x2).unwrap();
    let replay = common::replay_network(&replay_layers(&weights), (1, 2, 2), 0.1, &x1, &x2);
    for (a, b) in fused.data().iter().zip(&replay) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn default_parameter_count() {
    // three 1->64 stems, 24 64->64 layers (2*5 branch + 2 post + 6 average
    // + 6 reconstruction) and one 64->1 output layer
    let stems = 3 * (9 * 64 + 64);
    let inner = 24 * (64 * 64 * 9 + 64);
    let out = 64 * 9 + 1;
    assert_eq!(stems + inner + out, 888_769);
    let weights = MfNetWeights::init(&MfNetConfig::default()).unwrap();
    assert_eq!(weights.param_count(), 888_769);
    assert_eq!(weights.layers().len(), 3 + 2 * 5 + 2 + 6 + 7);
}

#[test]
fn same_seed_same_weights() {
    let a = MfNetWeights::init(&MfNetConfig::tiny()).unwrap();
    let b = MfNetWeights::init(&MfNetConfig::tiny()).unwrap();
    assert_eq!(a, b);
    let c = MfNetWeights::init(&MfNetConfig {
        seed: 2,
        ..MfNetConfig::tiny()
    })
    .unwrap();
    assert_ne!(a, c);
}

#[test]
fn branches_do_not_share_weights() {
    let w = MfNetWeights::init(&MfNetConfig::tiny()).unwrap();
    assert_ne!(w.stem1(), w.stem2());
    assert_ne!(w.stem1(), w.stem_avg());
    assert_ne!(w.post1(), w.post2());
    for (a, b) in w.branch1().iter().zip(w.branch2()) {
        assert_ne!(a, b);
    }
    assert_eq!(w.branch1().len(), 2);
    assert_eq!(w.branch_avg().len(), 3);
    assert_eq!(w.recon().len(), 3);
    assert_eq!(w.recon().last().unwrap().out_channels(), 1);
}

#[test]
fn output_size_matches_input_size() {
    let weights = MfNetWeights::init(&MfNetConfig::tiny()).unwrap();
    for (w, h) in [(16, 16), (64, 64), (251, 173)] {
        let fused = weights
            .fuse(&pattern(w, h, 0.1), &pattern(w, h, 0.9))
            .unwrap();
        assert_eq!(fused.dims(), (w, h));
        assert!(fused.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn identical_inputs_feed_the_average_branch_unchanged() {
    let weights = MfNetWeights::init(&MfNetConfig::tiny()).unwrap();
    let x = pattern(16, 16, 0.4);
    let t = x.to_tensor::<f32>();
    let feats = weights.features(&t, &t).unwrap();
    // the average branch sees x itself, so its features equal a direct run
    // of the average stem and branch on x
    let cfg = weights.config();
    let layers = replay_layers(&weights);
    let start = weights.layout().stem_avg;
    let mut h = x.data().to_vec();
    let mut c = 1;
    for (wt, b, oc) in &layers[start..start + 1 + cfg.d2] {
        h = common::conv2d(&h, (1, c, 16, 16), wt, b, *oc)
            .into_iter()
            .map(|v| common::lrelu(v, cfg.lrelu_slope))
            .collect();
        c = *oc;
    }
    for (a, b) in feats.avg_feat.data().iter().zip(&h) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
    assert_eq!(feats.output.shape(), [1, 1, 16, 16]);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let weights = MfNetWeights::init(&MfNetConfig::tiny()).unwrap();
    assert!(weights
        .fuse(&pattern(16, 16, 0.0), &pattern(16, 15, 0.0))
        .is_err());
}

#[test]
fn loss_gradient_reaches_every_layer() {
    let mut weights = MfNetWeights::init(&MfNetConfig::tiny()).unwrap();
    let x1 = pattern(16, 16, 0.0);
    let x2 = pattern(16, 16, 2.1);
    let (t1, t2) = (
        Image::stack::<f32>(&[&x1]).unwrap(),
        Image::stack::<f32>(&[&x2]).unwrap(),
    );
    let mut g = Graph::<f32>::new();
    let a = g.constant(t1.clone()).unwrap();
    let b = g.constant(t2.clone()).unwrap();
    let (out, vars) = weights.forward(&mut g, a, b).unwrap();
    let loss = ssim::fusion_loss(&mut g, &t1, &t2, out, &SsimConstants::default()).unwrap();
    g.backward(loss).unwrap();
    weights.accumulate_grads(&g, &vars);
    for (name, p) in weights.params() {
        if name.ends_with(".weight") {
            let g = p.grad().expect("gradient present");
            assert!(g.iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }
    weights.zero_grad();
    assert!(weights
        .params()
        .iter()
        .all(|(_, p)| p.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0))));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        MfNetConfig {
            channels: 0,
            ..MfNetConfig::tiny()
        },
        MfNetConfig {
            d3: 0,
            ..MfNetConfig::tiny()
        },
        MfNetConfig {
            lrelu_slope: 1.5,
            ..MfNetConfig::tiny()
        },
    ] {
        assert!(MfNetWeights::init(&cfg).is_err(), "{cfg:?}");
    }
}
