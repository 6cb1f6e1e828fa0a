use proptest::prelude::*;

use s2h_core::data::{gen_synthetic, SyntheticKind};
use s2h_core::graph::{GroupSpec, InputSpec, LayerKind, LayerSpec};
use s2h_core::nn::cross_entropy;
use s2h_core::pruner::{train_supervised, GradientToggles, Trainer};
use s2h_core::{grad_check, ForwardMode, ModelGraph, ModelSpec, PruneRunConfig, Tensor};

/// conv(a) -> relu -> conv(a) + skip -> relu -> conv(b) -> flatten -> linear.
fn residual_cnn() -> ModelSpec {
    let group = |id: &str, channels, fixed| GroupSpec {
        id: id.into(),
        channels,
        fixed,
    };
    ModelSpec {
        input: InputSpec {
            shape: vec![2, 5, 5],
            group: "in".into(),
        },
        num_classes: 3,
        groups: vec![group("in", 2, true), group("a", 4, false), group("b", 3, false), group("out", 3, true)],
        layers: vec![
            LayerSpec::conv("c1", "a", [3, 3], 1, 1),
            LayerSpec::unary("r1", LayerKind::Relu),
            LayerSpec::conv("c2", "a", [3, 3], 1, 1),
            LayerSpec::unary("add", LayerKind::Add).with_inputs(&["c2", "r1"]),
            LayerSpec::unary("r2", LayerKind::Relu),
            LayerSpec::conv("c3", "b", [3, 3], 2, 0),
            LayerSpec::unary("flat", LayerKind::Flatten),
            LayerSpec::linear("fc", "out"),
        ],
    }
}

fn inputs(rows: usize, per: usize, seed: u64) -> Tensor {
    let v = (0..rows * per).map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0) - 1.0).collect();
    Tensor::new(vec![rows, per], v).unwrap()
}

#[test]
fn soft_forward_gradient_wrt_mask_logits_matches_finite_differences() {
    let spec = residual_cnn();
    let g = ModelGraph::new(spec, 4).unwrap();
    let x = inputs(3, 50, 1).reshape(vec![3, 2, 5, 5]).unwrap();
    let labels = [0, 2, 1];
    for slot in 0..2 {
        let u0 = Tensor::vector(g.logits()[slot].iter().enumerate().map(|(i, _)| 0.3 * i as f64 - 0.4).collect());
        let report = grad_check(
            |tape, u| {
                let mut bound = g.bind_constants(tape);
                bound.logits[slot] = u;
                let xv = tape.constant(x.clone());
                let y = g.forward(tape, &bound, xv, ForwardMode::Soft)?;
                cross_entropy(tape, y, &labels, 0.0)
            },
            &u0,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "group {slot}: {}", report.max_rel_error);
    }
}

#[test]
fn trainer_without_gap_and_resource_terms_is_plain_supervised_training() {
    let data = gen_synthetic(SyntheticKind::Blobs, 400, 3, 0.6, 2).unwrap();
    let spec = ModelSpec::mlp(2, &[8, 8], 3);
    let cfg = PruneRunConfig {
        target: 0.5,
        beta: 1.0,
        epochs: 3,
        batch_size: 32,
        seed: 2,
        toggles: GradientToggles {
            g_l_theta: true,
            g_g_hard_theta: false,
            g_g_soft_theta: false,
            g_l_u: false,
            g_g_u: false,
            g_r_u: false,
        },
        ..Default::default()
    };
    let mut g = ModelGraph::new(spec.clone(), cfg.seed).unwrap();
    for id in ["h1", "h2"] {
        g.group_mut(id).unwrap().force_binary_prefix(8).unwrap();
    }
    let mut t = Trainer::new(cfg.clone(), g).unwrap();
    t.run(&data.train, &data.val, |_| Ok(())).unwrap();

    let mut plain = ModelGraph::new(spec, cfg.seed).unwrap();
    let losses = train_supervised(&mut plain, &data.train, &cfg).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(t.epoch_losses()), bits(&losses));
    assert_eq!(t.graph().theta(), plain.theta());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn binary_prefixes_make_soft_hard_and_compact_agree(ka in 1usize..=4, kb in 1usize..=3, seed in 0u64..1000) {
        let mut g = ModelGraph::new(residual_cnn(), seed).unwrap();
        g.group_mut("a").unwrap().force_binary_prefix(ka).unwrap();
        g.group_mut("b").unwrap().force_binary_prefix(kb).unwrap();
        let x = inputs(4, 50, seed).reshape(vec![4, 2, 5, 5]).unwrap();
        let soft = g.logits_for(&x, ForwardMode::Soft).unwrap();
        let hard = g.logits_for(&x, ForwardMode::Hard).unwrap();
        let compact = g.export_compact().unwrap();
        prop_assert!(soft.max_abs_diff(&hard) <= 1e-12);
        prop_assert!(hard.max_abs_diff(&compact.logits_for(&x).unwrap()) <= 1e-12);
        prop_assert_eq!(compact.flops(), g.compute_flops(ForwardMode::Hard));
    }

    #[test]
    fn hard_mask_is_a_nonempty_prefix(u in proptest::collection::vec(-4.0f64..4.0, 4)) {
        let mut g = ModelGraph::new(residual_cnn(), 0).unwrap();
        g.load_logits(vec![u, vec![0.0; 3]]).unwrap();
        g.refresh_masks();
        let a = g.group("a").unwrap();
        let m = a.binary_mask();
        prop_assert!(a.kept() >= 1);
        prop_assert!(m.iter().take(a.kept()).all(|&b| b) && m.iter().skip(a.kept()).all(|&b| !b));
        let soft = g.flops_ratio(ForwardMode::Soft);
        prop_assert!(soft > 0.0 && soft <= 1.0 + 1e-12);
    }
}
