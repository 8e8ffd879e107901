use pbe_core::gradcheck::{self, randn};
use pbe_core::nn::{Conv, Graph, Module, ModuleParams};
use pbe_core::pbe::{count_params_flops, BoundaryDetection, Fusion, FusionMode, PbeConfig, PbeNet, Saam};
use pbe_core::rng::SplitMix64;
use pbe_core::Tensor;

/// Every kernel set to ones, biases to zero, BN left at its identity init.
fn all_ones_kernels(p: &mut ModuleParams<f64>) {
    for e in p.entries_mut() {
        if e.name.ends_with(".weight") {
            e.tensor.data_mut().fill(1.0);
        } else if e.name.ends_with(".bias") {
            e.tensor.data_mut().fill(0.0);
        }
    }
}

fn impulse(c: usize, size: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[1, c, size, size]).unwrap();
    t.data_mut()[(size / 2) * size + size / 2] = 1.0;
    t
}

/// Bounding box of the nonzero entries of channel 0: (rows, cols, centre).
fn support(t: &Tensor<f64>) -> (usize, usize, (usize, usize)) {
    let [_, _, h, w] = t.dims4("support").unwrap();
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0, w, 0);
    for r in 0..h {
        for c in 0..w {
            if t.data()[r * w + c] != 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    (r1 - r0 + 1, c1 - c0 + 1, ((r0 + r1) / 2, (c0 + c1) / 2))
}

fn init<M: Module>(m: &M, seed: u64) -> ModuleParams<f64> {
    let mut p = ModuleParams::new();
    m.init(&mut p, seed).unwrap();
    p
}

#[test]
fn bd_output_is_a_probability_map() {
    let bd = BoundaryDetection::new("bd", 3);
    let mut p = init(&bd, 1);
    let mut rng = SplitMix64::new(2);
    let mut g = Graph::new(&mut p, true);
    let x = g.input(randn(&[2, 3, 5, 5], &mut rng));
    let b = bd.forward(&mut g, x).unwrap();
    let v = g.tape.value(b);
    assert_eq!(v.shape(), &[2, 1, 5, 5]);
    assert!(v.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn bd_zero_head_gives_half() {
    let bd = BoundaryDetection::new("bd", 3);
    let mut p = init(&bd, 1);
    p.get_mut("bd.out.weight").unwrap().data_mut().fill(0.0);
    let mut rng = SplitMix64::new(2);
    let mut g = Graph::new(&mut p, true);
    let x = g.input(randn(&[1, 3, 4, 4], &mut rng));
    let b = bd.forward(&mut g, x).unwrap();
    assert!(g.tape.value(b).data().iter().all(|&v| v == 0.5));
}

#[test]
fn bd_gradcheck() {
    let bd = BoundaryDetection::new("bd", 2);
    let p = init(&bd, 3);
    let x = randn(&[2, 2, 4, 4], &mut SplitMix64::new(4));
    let r = gradcheck::check_module("bd", &p, &[x], true, 16, 1, |g, v| bd.forward(g, v[0])).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn bgfe_output_shape_and_modes() {
    let mut rng = SplitMix64::new(6);
    let f = randn(&[2, 4, 6, 6], &mut rng);
    let b = randn(&[2, 1, 6, 6], &mut rng).map(|v| 1.0 / (1.0 + (-v).exp()));
    for mode in [
        FusionMode::Bgfe,
        FusionMode::Add,
        FusionMode::Multiply,
        FusionMode::Concat,
    ] {
        let fusion = Fusion::new("bgfe", mode, 4);
        let mut p = init(&fusion, 1);
        let mut g = Graph::new(&mut p, true);
        let fv = g.input(f.clone());
        let bv = g.input(b.clone());
        let y = fusion.forward(&mut g, fv, bv).unwrap();
        let out = g.tape.value(y).clone();
        assert_eq!(out.shape(), f.shape(), "{mode:?}");
        assert!(out.is_finite());
        if mode == FusionMode::Multiply {
            for i in 0..2 {
                for c in 0..4 {
                    for px in 0..36 {
                        let fi = (i * 4 + c) * 36 + px;
                        assert_eq!(out.data()[fi], f.data()[fi] * b.data()[i * 36 + px]);
                    }
                }
            }
        }
    }
}

#[test]
fn bgfe_rejects_mismatched_boundary() {
    let fusion = Fusion::new("bgfe", FusionMode::Bgfe, 4);
    let mut p = init(&fusion, 1);
    let mut g = Graph::new(&mut p, true);
    let fv = g.input(Tensor::zeros(&[1, 4, 6, 6]).unwrap());
    let bv = g.input(Tensor::zeros(&[1, 1, 4, 4]).unwrap());
    assert!(fusion.forward(&mut g, fv, bv).is_err());
}

#[test]
fn bgfe_attention_impulse_support_is_9x9() {
    let fusion = Fusion::new("bgfe", FusionMode::Bgfe, 3);
    let mut p = init(&fusion, 1);
    all_ones_kernels(&mut p);
    let mut g = Graph::new(&mut p, false);
    let fv = g.input(Tensor::zeros(&[1, 3, 17, 17]).unwrap());
    let bv = g.input(impulse(1, 17));
    let trace = fusion.forward_traced(&mut g, fv, bv).unwrap();
    let att = g.tape.value(trace.attention.unwrap());
    assert_eq!(support(att), (9, 9, (8, 8)));
}

#[test]
fn bgfe_zero_boundary_is_finite() {
    let fusion = Fusion::new("bgfe", FusionMode::Bgfe, 4);
    let mut p = init(&fusion, 2);
    let mut rng = SplitMix64::new(1);
    let mut g = Graph::new(&mut p, true);
    let fv = g.input(randn(&[2, 4, 5, 5], &mut rng));
    let bv = g.input(Tensor::zeros(&[2, 1, 5, 5]).unwrap());
    let y = fusion.forward(&mut g, fv, bv).unwrap();
    assert!(g.tape.value(y).is_finite());
}

#[test]
fn bgfe_gradcheck() {
    let fusion = Fusion::new("bgfe", FusionMode::Bgfe, 2);
    let p = init(&fusion, 5);
    let mut rng = SplitMix64::new(7);
    let f = randn(&[2, 2, 4, 4], &mut rng);
    let b = randn(&[2, 1, 4, 4], &mut rng);
    let r = gradcheck::check_module("bgfe", &p, &[f, b], true, 8, 2, |g, v| fusion.forward(g, v[0], v[1])).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn saam_shape_and_divisibility() {
    let cfg = PbeConfig::default();
    assert_eq!(cfg.saam_width(16).unwrap(), 8);
    assert!(cfg.saam_width(12).is_err());
    let saam = Saam::new("saam", 8, 4, [1, 2, 3, 4]);
    let mut p = init(&saam, 1);
    let mut g = Graph::new(&mut p, true);
    let x = g.input(randn(&[2, 8, 7, 7], &mut SplitMix64::new(3)));
    let y = saam.forward(&mut g, x).unwrap();
    assert_eq!(g.tape.value(y).shape(), &[2, 8, 7, 7]);
}

#[test]
fn saam_zero_weights_is_identity() {
    let saam = Saam::new("saam", 8, 4, [1, 2, 3, 4]);
    let mut p = init(&saam, 1);
    for e in p.entries_mut() {
        if e.learnable {
            e.tensor.data_mut().fill(0.0);
        }
    }
    let x = randn(&[2, 8, 6, 6], &mut SplitMix64::new(3));
    let mut g = Graph::new(&mut p, true);
    let xv = g.input(x.clone());
    let y = saam.forward(&mut g, xv).unwrap();
    assert_eq!(g.tape.value(y), &x);
}

#[test]
fn saam_branch4_impulse_support_is_21x21() {
    let saam = Saam::new("saam", 8, 4, [1, 2, 3, 4]);
    let mut p = init(&saam, 1);
    all_ones_kernels(&mut p);
    let mut g = Graph::new(&mut p, false);
    let xv = g.input(impulse(8, 31));
    let trace = saam.forward_traced(&mut g, xv).unwrap();
    let b4 = g.tape.value(trace.branches[3]);
    assert_eq!(support(b4), (21, 21, (15, 15)));
    let b1 = g.tape.value(trace.branches[0]);
    assert_eq!(support(b1), (3, 3, (15, 15)));
}

#[test]
fn saam_gradcheck() {
    let saam = Saam::new("saam", 8, 4, [1, 2, 3, 4]);
    let p = init(&saam, 9);
    let x = randn(&[2, 8, 5, 5], &mut SplitMix64::new(10));
    let r = gradcheck::check_module("saam", &p, &[x], true, 8, 3, |g, v| saam.forward(g, v[0])).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn config_validation() {
    assert!(PbeConfig::default().validate().is_ok());
    assert!(PbeConfig::default().with_modules(false, true, true).validate().is_err());
    let cfg = PbeConfig {
        stages: 3,
        ..PbeConfig::default()
    };
    assert!(cfg.validate().is_err());
    let cfg = PbeConfig {
        base_channels: 6,
        ..PbeConfig::default()
    };
    assert!(cfg.validate().is_err());
    assert!(PbeConfig::baseline(6).validate().is_ok());
}

#[test]
fn config_json_rejects_unknown_keys() {
    let cfg: PbeConfig = serde_json::from_str(r#"{"fusion_mode": "concat"}"#).unwrap();
    assert_eq!(cfg.fusion_mode, FusionMode::Concat);
    assert!(serde_json::from_str::<PbeConfig>(r#"{"fusion": "add"}"#).is_err());
}

#[test]
fn full_forward_256_shapes() {
    let net = PbeNet::new(PbeConfig::default()).unwrap();
    let mut p: ModuleParams<f32> = net.init_params(0).unwrap();
    let mut g = Graph::new(&mut p, true);
    let mut rng = SplitMix64::new(1);
    let x = g.input(Tensor::from_fn(&[1, 1, 256, 256], |_| rng.next_f64() as f32).unwrap());
    let out = net.forward(&mut g, x).unwrap();
    assert_eq!(g.tape.value(out.mask_prob).shape(), &[1, 1, 256, 256]);
    assert_eq!(g.tape.value(out.mask_logits).shape(), &[1, 1, 256, 256]);
    let sizes: Vec<usize> = out
        .boundary_probs
        .iter()
        .map(|&b| {
            let s = g.tape.value(b).shape();
            assert_eq!(s[..2], [1, 1]);
            assert_eq!(s[2], s[3]);
            s[2]
        })
        .collect();
    assert_eq!(sizes, vec![32, 64, 128, 256]);
    for &b in &out.boundary_probs {
        assert!(g.tape.value(b).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn forward_rejects_bad_extents() {
    let net = PbeNet::new(PbeConfig::baseline(8)).unwrap();
    let mut p: ModuleParams<f32> = net.init_params(0).unwrap();
    let mut g = Graph::new(&mut p, false);
    let x = g.input(Tensor::zeros(&[1, 1, 24, 32]).unwrap());
    assert!(net.forward(&mut g, x).is_err());
}

fn small_forward(cfg: PbeConfig, image: &Tensor<f32>) -> (Tensor<f32>, usize) {
    let net = PbeNet::new(cfg).unwrap();
    let mut p: ModuleParams<f32> = net.init_params(17).unwrap();
    let mut g = Graph::new(&mut p, true);
    let x = g.input(image.clone());
    let out = net.forward(&mut g, x).unwrap();
    (g.tape.value(out.mask_prob).clone(), out.boundary_probs.len())
}

#[test]
fn bd_only_mask_matches_baseline_bitwise() {
    let mut rng = SplitMix64::new(5);
    let image = Tensor::from_fn(&[2, 1, 32, 32], |_| rng.next_f64() as f32).unwrap();
    let (base, nb) = small_forward(PbeConfig::baseline(8), &image);
    let (bd, nbd) = small_forward(PbeConfig::baseline(8).with_modules(true, false, false), &image);
    assert_eq!(nb, 0);
    assert_eq!(nbd, 4);
    assert_eq!(base, bd);
    let (again, _) = small_forward(PbeConfig::baseline(8), &image);
    assert_eq!(base, again);
}

#[test]
fn forward_is_finite_for_unit_range_inputs() {
    let mut rng = SplitMix64::new(9);
    let image = Tensor::from_fn(&[2, 1, 32, 32], |_| rng.next_f64() as f32).unwrap();
    for mode in [
        FusionMode::Bgfe,
        FusionMode::Add,
        FusionMode::Multiply,
        FusionMode::Concat,
    ] {
        let cfg = PbeConfig {
            base_channels: 8,
            fusion_mode: mode,
            ..PbeConfig::default()
        };
        let (mask, _) = small_forward(cfg, &image);
        assert!(mask.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

fn names(cfg: PbeConfig) -> Vec<String> {
    let p: ModuleParams<f32> = PbeNet::new(cfg).unwrap().init_params(0).unwrap();
    p.names().map(String::from).collect()
}

#[test]
fn ablation_removes_exactly_module_parameters() {
    let full = names(PbeConfig::default());
    let no_saam = names(PbeConfig::default().with_modules(true, true, false));
    let bd_only = names(PbeConfig::default().with_modules(true, false, false));
    let base = names(PbeConfig::baseline(16));
    let strip = |v: &[String], tag: &str| -> Vec<String> { v.iter().filter(|n| !n.contains(tag)).cloned().collect() };
    assert!(full.iter().any(|n| n.contains(".saam.")));
    assert_eq!(strip(&full, ".saam."), no_saam);
    assert_eq!(strip(&no_saam, ".bgfe."), bd_only);
    assert_eq!(strip(&bd_only, ".bd."), base);
    assert!(base.iter().all(|n| n.starts_with("enc")
        || n.starts_with("bottleneck")
        || n.contains(".block.")
        || n.starts_with("head")));
}

#[test]
fn complexity_fixture_conv3x3() {
    let conv = Conv::new("c", 1, 8, 3);
    let p: ModuleParams<f32> = {
        let mut p = ModuleParams::new();
        conv.init(&mut p, 0).unwrap();
        p
    };
    assert_eq!(p.count_learnable(), 80);
    assert_eq!(conv.flops(16, 16), 38_912);
    assert_eq!(conv.flops(32, 32), 4 * 38_912);
}

#[test]
fn default_network_complexity() {
    let (params, flops) = count_params_flops(&PbeConfig::default(), 256, 256).unwrap();
    assert!((1_000_000..=10_000_000).contains(&params), "{params}");
    assert!(flops > 1_000_000_000, "{flops}");
    let (params2, flops2) = count_params_flops(&PbeConfig::default(), 512, 512).unwrap();
    assert_eq!(params, params2);
    let ratio = flops2 as f64 / flops as f64;
    assert!((ratio - 4.0).abs() < 1e-3, "{ratio}");
}

#[test]
fn analytic_flops_match_tape() {
    for cfg in [
        PbeConfig::baseline(8),
        PbeConfig {
            base_channels: 8,
            ..PbeConfig::default()
        },
        PbeConfig {
            base_channels: 8,
            fusion_mode: FusionMode::Add,
            ..PbeConfig::default()
        },
    ] {
        let net = PbeNet::new(cfg).unwrap();
        let mut p: ModuleParams<f32> = net.init_params(0).unwrap();
        let mut g = Graph::new(&mut p, false);
        let x = g.input(Tensor::zeros(&[1, 1, 32, 32]).unwrap());
        net.forward(&mut g, x).unwrap();
        assert_eq!(g.tape.flop_count(), net.flops(32, 32));
    }
}
