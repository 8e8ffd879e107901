use pbe_core::gradcheck::{self, randn};
use pbe_core::nn::{
    eca_kernel_size, init_params, kaiming_bound, BlockKind, BlockSpec, Cbr, DecoderBlock, Eca, EncoderBlock, Graph,
    Module, ModuleParams,
};
use pbe_core::rng::SplitMix64;
use pbe_core::Tensor;

fn cbr_params(in_ch: usize, out_ch: usize, seed: u64) -> (Cbr, ModuleParams<f64>) {
    let cbr = Cbr::new("cbr", in_ch, out_ch, 3);
    let mut p = ModuleParams::new();
    cbr.init(&mut p, seed).unwrap();
    (cbr, p)
}

#[test]
fn cbr3x3_shapes() {
    let p: ModuleParams<f32> = init_params(&BlockSpec::new(BlockKind::Cbr3x3, 4, 8), 1).unwrap();
    assert_eq!(p.get("block.conv.weight").unwrap().shape(), &[8, 4, 3, 3]);
    assert_eq!(p.get("block.bn.gamma").unwrap().shape(), &[8]);
    assert_eq!(p.get("block.bn.beta").unwrap().shape(), &[8]);
    assert!(p.get("block.conv.bias").is_err());
    assert!(p.get("block.bn.gamma").unwrap().data().iter().all(|&v| v == 1.0));
    assert!(p.get("block.bn.running_var").unwrap().data().iter().all(|&v| v == 1.0));
    assert!(!p.entries()[p.position("block.bn.running_mean").unwrap()].learnable);
}

#[test]
fn init_is_deterministic_and_bounded() {
    let spec = BlockSpec::new(BlockKind::Cbr3x3, 4, 8);
    let a: ModuleParams<f64> = init_params(&spec, 42).unwrap();
    let b: ModuleParams<f64> = init_params(&spec, 42).unwrap();
    let c: ModuleParams<f64> = init_params(&spec, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let bound = kaiming_bound(36);
    assert!((bound - 0.408_248_290_463_863).abs() < 1e-12);
    let w = a.get("block.conv.weight").unwrap();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
}

#[test]
fn depthwise_specs_require_equal_channels() {
    assert!(BlockSpec::new(BlockKind::Dw3x3, 4, 8).build("x").is_err());
    assert!(BlockSpec::new(BlockKind::DwDilated(2), 4, 4).build("x").is_ok());
    assert!(BlockSpec::new(BlockKind::Eca, 4, 5).build("x").is_err());
}

#[test]
fn cbr_preserves_spatial_dims_and_is_nonnegative() {
    let (cbr, mut p) = cbr_params(3, 5, 7);
    let mut rng = SplitMix64::new(3);
    let x = randn(&[2, 3, 6, 7], &mut rng);
    let mut g = Graph::new(&mut p, true);
    let xv = g.input(x);
    let y = cbr.forward(&mut g, xv).unwrap();
    let out = g.tape.value(y);
    assert_eq!(out.shape(), &[2, 5, 6, 7]);
    assert!(out.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn cbr_channel_mismatch_errors() {
    let (cbr, mut p) = cbr_params(3, 5, 7);
    let mut g = Graph::new(&mut p, true);
    let xv = g.input(Tensor::zeros(&[1, 4, 4, 4]).unwrap());
    assert!(cbr.forward(&mut g, xv).is_err());
}

#[test]
fn cbr_gradcheck() {
    let (cbr, p) = cbr_params(2, 3, 11);
    let mut rng = SplitMix64::new(5);
    let x = randn(&[2, 2, 4, 4], &mut rng);
    let r = gradcheck::check_module("cbr", &p, &[x], true, 24, 9, |g, v| cbr.forward(g, v[0])).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn eca_kernel_sizes() {
    assert_eq!(eca_kernel_size(64), 3);
    assert_eq!(eca_kernel_size(1), 3);
    assert_eq!(eca_kernel_size(128), 5);
    assert_eq!(eca_kernel_size(256), 5);
}

fn eca_run(x: Tensor<f64>, zero_weight: bool) -> Tensor<f64> {
    let c = x.shape()[1];
    let eca = Eca::new("eca", c);
    let mut p = ModuleParams::new();
    eca.init(&mut p, 1).unwrap();
    if zero_weight {
        p.get_mut(&eca.weight_name()).unwrap().data_mut().fill(0.0);
    }
    let mut g = Graph::new(&mut p, true);
    let xv = g.input(x);
    let y = eca.forward(&mut g, xv).unwrap();
    g.tape.value(y).clone()
}

#[test]
fn eca_zero_weight_halves_input() {
    let mut rng = SplitMix64::new(8);
    let x = randn(&[2, 6, 3, 3], &mut rng);
    let y = eca_run(x.clone(), true);
    for (a, b) in x.data().iter().zip(y.data()) {
        assert_eq!(*b, a / 2.0);
    }
}

#[test]
fn eca_zero_input_gives_zero() {
    let y = eca_run(Tensor::zeros(&[1, 4, 3, 3]).unwrap(), false);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn eca_scales_each_channel_inside_unit_interval() {
    let mut rng = SplitMix64::new(21);
    let x = randn(&[1, 8, 4, 4], &mut rng).map(|v| v + 3.0);
    let y = eca_run(x.clone(), false);
    for ch in 0..8 {
        let r: Vec<f64> = (0..16).map(|i| y.data()[ch * 16 + i] / x.data()[ch * 16 + i]).collect();
        assert!(r[0] > 0.0 && r[0] < 1.0);
        assert!(r.iter().all(|v| (v - r[0]).abs() < 1e-12));
    }
}

#[test]
fn encoder_ladder_reaches_16x16_bottleneck() {
    let chans = [1, 16, 32, 64, 128];
    let blocks: Vec<EncoderBlock> = (0..4)
        .map(|i| EncoderBlock::new(&format!("enc{i}"), chans[i], chans[i + 1]))
        .collect();
    let bottleneck = EncoderBlock::new("bottleneck", 128, 256);
    let mut p: ModuleParams<f32> = ModuleParams::new();
    for b in &blocks {
        b.init(&mut p, 0).unwrap();
    }
    bottleneck.init(&mut p, 0).unwrap();
    let dec = DecoderBlock::new("dec", 256, 128, 128);
    dec.init(&mut p, 0).unwrap();

    let mut g = Graph::new(&mut p, false);
    let mut x = g.input(Tensor::full(&[1, 1, 256, 256], 0.5).unwrap());
    let mut skips = Vec::new();
    for b in &blocks {
        let f = b.forward(&mut g, x).unwrap();
        skips.push(f);
        x = g.tape.maxpool2x2(f).unwrap();
    }
    let bott = bottleneck.forward(&mut g, x).unwrap();
    assert_eq!(g.tape.value(bott).shape(), &[1, 256, 16, 16]);
    let skip = skips[3];
    let d = dec.forward(&mut g, bott, skip).unwrap();
    assert_eq!(g.tape.value(d).shape(), &[1, 128, 32, 32]);
    assert_eq!(g.tape.value(d).shape()[2..], g.tape.value(skip).shape()[2..]);
}

#[test]
fn block_flops_match_tape_count() {
    for spec in [
        BlockSpec::new(BlockKind::Cbr3x3, 3, 6),
        BlockSpec::new(BlockKind::DwDilated(3), 4, 4),
        BlockSpec::new(BlockKind::Conv1x1, 4, 2),
        BlockSpec::new(BlockKind::Eca, 8, 8),
        BlockSpec::new(BlockKind::EncoderBlock, 2, 4),
    ] {
        let block = spec.build("block").unwrap();
        let mut p: ModuleParams<f32> = init_params(&spec, 0).unwrap();
        let mut g = Graph::new(&mut p, false);
        let x = g.input(Tensor::zeros(&[1, spec.in_ch, 8, 8]).unwrap());
        block.forward(&mut g, &[x]).unwrap();
        assert_eq!(g.tape.flop_count(), block.flops(8, 8), "{spec:?}");
    }
}
