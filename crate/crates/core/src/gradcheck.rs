//! Central finite-difference verification of tape gradients in `f64`.

use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{bce_loss, boundary_loss, dice_loss, total_loss, LossWeights};
use crate::nn::{Cbr, Eca, Graph, Module, ModuleParams};
use crate::ops::conv::Conv2dParams;
use crate::ops::norm::BnConfig;
use crate::pbe::{BoundaryDetection, Fusion, FusionMode, PbeConfig, PbeNet, Saam, STAGES};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that two near-zero
/// gradients are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Probes whose ±step crossed a non-smooth point (ReLU kink, pooling tie).
    pub skipped: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= TOLERANCE
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic and numeric gradients of the scalar built by `f`.
///
/// `f` records a forward pass on a fresh tape, given one leaf per entry of
/// `inputs` (all requiring grad), and returns the scalar root. At most
/// `max_probes` coordinates per input are probed, chosen with `seed`.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], max_probes: usize, seed: u64, mut f: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |vals: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = f(&mut tape, &vars)?;
        Ok((tape, vars, root))
    };

    let (mut tape, vars, root) = eval(inputs)?;
    let base_sig = tape.nonsmooth_signature();
    tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut rng = SplitMix64::new(seed);
    let mut report = GradcheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let probes: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            (0..max_probes).map(|_| rng.below(n)).collect()
        };
        for idx in probes {
            let orig = input.data()[idx];
            let mut side = |delta: f64| -> Result<(f64, u64)> {
                work[ti].data_mut()[idx] = orig + delta;
                let (t, _, r) = eval(&work)?;
                Ok((t.value(r).data()[0], t.nonsmooth_signature()))
            };
            let (plus, sig_p) = side(STEP)?;
            let (minus, sig_m) = side(-STEP)?;
            work[ti].data_mut()[idx] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = rel_error(analytic[ti].data()[idx], numeric);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("{name}: gradient of input {ti}[{idx}]")));
            }
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Random `N(0, 1)` tensor.
pub fn randn(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal()).expect("valid shape")
}

/// Adds `Σ r ⊙ y` for a fixed random `r` so every output element gets a
/// distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::new(seed);
    let r = randn(tape.value(y).shape(), &mut rng);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Gradcheck of a parameterized block with respect to its inputs and every
/// learnable parameter. `f` maps the input leaves to an output tensor, which
/// is reduced by [`weighted_sum`]. Each evaluation starts from a fresh copy
/// of `params`, so batch-norm running statistics never leak between probes.
pub fn check_module<F>(
    name: &str,
    params: &ModuleParams<f64>,
    inputs: &[Tensor<f64>],
    training: bool,
    max_probes: usize,
    seed: u64,
    mut f: F,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let learnable: Vec<String> = params.learnable().map(|e| e.name.clone()).collect();
    let k = inputs.len();
    let mut all = inputs.to_vec();
    for n in &learnable {
        all.push(params.get(n)?.clone());
    }
    check(name, &all, max_probes, seed, |tape, vars| {
        let mut p = params.clone();
        let mut g = Graph::with_tape(std::mem::take(tape), &mut p, training);
        let mut run = || -> Result<Var> {
            for (n, &v) in learnable.iter().zip(&vars[k..]) {
                g.bind_param(n, v)?;
            }
            f(&mut g, &vars[..k])
        };
        let y = run();
        *tape = g.into_tape();
        weighted_sum(tape, y?, seed ^ 0x9e37_79b9)
    })
}

fn binary_target(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| f64::from(u8::from(rng.next_f64() < 0.4))).expect("valid shape")
}

fn init_module<M: Module>(m: &M, seed: u64) -> Result<ModuleParams<f64>> {
    let mut p = ModuleParams::new();
    m.init(&mut p, seed)?;
    Ok(p)
}

/// The full battery: every differentiable tape operation, every composite
/// block and the full network at 32×32 under the total loss.
pub fn suite() -> Result<Vec<GradcheckReport>> {
    let mut rng = SplitMix64::new(0x5eed);
    let mut out = Vec::new();

    let convs = [
        (
            "conv2d",
            [2, 4, 5, 6],
            [6, 2, 3, 3],
            Conv2dParams {
                stride: 1,
                pad: 1,
                dilation: 1,
                groups: 2,
            },
        ),
        (
            "conv2d_strided_dilated",
            [1, 3, 6, 5],
            [2, 3, 3, 3],
            Conv2dParams {
                stride: 2,
                pad: 2,
                dilation: 2,
                groups: 1,
            },
        ),
        (
            "conv2d_depthwise",
            [2, 3, 6, 6],
            [3, 1, 3, 3],
            Conv2dParams {
                stride: 1,
                pad: 3,
                dilation: 3,
                groups: 3,
            },
        ),
        ("conv2d_1x1", [1, 2, 4, 4], [3, 2, 1, 1], Conv2dParams::default()),
    ];
    for (i, (name, xs, ws, p)) in convs.into_iter().enumerate() {
        let inputs = [randn(&xs, &mut rng), randn(&ws, &mut rng), randn(&[ws[0]], &mut rng)];
        out.push(check(name, &inputs, 40, i as u64, |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), p)?;
            weighted_sum(t, y, 99)
        })?);
    }

    for training in [true, false] {
        let inputs = [
            randn(&[3, 2, 3, 2], &mut rng),
            randn(&[2], &mut rng),
            randn(&[2], &mut rng),
        ];
        let cfg = BnConfig {
            training,
            ..Default::default()
        };
        let name = if training {
            "batchnorm2d_train"
        } else {
            "batchnorm2d_eval"
        };
        out.push(check(name, &inputs, 50, 1, |t, v| {
            let (mut rm, mut rv) = (vec![0.1, -0.2], vec![0.8, 1.3]);
            let y = t.batchnorm2d(v[0], v[1], v[2], &mut rm, &mut rv, cfg)?;
            weighted_sum(t, y, 7)
        })?);
    }

    let x = randn(&[2, 3, 2, 2], &mut rng);
    for (name, kind) in [("relu", Activation::Relu), ("sigmoid", Activation::Sigmoid)] {
        out.push(check(name, std::slice::from_ref(&x), 100, 1, |t, v| {
            let y = t.activation(v[0], kind);
            weighted_sum(t, y, 3)
        })?);
    }

    let inputs = [
        randn(&[2, 3], &mut rng),
        randn(&[2, 3], &mut rng),
        randn(&[1], &mut rng),
    ];
    out.push(check("add/mul/scale/sum", &inputs, 100, 1, |t, v| {
        let p = t.mul(v[0], v[1])?;
        let q = t.add(p, v[0])?;
        let r = t.mul(q, v[2])?;
        let s = t.add(v[2], r)?;
        let s = t.scale(s, 0.75);
        weighted_sum(t, s, 5)
    })?);

    let inputs = [
        randn(&[2, 3, 2, 3], &mut rng),
        randn(&[2, 2, 2, 3], &mut rng),
        randn(&[2, 1, 2, 3], &mut rng),
    ];
    out.push(check("concat/split/expand", &inputs, 100, 1, |t, v| {
        let c = t.concat_channels(&[v[0], v[1]])?;
        let parts = t.split_channels(c, &[1, 3, 1])?;
        let e = t.expand_channels(v[2], 3)?;
        let m = t.mul(parts[1], e)?;
        let a = weighted_sum(t, m, 1)?;
        let b = weighted_sum(t, parts[2], 2)?;
        t.add(a, b)
    })?);

    let inputs = [randn(&[2, 2, 4, 6], &mut rng)];
    out.push(check("maxpool2x2", &inputs, 100, 1, |t, v| {
        let y = t.maxpool2x2(v[0])?;
        weighted_sum(t, y, 4)
    })?);
    let inputs = [randn(&[1, 2, 3, 5], &mut rng)];
    for (oh, ow) in [(6, 10), (7, 4), (2, 2)] {
        out.push(check(
            &format!("upsample_bilinear_{oh}x{ow}"),
            &inputs,
            100,
            1,
            |t, v| {
                let y = t.upsample_bilinear(v[0], oh, ow)?;
                weighted_sum(t, y, 4)
            },
        )?);
    }
    out.push(check("global_avg_pool", &inputs, 100, 1, |t, v| {
        let y = t.global_avg_pool(v[0])?;
        weighted_sum(t, y, 4)
    })?);

    let inputs = [
        randn(&[2, 5, 1, 1], &mut rng),
        randn(&[3], &mut rng),
        randn(&[2, 5, 2, 3], &mut rng),
    ];
    out.push(check("conv1d_channels/scale_channels", &inputs, 100, 1, |t, v| {
        let y = t.conv1d_channels(v[0], v[1])?;
        let s = t.sigmoid(y);
        let z = t.scale_channels(v[2], s)?;
        weighted_sum(t, z, 6)
    })?);

    let y = binary_target(&[2, 1, 5, 5], &mut rng);
    let logits = randn(&[2, 1, 5, 5], &mut rng);
    out.push(check("dice_loss", std::slice::from_ref(&logits), 50, 1, |t, v| {
        let p = t.sigmoid(v[0]);
        dice_loss(t, p, &y, LossWeights::default().smooth_eps)
    })?);
    out.push(check("bce_loss", &[logits], 50, 2, |t, v| {
        let p = t.sigmoid(v[0]);
        bce_loss(t, p, &y)
    })?);
    let b = binary_target(&[1, 1, 8, 8], &mut rng);
    let maps: Vec<Tensor<f64>> = (0..STAGES).map(|k| randn(&[1, 1, 1 << k, 1 << k], &mut rng)).collect();
    out.push(check("boundary_loss", &maps, 20, 3, |t, v| {
        let maps: Vec<Var> = v.iter().map(|&m| t.sigmoid(m)).collect();
        boundary_loss(t, &maps, &b)
    })?);

    let cbr = Cbr::new("cbr", 3, 4, 3);
    let p = init_module(&cbr, 1)?;
    let x = randn(&[2, 3, 4, 4], &mut rng);
    out.push(check_module("cbr", &p, &[x], true, 24, 9, |g, v| cbr.forward(g, v[0]))?);

    let eca = Eca::new("eca", 8);
    let p = init_module(&eca, 2)?;
    let x = randn(&[2, 8, 3, 3], &mut rng);
    out.push(check_module("eca", &p, &[x], true, 24, 10, |g, v| {
        eca.forward(g, v[0])
    })?);

    let bd = BoundaryDetection::new("bd", 2);
    let p = init_module(&bd, 3)?;
    let x = randn(&[2, 2, 4, 4], &mut rng);
    out.push(check_module("bd", &p, &[x], true, 16, 1, |g, v| bd.forward(g, v[0]))?);

    for mode in FusionMode::ALL {
        let fusion = Fusion::new("fusion", mode, 2);
        let p = init_module(&fusion, 5)?;
        let f = randn(&[2, 2, 4, 4], &mut rng);
        let b = randn(&[2, 1, 4, 4], &mut rng);
        let name = format!("fusion_{}", mode.as_str());
        out.push(check_module(&name, &p, &[f, b], true, 8, 2, |g, v| {
            fusion.forward(g, v[0], v[1])
        })?);
    }

    let saam = Saam::new("saam", 8, 4, [1, 2, 3, 4]);
    let p = init_module(&saam, 9)?;
    let x = randn(&[2, 8, 5, 5], &mut rng);
    out.push(check_module("saam", &p, &[x], true, 8, 3, |g, v| {
        saam.forward(g, v[0])
    })?);

    let net = PbeNet::new(PbeConfig {
        base_channels: 8,
        ..PbeConfig::default()
    })?;
    let p: ModuleParams<f64> = net.init_params(4)?;
    let x = randn(&[2, 1, 32, 32], &mut rng);
    let y = binary_target(&[2, 1, 32, 32], &mut rng);
    let b = binary_target(&[2, 1, 32, 32], &mut rng);
    let weights = LossWeights::default();
    out.push(check_module("pbe_net_total_loss", &p, &[x], true, 2, 11, |g, v| {
        let o = net.forward(g, v[0])?;
        Ok(total_loss(&mut g.tape, &o, &y, &b, &weights)?.total)
    })?);
    Ok(out)
}
