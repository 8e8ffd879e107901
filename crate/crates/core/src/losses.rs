//! Segmentation and boundary losses as fused tape operations.
//!
//! Each loss is recorded as a single custom node whose value and gradient are
//! accumulated in `f64` regardless of the tape precision.

use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::pbe::{PbeOutput, STAGES};
use crate::tensor::{Scalar, Tensor};

/// Probability clamp applied inside the BCE logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// BCE weight inside the segmentation loss.
    pub lambda1: f64,
    /// Boundary loss weight.
    pub lambda2: f64,
    /// Dice smoothing term.
    pub smooth_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.7,
            smooth_eps: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda1) || !ok(self.lambda2) || !ok(self.smooth_eps) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

fn check_target<T: Scalar>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            op,
            "target",
            format!("{:?}", pred.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    Ok(())
}

/// Rows of a tensor along its leading axis (one per image).
fn rows(shape: &[usize]) -> (usize, usize) {
    let n = shape[0];
    (n, shape.iter().product::<usize>() / n)
}

struct DiceOp<T> {
    target: Tensor<T>,
    eps: f64,
}

fn dice_terms<T: Scalar>(p: &[T], y: &[T]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sq = 0.0;
    for (&p, &y) in p.iter().zip(y) {
        let (p, y) = (p.to_f64_lossy(), y.to_f64_lossy());
        inter += p * y;
        sq += p * p + y * y;
    }
    (inter, sq)
}

impl<T: Scalar> CustomOp<T> for DiceOp<T> {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let p = inputs[0];
        let (n, len) = rows(p.shape());
        let up = grad_out[0].to_f64_lossy() / n as f64;
        let mut grad = Vec::with_capacity(p.numel());
        for (pr, yr) in p.data().chunks(len).zip(self.target.data().chunks(len)) {
            let (inter, sq) = dice_terms(pr, yr);
            let num = 2.0 * inter + self.eps;
            let den = sq + self.eps;
            for (&pv, &yv) in pr.iter().zip(yr) {
                let (pv, yv) = (pv.to_f64_lossy(), yv.to_f64_lossy());
                let d = -(2.0 * yv * den - num * 2.0 * pv) / (den * den);
                grad.push(T::from_f64_lossy(up * d));
            }
        }
        vec![Some(grad)]
    }
}

/// `1 − (2Σŷy + ε)/(Σŷ² + Σy² + ε)` per image, averaged over the batch.
pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, y_hat: Var, y: &Tensor<T>, eps: f64) -> Result<Var> {
    let p = tape.value(y_hat);
    check_target("dice_loss", p, y)?;
    let (n, len) = rows(p.shape());
    let total: f64 = p
        .data()
        .chunks(len)
        .zip(y.data().chunks(len))
        .map(|(pr, yr)| {
            let (inter, sq) = dice_terms(pr, yr);
            1.0 - (2.0 * inter + eps) / (sq + eps)
        })
        .sum();
    let value = Tensor::scalar(T::from_f64_lossy(total / n as f64));
    let rule = DiceOp { target: y.clone(), eps };
    Ok(tape.custom(&[y_hat], value, Box::new(rule)))
}

struct BceOp<T> {
    target: Tensor<T>,
}

fn bce_value(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

impl<T: Scalar> CustomOp<T> for BceOp<T> {
    fn name(&self) -> &'static str {
        "bce_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let p = inputs[0];
        let up = grad_out[0].to_f64_lossy() / p.numel() as f64;
        let grad = p
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&pv, &yv)| {
                let (pv, yv) = (pv.to_f64_lossy(), yv.to_f64_lossy());
                if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pv) {
                    return T::zero();
                }
                T::from_f64_lossy(up * ((1.0 - yv) / (1.0 - pv) - yv / pv))
            })
            .collect();
        vec![Some(grad)]
    }
}

/// Binary cross-entropy averaged over every pixel of the batch, with
/// probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, y_hat: Var, y: &Tensor<T>) -> Result<Var> {
    let p = tape.value(y_hat);
    check_target("bce_loss", p, y)?;
    let total: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| bce_value(p.to_f64_lossy(), y.to_f64_lossy()))
        .sum();
    let value = Tensor::scalar(T::from_f64_lossy(total / p.numel() as f64));
    Ok(tape.custom(&[y_hat], value, Box::new(BceOp { target: y.clone() })))
}

/// Mean over the four stage maps of the BCE between each map, bilinearly
/// resized to the target resolution, and the boundary target.
pub fn boundary_loss<T: Scalar>(tape: &mut Tape<T>, maps: &[Var], b_gt: &Tensor<T>) -> Result<Var> {
    if maps.len() != STAGES {
        return Err(Error::invalid(
            "boundary_loss",
            format!("expected {STAGES} stage maps, got {}", maps.len()),
        ));
    }
    let [_, _, h, w] = b_gt.dims4("boundary_loss")?;
    let mut acc: Option<Var> = None;
    for &m in maps {
        let up = tape.upsample_bilinear(m, h, w)?;
        let l = bce_loss(tape, up, b_gt)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    let sum = acc.expect("four maps");
    Ok(tape.scale(sum, T::from_f64_lossy(1.0 / STAGES as f64)))
}

/// Handles and values of the loss terms of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub dice: f64,
    pub bce: f64,
    /// Absent when the network has no boundary heads.
    pub boundary: Option<f64>,
}

/// `dice + λ1·bce + λ2·boundary`. The boundary term is omitted when the
/// network produced no boundary maps or when `λ2 = 0`.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &PbeOutput,
    y: &Tensor<T>,
    b_gt: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossParts> {
    w.validate()?;
    let dice = dice_loss(tape, out.mask_prob, y, w.smooth_eps)?;
    let bce = bce_loss(tape, out.mask_prob, y)?;
    let weighted = tape.scale(bce, T::from_f64_lossy(w.lambda1));
    let mut total = tape.add(dice, weighted)?;
    let mut boundary = None;
    if !out.boundary_probs.is_empty() {
        let b = boundary_loss(tape, &out.boundary_probs, b_gt)?;
        boundary = Some(scalar_of(tape, b));
        if w.lambda2 != 0.0 {
            let weighted = tape.scale(b, T::from_f64_lossy(w.lambda2));
            total = tape.add(total, weighted)?;
        }
    }
    Ok(LossParts {
        total,
        dice: scalar_of(tape, dice),
        bce: scalar_of(tape, bce),
        boundary,
    })
}

pub fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).data()[0].to_f64_lossy()
}
