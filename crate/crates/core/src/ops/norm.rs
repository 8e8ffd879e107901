//! Per-channel batch normalization over `(N, H, W)`.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnConfig {
    pub training: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            training: true,
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Values kept from the forward pass for the backward rule.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub training: bool,
}

/// Normalizes `x` of shape `dims`, updating running statistics in training
/// mode. Running variance is tracked unbiased; normalization uses the
/// population variance of the batch.
pub fn batchnorm_forward<T: Scalar>(
    x: &[T],
    dims: [usize; 4],
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    cfg: BnConfig,
) -> Result<(Vec<T>, BnSaved<T>)> {
    const OP: &str = "batchnorm2d";
    let [n, c, h, w] = dims;
    for (name, len) in [("gamma", gamma.len()), ("beta", beta.len())] {
        if len != c {
            return Err(Error::shape(OP, name, c, len));
        }
    }
    if cfg.eps.is_nan() || cfg.eps < 0.0 {
        return Err(Error::invalid(OP, format!("eps must be non-negative, got {}", cfg.eps)));
    }
    let eps = T::from_f64_lossy(cfg.eps);
    let plane = h * w;
    let count = n * plane;
    let mut inv_std = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];

    if cfg.training {
        if count < 2 {
            return Err(Error::invalid(
                OP,
                "training mode needs at least two values per channel",
            ));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(OP, "running statistics", c, running_mean.len()));
        }
        let m = T::from_usize(count).unwrap();
        let mom = T::from_f64_lossy(cfg.momentum);
        for ch in 0..c {
            let planes = (0..n).map(|b| &x[(b * c + ch) * plane..][..plane]);
            let mean = planes.clone().flatten().copied().sum::<T>() / m;
            let var = planes.flatten().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            if var + eps <= T::zero() {
                return Err(Error::invalid(
                    OP,
                    format!("channel {ch} has zero variance and eps = 0"),
                ));
            }
            inv_std[ch] = T::one() / (var + eps).sqrt();
            let unbiased = var * m / (m - T::one());
            running_mean[ch] = (T::one() - mom) * running_mean[ch] + mom * mean;
            running_var[ch] = (T::one() - mom) * running_var[ch] + mom * unbiased;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (x[i] - mean) * inv_std[ch];
                    y[i] = gamma[ch] * xhat[i] + beta[ch];
                }
            }
        }
    } else {
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::invalid(
                OP,
                format!(
                    "running statistics not initialized for {c} channels (have {})",
                    running_mean.len()
                ),
            ));
        }
        for ch in 0..c {
            let var = running_var[ch];
            if !var.is_finite() || var + eps <= T::zero() {
                return Err(Error::invalid(
                    OP,
                    format!("running variance of channel {ch} is unusable"),
                ));
            }
            inv_std[ch] = T::one() / (var + eps).sqrt();
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    xhat[i] = (x[i] - running_mean[ch]) * inv_std[ch];
                    y[i] = gamma[ch] * xhat[i] + beta[ch];
                }
            }
        }
    }
    Ok((
        y,
        BnSaved {
            xhat,
            inv_std,
            training: cfg.training,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    dims: [usize; 4],
    gamma: &[T],
    saved: &BnSaved<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let m = T::from_usize(n * plane).unwrap();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |b| (b * c + ch) * plane..(b * c + ch + 1) * plane);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in idx() {
            sum_dy = sum_dy + dy[i];
            sum_dy_xhat = sum_dy_xhat + dy[i] * saved.xhat[i];
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * saved.inv_std[ch];
        if saved.training {
            for i in idx() {
                dx[i] = scale / m * (m * dy[i] - sum_dy - saved.xhat[i] * sum_dy_xhat);
            }
        } else {
            for i in idx() {
                dx[i] = scale * dy[i];
            }
        }
    }
    (dx, dgamma, dbeta)
}
