//! Spatial resampling: 2×2 max pooling, bilinear resize, global average pool.

use crate::tensor::Scalar;

/// Returns the pooled values and, for each output, the flat input index it
/// was taken from. Ties go to the first element in row-major scan order.
pub fn maxpool2x2_forward<T: Scalar>(x: &[T], dims: [usize; 4]) -> (Vec<T>, Vec<usize>) {
    let [n, c, h, w] = dims;
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

/// Source taps along one axis: `(lower index, upper index, upper weight)`.
///
/// Half-pixel centres (`src = (dst + 0.5)·in/out − 0.5`), clamped to the
/// valid range so edge samples replicate the border.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear_forward<T: Scalar>(x: &[T], dims: [usize; 4], out_h: usize, out_w: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut y = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.chunks(h * w).take(n * c) {
        for &(y0, y1, fy) in &ty {
            let fy = T::from_f64_lossy(fy);
            let (r0, r1) = (&plane[y0 * w..][..w], &plane[y1 * w..][..w]);
            for &(x0, x1, fx) in &tx {
                let fx = T::from_f64_lossy(fx);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                y.push(top + (bot - top) * fy);
            }
        }
    }
    y
}

pub fn upsample_bilinear_backward<T: Scalar>(dy: &[T], dims: [usize; 4], out_h: usize, out_w: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, g) in dx.chunks_mut(h * w).zip(dy.chunks(out_h * out_w)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let gv = g[oy * out_w + ox];
                let (gt, gb) = (gv * (T::one() - fy), gv * fy);
                plane[y0 * w + x0] = plane[y0 * w + x0] + gt * (T::one() - fx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + gt * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + gb * (T::one() - fx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + gb * fx;
            }
        }
    }
    dx
}

pub fn global_avg_pool_forward<T: Scalar>(x: &[T], dims: [usize; 4]) -> Vec<T> {
    let [_, _, h, w] = dims;
    let area = T::from_usize(h * w).unwrap();
    x.chunks(h * w).map(|p| p.iter().copied().sum::<T>() / area).collect()
}
