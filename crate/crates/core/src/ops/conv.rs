//! 2-D grouped, dilated cross-correlation.
//!
//! Dense groups go through im2col and a GEMM over the whole batch; groups
//! with a single input and output channel (depthwise) use a direct loop.

use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dParams {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride: 1,
            pad: dilation * (kernel - 1) / 2,
            dilation,
            groups,
        }
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

/// Resolved extents of one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub p: Conv2dParams,
}

impl ConvGeom {
    pub fn new(x: [usize; 4], weight: &[usize], p: Conv2dParams) -> Result<Self> {
        const OP: &str = "conv2d";
        let [n, cin, h, w] = x;
        let [cout, cin_g, kh, kw] = match weight[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(Error::shape(OP, "weight rank", 4, weight.len())),
        };
        if p.stride == 0 || p.dilation == 0 || p.groups == 0 {
            return Err(Error::invalid(OP, "stride, dilation and groups must be positive"));
        }
        if cin % p.groups != 0 {
            return Err(Error::shape(
                OP,
                "input channels",
                format!("multiple of groups={}", p.groups),
                cin,
            ));
        }
        if cout % p.groups != 0 {
            return Err(Error::shape(
                OP,
                "output channels",
                format!("multiple of groups={}", p.groups),
                cout,
            ));
        }
        if cin_g != cin / p.groups {
            return Err(Error::shape(OP, "weight input channels", cin / p.groups, cin_g));
        }
        let ho = conv_out_extent(h, kh, p.stride, p.pad, p.dilation)
            .ok_or_else(|| Error::invalid(OP, format!("non-positive output height for H={h}")))?;
        let wo = conv_out_extent(w, kw, p.stride, p.pad, p.dilation)
            .ok_or_else(|| Error::invalid(OP, format!("non-positive output width for W={w}")))?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            p,
        })
    }

    pub fn cin_g(&self) -> usize {
        self.cin / self.p.groups
    }

    pub fn cout_g(&self) -> usize {
        self.cout / self.p.groups
    }

    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }
}

/// Output indices `o` in `[lo, hi)` whose tap `o*stride + offset - pad` lands
/// inside `[0, extent)`.
fn valid_range(out: usize, extent: usize, offset: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi = if extent + pad > offset {
        ((extent - 1 + pad - offset) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: usize, geom: &ConvGeom, col: &mut [T]) {
    let ConvGeom {
        n,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        p,
        ..
    } = *geom;
    let cin_g = geom.cin_g();
    let np = n * ho * wo;
    col.fill(T::zero());
    for ci in 0..cin_g {
        let c = g * cin_g + ci;
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(ho, h, ky * p.dilation, p.pad, p.stride);
            for kx in 0..kw {
                let (ox0, ox1) = valid_range(wo, w, kx * p.dilation, p.pad, p.stride);
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut col[row * np..(row + 1) * np];
                for b in 0..n {
                    let plane = &x[(b * geom.cin + c) * h * w..][..h * w];
                    let out = &mut dst[b * ho * wo..][..ho * wo];
                    for oy in oy0..oy1 {
                        let iy = oy * p.stride + ky * p.dilation - p.pad;
                        let src = &plane[iy * w..][..w];
                        let dst_row = &mut out[oy * wo..][..wo];
                        for ox in ox0..ox1 {
                            dst_row[ox] = src[ox * p.stride + kx * p.dilation - p.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: usize, geom: &ConvGeom, dx: &mut [T]) {
    let ConvGeom {
        n,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        p,
        ..
    } = *geom;
    let cin_g = geom.cin_g();
    let np = n * ho * wo;
    for ci in 0..cin_g {
        let c = g * cin_g + ci;
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(ho, h, ky * p.dilation, p.pad, p.stride);
            for kx in 0..kw {
                let (ox0, ox1) = valid_range(wo, w, kx * p.dilation, p.pad, p.stride);
                let row = (ci * kh + ky) * kw + kx;
                let src = &col[row * np..(row + 1) * np];
                for b in 0..n {
                    let plane = &mut dx[(b * geom.cin + c) * h * w..][..h * w];
                    let s = &src[b * ho * wo..][..ho * wo];
                    for oy in oy0..oy1 {
                        let iy = oy * p.stride + ky * p.dilation - p.pad;
                        let dst = &mut plane[iy * w..][..w];
                        let s_row = &s[oy * wo..][..wo];
                        for ox in ox0..ox1 {
                            dst[ox * p.stride + kx * p.dilation - p.pad] =
                                dst[ox * p.stride + kx * p.dilation - p.pad] + s_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gathers output channels `[g*cout_g, (g+1)*cout_g)` of an `(N, Cout, P)`
/// buffer into a `(cout_g, N*P)` matrix.
fn gather_group<T: Scalar>(y: &[T], g: usize, geom: &ConvGeom, out: &mut [T]) {
    let (cout_g, pl, np) = (geom.cout_g(), geom.out_plane(), geom.n * geom.out_plane());
    for co in 0..cout_g {
        for b in 0..geom.n {
            let src = &y[(b * geom.cout + g * cout_g + co) * pl..][..pl];
            out[co * np + b * pl..][..pl].copy_from_slice(src);
        }
    }
}

fn scatter_group<T: Scalar>(m: &[T], g: usize, geom: &ConvGeom, y: &mut [T]) {
    let (cout_g, pl, np) = (geom.cout_g(), geom.out_plane(), geom.n * geom.out_plane());
    for co in 0..cout_g {
        for b in 0..geom.n {
            y[(b * geom.cout + g * cout_g + co) * pl..][..pl].copy_from_slice(&m[co * np + b * pl..][..pl]);
        }
    }
}

fn depthwise_forward<T: Scalar>(x: &[T], weight: &[T], geom: &ConvGeom, y: &mut [T]) {
    let ConvGeom {
        n,
        cin,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        p,
        ..
    } = *geom;
    for b in 0..n {
        for c in 0..cin {
            let plane = &x[(b * cin + c) * h * w..][..h * w];
            let out = &mut y[(b * cin + c) * ho * wo..][..ho * wo];
            let kern = &weight[c * kh * kw..][..kh * kw];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ho, h, ky * p.dilation, p.pad, p.stride);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_range(wo, w, kx * p.dilation, p.pad, p.stride);
                    let wv = kern[ky * kw + kx];
                    for oy in oy0..oy1 {
                        let iy = oy * p.stride + ky * p.dilation - p.pad;
                        let src = &plane[iy * w..][..w];
                        let dst = &mut out[oy * wo..][..wo];
                        for ox in ox0..ox1 {
                            dst[ox] = dst[ox] + wv * src[ox * p.stride + kx * p.dilation - p.pad];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    geom: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let ConvGeom {
        n,
        cin,
        h,
        w,
        kh,
        kw,
        ho,
        wo,
        p,
        ..
    } = *geom;
    for b in 0..n {
        for c in 0..cin {
            let plane = &x[(b * cin + c) * h * w..][..h * w];
            let g = &dy[(b * cin + c) * ho * wo..][..ho * wo];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ho, h, ky * p.dilation, p.pad, p.stride);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_range(wo, w, kx * p.dilation, p.pad, p.stride);
                    let widx = c * kh * kw + ky * kw + kx;
                    let wv = weight[widx];
                    let mut acc = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy * p.stride + ky * p.dilation - p.pad;
                        let g_row = &g[oy * wo..][..wo];
                        let src = &plane[iy * w..][..w];
                        for ox in ox0..ox1 {
                            acc = acc + g_row[ox] * src[ox * p.stride + kx * p.dilation - p.pad];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dst = &mut dx[(b * cin + c) * h * w + iy * w..][..w];
                            for ox in ox0..ox1 {
                                let ix = ox * p.stride + kx * p.dilation - p.pad;
                                dst[ix] = dst[ix] + wv * g_row[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] = dw[widx] + acc;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, geom: &ConvGeom) -> Vec<T> {
    let pl = geom.out_plane();
    let mut y = vec![T::zero(); geom.n * geom.cout * pl];
    if geom.is_depthwise() {
        depthwise_forward(x, weight, geom, &mut y);
    } else {
        let (k, np, cout_g) = (geom.k(), geom.n * pl, geom.cout_g());
        let mut col = vec![T::zero(); k * np];
        let mut out = vec![T::zero(); cout_g * np];
        for g in 0..geom.p.groups {
            im2col(x, g, geom, &mut col);
            let wg = &weight[g * cout_g * k..][..cout_g * k];
            T::gemm(false, false, cout_g, k, np, wg, &col, &mut out, false);
            scatter_group(&out, g, geom, &mut y);
        }
    }
    if let Some(bias) = bias {
        for (i, plane) in y.chunks_mut(pl).enumerate() {
            let b = bias[i % geom.cout];
            plane.iter_mut().for_each(|v| *v = *v + b);
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(x: &[T], weight: &[T], dy: &[T], geom: &ConvGeom, need: [bool; 3]) -> ConvGrads<T> {
    let [need_dx, need_dw, need_db] = need;
    let pl = geom.out_plane();
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); weight.len()]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); geom.cout];
        for (i, plane) in dy.chunks(pl).enumerate() {
            db[i % geom.cout] = db[i % geom.cout] + plane.iter().copied().sum::<T>();
        }
        db
    });
    if !(need_dx || need_dw) {
        return ConvGrads { dx, dw, db };
    }
    if geom.is_depthwise() {
        depthwise_backward(x, weight, dy, geom, dx.as_deref_mut(), dw.as_deref_mut());
    } else {
        let (k, np, cout_g) = (geom.k(), geom.n * pl, geom.cout_g());
        let mut col = vec![T::zero(); k * np];
        let mut dy_g = vec![T::zero(); cout_g * np];
        for g in 0..geom.p.groups {
            gather_group(dy, g, geom, &mut dy_g);
            if let Some(dw) = dw.as_deref_mut() {
                im2col(x, g, geom, &mut col);
                let dwg = &mut dw[g * cout_g * k..][..cout_g * k];
                T::gemm(false, true, cout_g, np, k, &dy_g, &col, dwg, false);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let wg = &weight[g * cout_g * k..][..cout_g * k];
                T::gemm(true, false, k, cout_g, np, wg, &dy_g, &mut col, false);
                col2im(&col, g, geom, dx);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop reference used to check both code paths.
    fn naive(x: &[f64], w: &[f64], geom: &ConvGeom) -> Vec<f64> {
        let ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            ho,
            wo,
            p,
        } = *geom;
        let (cin_g, cout_g) = (cin / p.groups, cout / p.groups);
        let mut y = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                let g = co / cout_g;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..cin_g {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride + ky * p.dilation) as isize - p.pad as isize;
                                    let ix = (ox * p.stride + kx * p.dilation) as isize - p.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let c = g * cin_g + ci;
                                    acc += w[((co * cin_g + ci) * kh + ky) * kw + kx]
                                        * x[((b * cin + c) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        y[((b * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matches_naive_reference() {
        let cases = [
            (
                [2, 4, 7, 6],
                [6, 2, 3, 3],
                Conv2dParams {
                    stride: 1,
                    pad: 1,
                    dilation: 1,
                    groups: 2,
                },
            ),
            (
                [1, 3, 9, 9],
                [4, 3, 3, 3],
                Conv2dParams {
                    stride: 2,
                    pad: 2,
                    dilation: 2,
                    groups: 1,
                },
            ),
            (
                [2, 5, 8, 8],
                [5, 1, 3, 3],
                Conv2dParams {
                    stride: 1,
                    pad: 3,
                    dilation: 3,
                    groups: 5,
                },
            ),
            ([1, 2, 5, 5], [3, 2, 1, 1], Conv2dParams::default()),
            (
                [1, 3, 6, 6],
                [3, 1, 5, 5],
                Conv2dParams {
                    stride: 1,
                    pad: 2,
                    dilation: 1,
                    groups: 3,
                },
            ),
        ];
        for (i, (xs, ws, p)) in cases.into_iter().enumerate() {
            let geom = ConvGeom::new(xs, &ws, p).unwrap();
            let x = pseudo(xs.iter().product(), i as u64);
            let w = pseudo(ws.iter().product(), 100 + i as u64);
            let got = conv2d_forward(&x, &w, None, &geom);
            let want = naive(&x, &w, &geom);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn valid_range_edges() {
        // kernel offset 0 with pad 1: first output taps row -1
        assert_eq!(valid_range(5, 5, 0, 1, 1), (1, 5));
        assert_eq!(valid_range(5, 5, 2, 1, 1), (0, 4));
        assert_eq!(valid_range(3, 2, 0, 4, 1), (3, 3));
    }
}
