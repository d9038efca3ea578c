//! Loop-based forward and backward kernels over flat `(n, c, h, w)` buffers.
//!
//! Stride-1 convolutions are lowered to a patch matrix and a matrix product;
//! other strides use a direct scan.

use crate::tensor::{Dims, Mat, MatMut, Real};

/// Output extent of a convolution along one axis, `None` when non-positive.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Cross-correlation. `w` is `(co, ci, kh, kw)`.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    xd: Dims,
    w: &[T],
    wd: Dims,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    od: Dims,
) -> Vec<T> {
    if stride == 1 {
        return conv2d_forward_gemm(x, xd, w, wd, bias, pad, od);
    }
    let mut out = vec![T::zero(); od.numel()];
    let (co_n, ci_n, kh_n, kw_n) = (wd.n, wd.c, wd.h, wd.w);
    let oplane = od.plane();
    let iplane = xd.plane();
    for n in 0..xd.n {
        for co in 0..co_n {
            let o = &mut out[(n * co_n + co) * oplane..(n * co_n + co + 1) * oplane];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for ci in 0..ci_n {
                let xin = &x[(n * ci_n + ci) * iplane..(n * ci_n + ci + 1) * iplane];
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = w[((co * ci_n + ci) * kh_n + kh) * kw_n + kw];
                        {
                            for oy in 0..od.h {
                                let iy = (oy * stride + kh) as isize - pad as isize;
                                if iy < 0 || iy >= xd.h as isize {
                                    continue;
                                }
                                for ox in 0..od.w {
                                    let ix = (ox * stride + kw) as isize - pad as isize;
                                    if ix < 0 || ix >= xd.w as isize {
                                        continue;
                                    }
                                    o[oy * od.w + ox] += wv * xin[iy as usize * xd.w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input<T: Real>(
    g: &[T],
    od: Dims,
    w: &[T],
    wd: Dims,
    xd: Dims,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    if stride == 1 {
        return conv2d_backward_input_gemm(g, od, w, wd, xd, pad);
    }
    let mut gx = vec![T::zero(); xd.numel()];
    let (co_n, ci_n, kh_n, kw_n) = (wd.n, wd.c, wd.h, wd.w);
    let oplane = od.plane();
    let iplane = xd.plane();
    for n in 0..xd.n {
        for ci in 0..ci_n {
            let gxp = &mut gx[(n * ci_n + ci) * iplane..(n * ci_n + ci + 1) * iplane];
            for co in 0..co_n {
                let gp = &g[(n * co_n + co) * oplane..(n * co_n + co + 1) * oplane];
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = w[((co * ci_n + ci) * kh_n + kh) * kw_n + kw];
                        {
                            for oy in 0..od.h {
                                let iy = (oy * stride + kh) as isize - pad as isize;
                                if iy < 0 || iy >= xd.h as isize {
                                    continue;
                                }
                                for ox in 0..od.w {
                                    let ix = (ox * stride + kw) as isize - pad as isize;
                                    if ix < 0 || ix >= xd.w as isize {
                                        continue;
                                    }
                                    gxp[iy as usize * xd.w + ix as usize] += wv * gp[oy * od.w + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of the convolution with respect to its weight.
pub fn conv2d_backward_weight<T: Real>(
    g: &[T],
    od: Dims,
    x: &[T],
    xd: Dims,
    wd: Dims,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    if stride == 1 {
        return conv2d_backward_weight_gemm(g, od, x, xd, wd, pad);
    }
    let mut gw = vec![T::zero(); wd.numel()];
    let (co_n, ci_n, kh_n, kw_n) = (wd.n, wd.c, wd.h, wd.w);
    let oplane = od.plane();
    let iplane = xd.plane();
    for n in 0..xd.n {
        for co in 0..co_n {
            let gp = &g[(n * co_n + co) * oplane..(n * co_n + co + 1) * oplane];
            for ci in 0..ci_n {
                let xin = &x[(n * ci_n + ci) * iplane..(n * ci_n + ci + 1) * iplane];
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let acc = {
                            let mut acc = T::zero();
                            for oy in 0..od.h {
                                let iy = (oy * stride + kh) as isize - pad as isize;
                                if iy < 0 || iy >= xd.h as isize {
                                    continue;
                                }
                                for ox in 0..od.w {
                                    let ix = (ox * stride + kw) as isize - pad as isize;
                                    if ix < 0 || ix >= xd.w as isize {
                                        continue;
                                    }
                                    acc += gp[oy * od.w + ox] * xin[iy as usize * xd.w + ix as usize];
                                }
                            }
                            acc
                        };
                        gw[((co * ci_n + ci) * kh_n + kh) * kw_n + kw] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Unfolds one image `(ci, h, w)` into a `(ci * k * k, oh * ow)` patch matrix.
fn im2col<T: Real>(x: &[T], xd: Dims, k: usize, pad: usize, od: Dims, col: &mut [T]) {
    let plane = od.plane();
    for ci in 0..xd.c {
        let xin = &x[ci * xd.plane()..(ci + 1) * xd.plane()];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut col[((ci * k + kh) * k + kw) * plane..][..plane];
                let dx = kw as isize - pad as isize;
                for oy in 0..od.h {
                    let dst = &mut row[oy * od.w..(oy + 1) * od.w];
                    let iy = oy as isize + kh as isize - pad as isize;
                    if iy < 0 || iy >= xd.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xin[iy as usize * xd.w..(iy as usize + 1) * xd.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize + dx;
                        *d = if ix < 0 || ix >= xd.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into `(ci, h, w)`.
fn col2im<T: Real>(col: &[T], xd: Dims, k: usize, pad: usize, od: Dims, x: &mut [T]) {
    let plane = od.plane();
    for ci in 0..xd.c {
        let xout = &mut x[ci * xd.plane()..(ci + 1) * xd.plane()];
        for kh in 0..k {
            for kw in 0..k {
                let row = &col[((ci * k + kh) * k + kw) * plane..][..plane];
                let dx = kw as isize - pad as isize;
                for oy in 0..od.h {
                    let iy = oy as isize + kh as isize - pad as isize;
                    if iy < 0 || iy >= xd.h as isize {
                        continue;
                    }
                    let dst = &mut xout[iy as usize * xd.w..(iy as usize + 1) * xd.w];
                    for (ox, &v) in row[oy * od.w..(oy + 1) * od.w].iter().enumerate() {
                        let ix = ox as isize + dx;
                        if ix >= 0 && ix < xd.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 1x1 kernels without padding use the input itself as the patch matrix.
fn is_pointwise(wd: Dims, pad: usize) -> bool {
    wd.h == 1 && wd.w == 1 && pad == 0
}

fn conv2d_forward_gemm<T: Real>(
    x: &[T],
    xd: Dims,
    w: &[T],
    wd: Dims,
    bias: Option<&[T]>,
    pad: usize,
    od: Dims,
) -> Vec<T> {
    debug_assert_eq!(wd.h, wd.w);
    let mut out = vec![T::zero(); od.numel()];
    let kdim = wd.c * wd.h * wd.w;
    let plane = od.plane();
    let pointwise = is_pointwise(wd, pad);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * plane] };
    for n in 0..xd.n {
        let o = &mut out[n * wd.n * plane..(n + 1) * wd.n * plane];
        if let Some(b) = bias {
            for (co, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let xin = &x[n * xd.c * xd.plane()..(n + 1) * xd.c * xd.plane()];
        let rhs = if pointwise {
            xin
        } else {
            im2col(xin, xd, wd.h, pad, od, &mut col);
            &col
        };
        T::gemm(
            wd.n,
            kdim,
            plane,
            Mat { data: w, rs: kdim, cs: 1 },
            Mat { data: rhs, rs: plane, cs: 1 },
            T::one(),
            MatMut { data: o, rs: plane, cs: 1 },
        );
    }
    out
}

fn conv2d_backward_input_gemm<T: Real>(g: &[T], od: Dims, w: &[T], wd: Dims, xd: Dims, pad: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); xd.numel()];
    let kdim = wd.c * wd.h * wd.w;
    let plane = od.plane();
    let pointwise = is_pointwise(wd, pad);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * plane] };
    for n in 0..xd.n {
        let gp = &g[n * wd.n * plane..(n + 1) * wd.n * plane];
        let gxn = &mut gx[n * xd.c * xd.plane()..(n + 1) * xd.c * xd.plane()];
        let lhs = Mat { data: w, rs: 1, cs: kdim };
        let rhs = Mat { data: gp, rs: plane, cs: 1 };
        if pointwise {
            T::gemm(kdim, wd.n, plane, lhs, rhs, T::zero(), MatMut { data: gxn, rs: plane, cs: 1 });
        } else {
            T::gemm(kdim, wd.n, plane, lhs, rhs, T::zero(), MatMut { data: &mut col, rs: plane, cs: 1 });
            col2im(&col, xd, wd.h, pad, od, gxn);
        }
    }
    gx
}

fn conv2d_backward_weight_gemm<T: Real>(g: &[T], od: Dims, x: &[T], xd: Dims, wd: Dims, pad: usize) -> Vec<T> {
    let mut gw = vec![T::zero(); wd.numel()];
    let kdim = wd.c * wd.h * wd.w;
    let plane = od.plane();
    let pointwise = is_pointwise(wd, pad);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kdim * plane] };
    for n in 0..xd.n {
        let gp = &g[n * wd.n * plane..(n + 1) * wd.n * plane];
        let xin = &x[n * xd.c * xd.plane()..(n + 1) * xd.c * xd.plane()];
        let patches = if pointwise {
            xin
        } else {
            im2col(xin, xd, wd.h, pad, od, &mut col);
            &col
        };
        T::gemm(
            wd.n,
            plane,
            kdim,
            Mat { data: gp, rs: plane, cs: 1 },
            Mat { data: patches, rs: 1, cs: plane },
            T::one(),
            MatMut { data: &mut gw, rs: kdim, cs: 1 },
        );
    }
    gw
}

/// Per-channel sum over `(n, h, w)`.
pub fn channel_sums<T: Real>(g: &[T], d: Dims) -> Vec<T> {
    let plane = d.plane();
    let mut out = vec![T::zero(); d.c];
    for n in 0..d.n {
        for (c, o) in out.iter_mut().enumerate() {
            let p = &g[(n * d.c + c) * plane..(n * d.c + c + 1) * plane];
            *o += p.iter().copied().sum::<T>();
        }
    }
    out
}

/// Transposed convolution without padding. `w` is `(ci, co, kh, kw)`.
pub fn conv_transpose2d_forward<T: Real>(
    x: &[T],
    xd: Dims,
    w: &[T],
    wd: Dims,
    bias: Option<&[T]>,
    stride: usize,
    od: Dims,
) -> Vec<T> {
    let (ci_n, co_n, kh_n, kw_n) = (wd.n, wd.c, wd.h, wd.w);
    let mut out = vec![T::zero(); od.numel()];
    let oplane = od.plane();
    let iplane = xd.plane();
    for n in 0..xd.n {
        for co in 0..co_n {
            let o = &mut out[(n * co_n + co) * oplane..(n * co_n + co + 1) * oplane];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for ci in 0..ci_n {
                let xin = &x[(n * ci_n + ci) * iplane..(n * ci_n + ci + 1) * iplane];
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = w[((ci * co_n + co) * kh_n + kh) * kw_n + kw];
                        for iy in 0..xd.h {
                            let orow = (iy * stride + kh) * od.w + kw;
                            let irow = &xin[iy * xd.w..(iy + 1) * xd.w];
                            for (ix, &v) in irow.iter().enumerate() {
                                o[orow + ix * stride] += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward_input<T: Real>(
    g: &[T],
    od: Dims,
    w: &[T],
    wd: Dims,
    xd: Dims,
    stride: usize,
) -> Vec<T> {
    let (ci_n, co_n, kh_n, kw_n) = (wd.n, wd.c, wd.h, wd.w);
    let mut gx = vec![T::zero(); xd.numel()];
    let oplane = od.plane();
    let iplane = xd.plane();
    for n in 0..xd.n {
        for ci in 0..ci_n {
            let gxp = &mut gx[(n * ci_n + ci) * iplane..(n * ci_n + ci + 1) * iplane];
            for co in 0..co_n {
                let gp = &g[(n * co_n + co) * oplane..(n * co_n + co + 1) * oplane];
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let wv = w[((ci * co_n + co) * kh_n + kh) * kw_n + kw];
                        for iy in 0..xd.h {
                            let grow = (iy * stride + kh) * od.w + kw;
                            let dst = &mut gxp[iy * xd.w..(iy + 1) * xd.w];
                            for (ix, d) in dst.iter_mut().enumerate() {
                                *d += wv * gp[grow + ix * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

pub fn conv_transpose2d_backward_weight<T: Real>(
    g: &[T],
    od: Dims,
    x: &[T],
    xd: Dims,
    wd: Dims,
    stride: usize,
) -> Vec<T> {
    let (ci_n, co_n, kh_n, kw_n) = (wd.n, wd.c, wd.h, wd.w);
    let mut gw = vec![T::zero(); wd.numel()];
    let oplane = od.plane();
    let iplane = xd.plane();
    for n in 0..xd.n {
        for ci in 0..ci_n {
            let xin = &x[(n * ci_n + ci) * iplane..(n * ci_n + ci + 1) * iplane];
            for co in 0..co_n {
                let gp = &g[(n * co_n + co) * oplane..(n * co_n + co + 1) * oplane];
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let mut acc = T::zero();
                        for iy in 0..xd.h {
                            let grow = (iy * stride + kh) * od.w + kw;
                            let irow = &xin[iy * xd.w..(iy + 1) * xd.w];
                            for (ix, &v) in irow.iter().enumerate() {
                                acc += v * gp[grow + ix * stride];
                            }
                        }
                        gw[((ci * co_n + co) * kh_n + kh) * kw_n + kw] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// 2x2/stride-2 max pooling. Returns the pooled values and, per output, the
/// flat input index that won. Ties go to the first element in row-major
/// window order.
pub fn maxpool2x2_forward<T: Real>(x: &[T], xd: Dims) -> (Vec<T>, Vec<usize>) {
    let od = Dims::new(xd.n, xd.c, xd.h / 2, xd.w / 2);
    let mut out = Vec::with_capacity(od.numel());
    let mut arg = Vec::with_capacity(od.numel());
    for n in 0..xd.n {
        for c in 0..xd.c {
            let base = (n * xd.c + c) * xd.plane();
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let mut best = base + (2 * oy) * xd.w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * xd.w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

/// Per-axis bilinear taps for integer upsampling with half-pixel centers.
pub fn bilinear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear_forward<T: Real>(x: &[T], xd: Dims, factor: usize) -> (Vec<T>, Dims) {
    let od = Dims::new(xd.n, xd.c, xd.h * factor, xd.w * factor);
    let ty = bilinear_taps(xd.h, factor);
    let tx = bilinear_taps(xd.w, factor);
    let mut out = Vec::with_capacity(od.numel());
    for nc in 0..xd.n * xd.c {
        let p = &x[nc * xd.plane()..(nc + 1) * xd.plane()];
        for &(y0, y1, ly) in &ty {
            let (ly1, ly0) = (T::lit(ly), T::lit(1.0 - ly));
            for &(x0, x1, lx) in &tx {
                let (lx1, lx0) = (T::lit(lx), T::lit(1.0 - lx));
                let top = lx0 * p[y0 * xd.w + x0] + lx1 * p[y0 * xd.w + x1];
                let bot = lx0 * p[y1 * xd.w + x0] + lx1 * p[y1 * xd.w + x1];
                out.push(ly0 * top + ly1 * bot);
            }
        }
    }
    (out, od)
}

pub fn upsample_bilinear_backward<T: Real>(g: &[T], xd: Dims, factor: usize) -> Vec<T> {
    let ty = bilinear_taps(xd.h, factor);
    let tx = bilinear_taps(xd.w, factor);
    let ow = xd.w * factor;
    let oplane = ow * xd.h * factor;
    let mut gx = vec![T::zero(); xd.numel()];
    for nc in 0..xd.n * xd.c {
        let gp = &g[nc * oplane..(nc + 1) * oplane];
        let dst = &mut gx[nc * xd.plane()..(nc + 1) * xd.plane()];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly1, ly0) = (T::lit(ly), T::lit(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx1, lx0) = (T::lit(lx), T::lit(1.0 - lx));
                let v = gp[oy * ow + ox];
                dst[y0 * xd.w + x0] += ly0 * lx0 * v;
                dst[y0 * xd.w + x1] += ly0 * lx1 * v;
                dst[y1 * xd.w + x0] += ly1 * lx0 * v;
                dst[y1 * xd.w + x1] += ly1 * lx1 * v;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], xd: Dims, w: &[f64], wd: Dims, stride: usize, pad: usize) -> Vec<f64> {
        let oh = conv_out_extent(xd.h, wd.h, stride, pad).unwrap();
        let ow = conv_out_extent(xd.w, wd.w, stride, pad).unwrap();
        let mut out = vec![0.0; xd.n * wd.n * oh * ow];
        for n in 0..xd.n {
            for co in 0..wd.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..wd.c {
                            for kh in 0..wd.h {
                                for kw in 0..wd.w {
                                    let iy = (oy * stride + kh) as isize - pad as isize;
                                    let ix = (ox * stride + kw) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= xd.h as isize || ix >= xd.w as isize {
                                        continue;
                                    }
                                    s += w[wd.index(co, ci, kh, kw)]
                                        * x[xd.index(n, ci, iy as usize, ix as usize)];
                                }
                            }
                        }
                        out[((n * wd.n + co) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn fast_path_matches_naive_scan() {
        for (k, pad, h, w) in [(3, 1, 5, 7), (1, 0, 4, 4), (3, 0, 6, 5), (3, 2, 3, 3)] {
            let xd = Dims::new(2, 3, h, w);
            let wd = Dims::new(4, 3, k, k);
            let x = pseudo(xd.numel(), 1);
            let wt = pseudo(wd.numel(), 2);
            let oh = conv_out_extent(h, k, 1, pad).unwrap();
            let ow = conv_out_extent(w, k, 1, pad).unwrap();
            let od = Dims::new(2, 4, oh, ow);
            let fast = conv2d_forward(&x, xd, &wt, wd, None, 1, pad, od);
            let slow = naive_conv(&x, xd, &wt, wd, 1, pad);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_maps_are_adjoint() {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for (k, pad, stride) in [(3, 1, 1), (1, 0, 1), (3, 0, 1), (3, 1, 2)] {
            let xd = Dims::new(2, 3, 6, 5);
            let wd = Dims::new(4, 3, k, k);
            let od = Dims::new(
                2,
                4,
                conv_out_extent(6, k, stride, pad).unwrap(),
                conv_out_extent(5, k, stride, pad).unwrap(),
            );
            let x = pseudo(xd.numel(), 3);
            let wt = pseudo(wd.numel(), 4);
            let y = pseudo(od.numel(), 5);
            let fwd = conv2d_forward(&x, xd, &wt, wd, None, stride, pad, od);
            let gx = conv2d_backward_input(&y, od, &wt, wd, xd, stride, pad);
            let gw = conv2d_backward_weight(&y, od, &x, xd, wd, stride, pad);
            let lhs = dot(&fwd, &y);
            assert!((lhs - dot(&x, &gx)).abs() < 1e-10 * lhs.abs().max(1.0));
            assert!((lhs - dot(&wt, &gw)).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn strided_path_matches_naive_scan() {
        let xd = Dims::new(1, 2, 7, 6);
        let wd = Dims::new(3, 2, 3, 3);
        let x = pseudo(xd.numel(), 3);
        let wt = pseudo(wd.numel(), 4);
        let od = Dims::new(1, 3, conv_out_extent(7, 3, 2, 1).unwrap(), conv_out_extent(6, 3, 2, 1).unwrap());
        let got = conv2d_forward(&x, xd, &wt, wd, None, 2, 1, od);
        let want = naive_conv(&x, xd, &wt, wd, 2, 1);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_taps_are_clamped() {
        let taps = bilinear_taps(2, 2);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[3], (1, 1, 0.25));
    }

    #[test]
    fn out_extent_rejects_non_positive() {
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
        assert_eq!(conv_out_extent(5, 3, 1, 1), Some(5));
        assert_eq!(conv_out_extent(4, 2, 2, 0), Some(2));
    }
}
