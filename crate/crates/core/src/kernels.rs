//! Forward and backward kernels over raw NCHW buffers.
//!
//! Convolution lowers each sample to an im2col matrix and calls GEMM. The
//! column buffer is rebuilt in the backward pass instead of being stored.

use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies inside [0, w).
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let ow = g.out_w();
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let ranges: Vec<(usize, usize)> = (0..k).map(|kx| valid_cols(g, kx)).collect();
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (out, &v) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *out = v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let ranges: Vec<(usize, usize)> = (0..k).map(|kx| valid_cols(g, kx)).collect();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                if lo >= hi {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `x`: [n, in_ch, h, w], `weight`: [out_ch, in_ch, k, k], `bias`: [out_ch].
pub fn conv2d_forward<T: Element>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    let kdim = g.col_rows();
    let in_sz = g.in_ch * g.h * g.w;
    let out_sz = g.out_ch * hw;
    let mut out = vec![T::zero(); n * out_sz];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * hw]
    };
    for s in 0..n {
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        let ys = &mut out[s * out_sz..(s + 1) * out_sz];
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                ys[co * hw..(co + 1) * hw].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        T::gemm(
            g.out_ch,
            kdim,
            hw,
            T::one(),
            weight,
            kdim as isize,
            1,
            src,
            hw as isize,
            1,
            beta,
            ys,
            hw as isize,
            1,
        );
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let hw = oh * ow;
    let kdim = g.col_rows();
    let in_sz = g.in_ch * g.h * g.w;
    let out_sz = g.out_ch * hw;
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_sz]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.out_ch * kdim]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.out_ch];
        for s in 0..n {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = s * out_sz + co * hw;
                *acc += dy[off..off + hw].iter().copied().sum::<T>();
            }
        }
        db
    });
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kdim * hw }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { kdim * hw } else { 0 }];
    for s in 0..n {
        let dys = &dy[s * out_sz..(s + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            let xs = &x[s * in_sz..(s + 1) * in_sz];
            let src: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dW[co, r] += sum_p dy[co, p] * cols[r, p]
            T::gemm(
                g.out_ch,
                hw,
                kdim,
                T::one(),
                dys,
                hw as isize,
                1,
                src,
                1,
                hw as isize,
                T::one(),
                dw,
                kdim as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_sz..(s + 1) * in_sz];
            if g.is_pointwise() {
                T::gemm(
                    kdim,
                    g.out_ch,
                    hw,
                    T::one(),
                    weight,
                    1,
                    kdim as isize,
                    dys,
                    hw as isize,
                    1,
                    T::one(),
                    dxs,
                    hw as isize,
                    1,
                );
            } else {
                T::gemm(
                    kdim,
                    g.out_ch,
                    hw,
                    T::one(),
                    weight,
                    1,
                    kdim as isize,
                    dys,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut dcols,
                    hw as isize,
                    1,
                );
                col2im(&dcols, g, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

pub fn avg_pool2_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                out.push((r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(p * oh + oy) * ow + ox] * quarter;
                let base = p * h * w;
                dx[base + 2 * oy * w + 2 * ox] = g;
                dx[base + 2 * oy * w + 2 * ox + 1] = g;
                dx[base + (2 * oy + 1) * w + 2 * ox] = g;
                dx[base + (2 * oy + 1) * w + 2 * ox + 1] = g;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            let src = &x[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
            let dst = &mut out[(p * oh + y) * ow..(p * oh + y + 1) * ow];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = src[xo / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..oh {
            let src = &dy[(p * oh + y) * ow..(p * oh + y + 1) * ow];
            let dst = &mut dx[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
            for (xo, &g) in src.iter().enumerate() {
                dst[xo / 2] += g;
            }
        }
    }
    dx
}

pub const NORM_EPS: f64 = 1e-5;

/// Per-plane normalisation to zero mean / unit variance. Returns output and 1/std per plane.
pub fn instance_norm_forward<T: Element>(x: &[T], planes: usize, size: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64(NORM_EPS);
    let inv_n = T::from_f64(1.0 / size as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut invstd = Vec::with_capacity(planes);
    for p in 0..planes {
        let xs = &x[p * size..(p + 1) * size];
        let mean = xs.iter().copied().sum::<T>() * inv_n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in out[p * size..(p + 1) * size].iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
        invstd.push(is);
    }
    (out, invstd)
}

pub fn instance_norm_backward<T: Element>(y: &[T], invstd: &[T], dy: &[T], size: usize) -> Vec<T> {
    let inv_n = T::from_f64(1.0 / size as f64);
    let mut dx = vec![T::zero(); y.len()];
    for (p, &is) in invstd.iter().enumerate() {
        let ys = &y[p * size..(p + 1) * size];
        let gs = &dy[p * size..(p + 1) * size];
        let mean_g = gs.iter().copied().sum::<T>() * inv_n;
        let mean_gy = gs.iter().zip(ys).map(|(&g, &v)| g * v).sum::<T>() * inv_n;
        for ((d, &g), &v) in dx[p * size..(p + 1) * size].iter_mut().zip(gs).zip(ys) {
            *d = is * (g - mean_g - v * mean_gy);
        }
    }
    dx
}
