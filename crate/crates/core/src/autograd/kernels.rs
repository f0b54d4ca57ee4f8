//! Raw numeric kernels behind the graph operations.

use crate::tensor::{gemm, Float, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: (usize, usize, usize, usize), wshape: &[usize], stride: usize, pad: usize) -> Self {
        let (n, c, h, w) = x;
        assert_eq!(wshape.len(), 4, "conv weight must be OCKK");
        let (o, wc, k, k2) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(wc, c, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { n, c, h, w, o, k, stride, pad, ho, wo }
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `[lo, hi)` whose input column `ow * stride + kj - pad` is in range.
    fn valid_range(&self, kj: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(s) } else { 0 };
        let hi = if len + self.pad > kj { (len + self.pad - kj).div_ceil(s) } else { 0 };
        (lo.min(out_len), hi.min(out_len))
    }
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (h, w, k, s) = (g.h, g.w, g.k, g.stride);
    let plane = g.col_cols();
    let (wlo_all, whi_all): (Vec<usize>, Vec<usize>) =
        (0..k).map(|kj| g.valid_range(kj, w, g.wo)).unzip();
    for ci in 0..g.c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = (wlo_all[kj], whi_all[kj]);
                for oh in 0..g.ho {
                    let drow = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    let ih = (oh * s + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= h as isize || lo >= hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ih as usize * w..(ih as usize + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let start = lo * s + kj - g.pad;
                    if s == 1 {
                        drow[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = src[start + j * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (h, w, k, s) = (g.h, g.w, g.k, g.stride);
    let plane = g.col_cols();
    for ci in 0..g.c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_range(kj, w, g.wo);
                if lo >= hi {
                    continue;
                }
                for oh in 0..g.ho {
                    let ih = (oh * s + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let drow = &mut dxc[ih as usize * w..(ih as usize + 1) * w];
                    let srow = &src[oh * g.wo..(oh + 1) * g.wo];
                    let start = lo * s + kj - g.pad;
                    for j in 0..hi - lo {
                        drow[start + j * s] += srow[lo + j];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Float>(g: &ConvGeom, x: &[T], wt: &[T]) -> Vec<T> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * cols_n];
    let mut out = vec![T::zero(); g.n * g.o * cols_n];
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * cols_n;
    for b in 0..g.n {
        im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
        gemm(
            MatRef::row_major(wt, g.o, rows),
            MatRef::row_major(&cols, rows, cols_n),
            T::zero(),
            &mut out[b * out_sz..(b + 1) * out_sz],
        );
    }
    out
}

/// Returns `(dx, dw)`; either is skipped when not requested.
pub(crate) fn conv2d_backward<T: Float>(
    g: &ConvGeom,
    x: &[T],
    wt: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_sz = g.c * g.h * g.w;
    let out_sz = g.o * cols_n;
    let mut cols = vec![T::zero(); rows * cols_n];
    let mut dx = want_dx.then(|| vec![T::zero(); g.n * in_sz]);
    let mut dw = want_dw.then(|| vec![T::zero(); g.o * rows]);
    for b in 0..g.n {
        let dyb = &dy[b * out_sz..(b + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
            gemm(
                MatRef::row_major(dyb, g.o, cols_n),
                MatRef::row_major(&cols, rows, cols_n).t(),
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                MatRef::row_major(wt, g.o, rows).t(),
                MatRef::row_major(dyb, g.o, cols_n),
                T::zero(),
                &mut cols,
            );
            col2im(g, &cols, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (dx, dw)
}

/// Per-group statistics of a normalization forward pass.
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Instance norm over each `(n, c)` plane.
pub(crate) fn instance_norm_forward<T: Float>(x: &[T], planes: usize, hw: usize, eps: T) -> (Vec<T>, NormStats<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut stats = NormStats { mean: vec![], var: vec![], inv_std: vec![] };
    let count = T::from_usize(hw).unwrap();
    for p in 0..planes {
        let xs = &x[p * hw..(p + 1) * hw];
        let mean = xs.iter().copied().sum::<T>() / count;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in y[p * hw..(p + 1) * hw].iter_mut().zip(xs) {
            *o = (v - mean) * inv;
        }
        stats.mean.push(mean);
        stats.var.push(var);
        stats.inv_std.push(inv);
    }
    (y, stats)
}

pub(crate) fn instance_norm_backward<T: Float>(y: &[T], dy: &[T], inv_std: &[T], hw: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    let count = T::from_usize(hw).unwrap();
    for (p, &inv) in inv_std.iter().enumerate() {
        let r = p * hw..(p + 1) * hw;
        let (ys, gs) = (&y[r.clone()], &dy[r.clone()]);
        let mean_g = gs.iter().copied().sum::<T>() / count;
        let mean_gy = gs.iter().zip(ys).map(|(&g, &v)| g * v).sum::<T>() / count;
        for ((d, &g), &v) in dx[r].iter_mut().zip(gs).zip(ys) {
            *d = inv * (g - mean_g - v * mean_gy);
        }
    }
    dx
}

/// Batch norm over `(n, h, w)` for each channel.
pub(crate) fn batch_norm_forward<T: Float>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    eps: T,
) -> (Vec<T>, NormStats<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut stats = NormStats { mean: vec![], var: vec![], inv_std: vec![] };
    let count = T::from_usize(n * hw).unwrap();
    for ch in 0..c {
        let planes = || (0..n).map(move |b| (b * c + ch) * hw);
        let mut sum = T::zero();
        for off in planes() {
            sum += x[off..off + hw].iter().copied().sum::<T>();
        }
        let mean = sum / count;
        let mut sq = T::zero();
        for off in planes() {
            sq += x[off..off + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        let var = sq / count;
        let inv = T::one() / (var + eps).sqrt();
        for off in planes() {
            for i in off..off + hw {
                y[i] = (x[i] - mean) * inv;
            }
        }
        stats.mean.push(mean);
        stats.var.push(var);
        stats.inv_std.push(inv);
    }
    (y, stats)
}

pub(crate) fn batch_norm_backward<T: Float>(y: &[T], dy: &[T], inv_std: &[T], n: usize, hw: usize) -> Vec<T> {
    let c = inv_std.len();
    let mut dx = vec![T::zero(); y.len()];
    let count = T::from_usize(n * hw).unwrap();
    for (ch, &inv) in inv_std.iter().enumerate() {
        let mut sg = T::zero();
        let mut sgy = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sg += dy[i];
                sgy += dy[i] * y[i];
            }
        }
        let (mg, mgy) = (sg / count, sgy / count);
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dx[i] = inv * (dy[i] - mg - y[i] * mgy);
            }
        }
    }
    dx
}

pub(crate) fn upsample2x_forward<T: Float>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for i in 0..h2 {
            let srow = &src[(i / 2) * w..(i / 2 + 1) * w];
            let drow = &mut dst[i * w2..(i + 1) * w2];
            for (j, d) in drow.iter_mut().enumerate() {
                *d = srow[j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Float>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[(i / 2) * w + j / 2] += src[i * w2 + j];
            }
        }
    }
    dx
}
