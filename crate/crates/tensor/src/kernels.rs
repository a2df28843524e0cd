//! Slice-level kernels shared by forward and backward passes.

use crate::scalar::{gemm, Scalar};

/// Upper bound on the im2col scratch buffer, in elements.
const IM2COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be [B,C,H,W], got {:?}", x);
        assert_eq!(w.len(), 4, "conv2d weight must be [O,I,KH,KW], got {:?}", w);
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {:?}, weight {:?}", x, w);
        assert!(stride >= 1);
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than padded input");
        Self {
            batch: x[0],
            cin: x[1],
            h,
            w: wd,
            cout: w[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        }
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn chunk(&self) -> usize {
        (IM2COL_BUDGET / (self.k() * self.p()).max(1)).clamp(1, self.batch.max(1))
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, b0: usize, nb: usize, cols: &mut [T]) {
    let p = g.p();
    let ld = nb * p;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                for bi in 0..nb {
                    let xb = &x[((b0 + bi) * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut cols[row * ld + bi * p..][..p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &xb[iy as usize * g.w..][..g.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *o = if ix >= 0 && ix < g.w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, b0: usize, nb: usize, dx: &mut [T]) {
    let p = g.p();
    let ld = nb * p;
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                for bi in 0..nb {
                    let dxb = &mut dx[((b0 + bi) * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    let src = &cols[row * ld + bi * p..][..p];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dxb[iy as usize * g.w..][..g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.batch * g.cout * p];
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); k * chunk * p];
    let mut tmp = vec![T::zero(); g.cout * chunk * p];
    let mut b0 = 0;
    while b0 < g.batch {
        let nb = chunk.min(g.batch - b0);
        let ld = nb * p;
        im2col(x, g, b0, nb, &mut cols);
        gemm(false, false, g.cout, ld, k, T::one(), w, &cols[..k * ld], T::zero(), &mut tmp[..g.cout * ld]);
        for bi in 0..nb {
            for co in 0..g.cout {
                out[((b0 + bi) * g.cout + co) * p..][..p].copy_from_slice(&tmp[co * ld + bi * p..][..p]);
            }
        }
        b0 += nb;
    }
    out
}

/// Returns `(dx, dw)`; each is computed only when requested.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p) = (g.k(), g.p());
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); k * chunk * p];
    let mut dtmp = vec![T::zero(); g.cout * chunk * p];
    let mut b0 = 0;
    while b0 < g.batch {
        let nb = chunk.min(g.batch - b0);
        let ld = nb * p;
        for bi in 0..nb {
            for co in 0..g.cout {
                dtmp[co * ld + bi * p..][..p].copy_from_slice(&dy[((b0 + bi) * g.cout + co) * p..][..p]);
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(x, g, b0, nb, &mut cols);
            gemm(false, true, g.cout, k, ld, T::one(), &dtmp[..g.cout * ld], &cols[..k * ld], T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(true, false, k, ld, g.cout, T::one(), w, &dtmp[..g.cout * ld], T::zero(), &mut cols[..k * ld]);
            col2im_add(&cols, g, b0, nb, dx);
        }
        b0 += nb;
    }
    (dx, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(x: &[usize], k: usize, stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "max_pool2d input must be [B,C,H,W]");
        assert!(pad < k, "padding must be smaller than the window");
        let (h, w) = (x[2], x[3]);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "pool window larger than input");
        Self {
            planes: x[0] * x[1],
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        }
    }
}

/// Max pooling with implicit `-inf` padding; returns values and flat argmax indices.
pub fn max_pool2d_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let n = g.planes * g.oh * g.ow;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for pl in 0..g.planes {
        let base = pl * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..g.k {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.k {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let i = base + iy as usize * g.w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Normalization statistics over `(outer, inner)` for each of `c` channels.
///
/// Returns `(xhat, mean, biased var, rstd)`.
pub fn channel_stats<T: Scalar>(
    x: &[T],
    outer: usize,
    c: usize,
    inner: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let m = T::from_usize(outer * inner).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let s: T = x[(o * c + ch) * inner..][..inner].iter().copied().sum();
            mean[ch] += s;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for o in 0..outer {
        for ch in 0..c {
            let mu = mean[ch];
            let s: T = x[(o * c + ch) * inner..][..inner].iter().map(|&v| (v - mu) * (v - mu)).sum();
            var[ch] += s;
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    for o in 0..outer {
        for ch in 0..c {
            let (mu, r) = (mean[ch], rstd[ch]);
            let off = (o * c + ch) * inner;
            for (y, &v) in xhat[off..off + inner].iter_mut().zip(&x[off..off + inner]) {
                *y = (v - mu) * r;
            }
        }
    }
    (xhat, mean, var, rstd)
}
