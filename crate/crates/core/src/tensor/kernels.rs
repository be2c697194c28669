//! Raw forward/backward kernels over flat NCHW buffers.
//!
//! These functions do no shape validation; the tape checks shapes before
//! dispatching here.

use super::Element;

/// Geometry of a 2-d convolution over a batch.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (k, p) = (g.patch(), g.out_pixels());
    let mut out = vec![T::zero(); g.n * g.cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for bi in 0..g.n {
        let xb = &x[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        let ob = &mut out[bi * g.cout * p..(bi + 1) * g.cout * p];
        if let Some(b) = b {
            for (co, row) in ob.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(g.cout, k, p, T::one(), w, k as isize, 1, src, p as isize, 1, beta, ob, p as isize, 1);
    }
    out
}

/// Accumulates convolution gradients into whichever buffers are given.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (k, p) = (g.patch(), g.out_pixels());
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for bi in 0..g.n {
        let xb = &x[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w];
        let dyb = &dy[bi * g.cout * p..(bi + 1) * g.cout * p];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in dyb.chunks(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            // dW (cout x k) += dY (cout x p) * colsᵀ (p x k)
            T::gemm(g.cout, p, k, T::one(), dyb, p as isize, 1, src, 1, p as isize, T::one(), dw, k as isize, 1);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[bi * g.cin * g.h * g.w..(bi + 1) * g.cin * g.h * g.w];
            if g.is_pointwise() {
                // dX (cin x p) += Wᵀ (cin x cout) * dY (cout x p)
                T::gemm(g.cin, g.cout, p, T::one(), w, 1, k as isize, dyb, p as isize, 1, T::one(), dxb, p as isize, 1);
            } else {
                T::gemm(k, g.cout, p, T::one(), w, 1, k as isize, dyb, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                col2im(g, &dcols, dxb);
            }
        }
    }
}

/// Max pooling; returns the outputs and, per output, the flat input index of
/// the selected element. Ties resolve to the first element in row-major
/// window order. Out-of-range positions act as negative infinity.
#[allow(clippy::too_many_arguments)]
pub fn maxpool2d_forward<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> (Vec<T>, Vec<usize>) {
    let window = |o: usize, len: usize| {
        let start = (o * stride) as isize - pad as isize;
        (start.max(0) as usize, (start + k as isize).clamp(0, len as isize) as usize)
    };
    let cols: Vec<(usize, usize)> = (0..wo).map(|ox| window(ox, w)).collect();
    let rows: Vec<(usize, usize)> = (0..ho).map(|oy| window(oy, h)).collect();
    let mut out = vec![T::neg_infinity(); n * c * ho * wo];
    let mut arg = vec![usize::MAX; n * c * ho * wo];
    // Row maxima first, then the maximum of those down each column. Taking
    // the earliest row on ties, and the leftmost element within a row, keeps
    // the first maximum in row-major window order.
    let mut row_best = vec![T::neg_infinity(); h * wo];
    let mut row_arg = vec![usize::MAX; h * wo];
    for plane in 0..n * c {
        let base = plane * h * w;
        for iy in 0..h {
            let row = &x[base + iy * w..base + (iy + 1) * w];
            for (ox, &(a, b)) in cols.iter().enumerate() {
                if a >= b {
                    continue;
                }
                let (mut best, mut at) = (row[a], a);
                for (ix, &v) in row.iter().enumerate().take(b).skip(a + 1) {
                    if v > best {
                        best = v;
                        at = ix;
                    }
                }
                row_best[iy * wo + ox] = best;
                row_arg[iy * wo + ox] = base + iy * w + at;
            }
        }
        let o = plane * ho * wo;
        for (oy, &(a, b)) in rows.iter().enumerate() {
            if a >= b {
                continue;
            }
            for ox in 0..wo {
                let (mut best, mut at) = (row_best[a * wo + ox], row_arg[a * wo + ox]);
                for iy in a + 1..b {
                    let v = row_best[iy * wo + ox];
                    if at == usize::MAX || v > best {
                        best = v;
                        at = row_arg[iy * wo + ox];
                    }
                }
                out[o + oy * wo + ox] = best;
                arg[o + oy * wo + ox] = at;
            }
        }
    }
    (out, arg)
}

pub fn upsample_nearest_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let row = &src[(oy / f) * w..(oy / f + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / f]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<T: Element>(dy: &[T], dx: &mut [T], planes: usize, h: usize, w: usize, f: usize) {
    let (oh, ow) = (h * f, w * f);
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / f) * w + ox / f] += src[oy * ow + ox];
            }
        }
    }
}

/// Saved state of a training-mode batch norm forward.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

pub fn batchnorm_train_forward<T: Element>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, BnSaved<T>) {
    let m = T::from_f64((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let s = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            mean[ch] += s.iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|v| *v = *v / m);
    for b in 0..n {
        for ch in 0..c {
            let s = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let mu = mean[ch];
            var[ch] += s.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / m);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, BnSaved { xhat, inv_std, mean, var })
}

/// Gradients of a training-mode batch norm; returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward<T: Element>(
    dy: &[T],
    saved: &BnSaved<T>,
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::from_f64((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * saved.xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let k = gamma[ch] * saved.inv_std[ch] / m;
            for i in off..off + hw {
                dx[i] = k * (m * dy[i] - dbeta[ch] - saved.xhat[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Bilinear resize of each plane with half-pixel centers (no corner
/// alignment). Used by the decoders only, so it has no backward.
pub fn resize_bilinear<T: Element>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let taps = |o: usize, scale: f64, len: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let ytaps: Vec<_> = (0..oh).map(|o| taps(o, sy, h)).collect();
    let xtaps: Vec<_> = (0..ow).map(|o| taps(o, sx, w)).collect();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ytaps {
            for &(x0, x1, fx) in &xtaps {
                let v00 = src[y0 * w + x0].as_f64();
                let v01 = src[y0 * w + x1].as_f64();
                let v10 = src[y1 * w + x0].as_f64();
                let v11 = src[y1 * w + x1].as_f64();
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                out.push(T::from_f64(top + (bot - top) * fy));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_identity_at_same_size() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(resize_bilinear(&x, 1, 3, 4, 3, 4), x);
    }

    #[test]
    fn bilinear_upsample_preserves_constant() {
        let x = vec![2.5f64; 16];
        assert!(resize_bilinear(&x, 1, 4, 4, 32, 32).iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }
}
