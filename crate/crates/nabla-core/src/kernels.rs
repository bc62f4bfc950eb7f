//! Raw numeric routines behind the tape ops. Everything is plain
//! slices; shape validation happens one level up in `tape`.
//!
//! Convolutions run as im2col + matmul. The transpose convolution is
//! implemented independently (col2im of a transposed-weight product)
//! rather than by reusing the convolution backward pass, so the adjoint
//! identity between the two can serve as a genuine cross-check in tests.

use crate::scalar::Scalar;

/// `out += a * b` for row-major `a: m x k`, `b: k x n`, `out: m x n`.
pub fn matmul_acc<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a * b^T` for `a: m x k`, `b: n x k`, `out: m x n`.
pub fn matmul_abt_acc<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out += a^T * b` for `a: k x m`, `b: k x n`, `out: m x n`.
pub fn matmul_atb_acc<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == E::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Unfolds one image `(c, h, w)` into patch columns
/// `(c*kh*kw) x (oh*ow)` for a convolution with the given stride and
/// symmetric zero padding. Out-of-bounds taps read as zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Scalar>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let l = oh * ow;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * l;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for ox in 0..ow {
                            cols[row + oy * ow + ox] = E::zero();
                        }
                        continue;
                    }
                    let x_row = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        cols[row + oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            x[x_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into an image
/// buffer. `img` is accumulated into, not cleared.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<E: Scalar>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    img: &mut [E],
) {
    debug_assert_eq!(img.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let l = oh * ow;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ch * kh + ki) * kw + kj) * l;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let img_row = (ch * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = img_row + ix as usize;
                        img[i] = img[i] + cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Geometry of one conv/pool application; all fields per spatial axis.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Convolution forward: `y[n] = w . im2col(x[n]) + b`, weight layout
/// `(cout, cin, kh, kw)`.
pub fn conv2d_fw<E: Scalar>(x: &[E], w: &[E], b: Option<&[E]>, g: &Conv2dGeom, y: &mut [E]) {
    let k = g.cin * g.kh * g.kw;
    let l = g.oh * g.ow;
    let mut cols = vec![E::zero(); k * l];
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        im2col(xn, g.cin, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.oh, g.ow, &mut cols);
        let yn = &mut y[n * g.cout * l..(n + 1) * g.cout * l];
        yn.fill(E::zero());
        matmul_acc(w, &cols, yn, g.cout, k, l);
        if let Some(b) = b {
            for oc in 0..g.cout {
                let bv = b[oc];
                for v in &mut yn[oc * l..(oc + 1) * l] {
                    *v = *v + bv;
                }
            }
        }
    }
}

/// Convolution backward. Accumulates into `dx`, `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bw<E: Scalar>(
    x: &[E],
    w: &[E],
    dy: &[E],
    g: &Conv2dGeom,
    dx: Option<&mut [E]>,
    dw: Option<&mut [E]>,
    db: Option<&mut [E]>,
) {
    let k = g.cin * g.kh * g.kw;
    let l = g.oh * g.ow;
    let mut cols = vec![E::zero(); k * l];
    let mut dcols = vec![E::zero(); k * l];
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let dyn_ = &dy[n * g.cout * l..(n + 1) * g.cout * l];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(xn, g.cin, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.oh, g.ow, &mut cols);
            matmul_abt_acc(dyn_, &cols, dw, g.cout, l, k);
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.fill(E::zero());
            matmul_atb_acc(w, dyn_, &mut dcols, k, g.cout, l);
            let dxn = &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
            col2im_acc(&dcols, g.cin, g.h, g.w, g.kh, g.kw, g.stride, g.pad, g.oh, g.ow, dxn);
        }
    }
    if let Some(db) = db {
        for n in 0..g.n {
            for oc in 0..g.cout {
                let row = (n * g.cout + oc) * l;
                let mut acc = E::zero();
                for &v in &dy[row..row + l] {
                    acc = acc + v;
                }
                db[oc] = db[oc] + acc;
            }
        }
    }
}

/// Transpose-convolution geometry: input `(n, cin, h, w)`, weight
/// `(cin, cout, kh, kw)`, output `(n, cout, oh, ow)` with
/// `oh = stride*(h-1) + kh - 2*pad`.
#[derive(Debug, Clone, Copy)]
pub struct ConvT2dGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Transpose convolution forward: each input pixel scatters a weighted
/// kernel stamp into the output.
pub fn convt2d_fw<E: Scalar>(x: &[E], w: &[E], b: Option<&[E]>, g: &ConvT2dGeom, y: &mut [E]) {
    let k2 = g.cout * g.kh * g.kw;
    let l = g.h * g.w;
    let mut cols = vec![E::zero(); k2 * l];
    for n in 0..g.n {
        let xn = &x[n * g.cin * l..(n + 1) * g.cin * l];
        cols.fill(E::zero());
        // cols = w^T . x[n], with w viewed as (cin) x (cout*kh*kw)
        matmul_atb_acc(w, xn, &mut cols, k2, g.cin, l);
        let yn = &mut y[n * g.cout * g.oh * g.ow..(n + 1) * g.cout * g.oh * g.ow];
        yn.fill(E::zero());
        col2im_acc(&cols, g.cout, g.oh, g.ow, g.kh, g.kw, g.stride, g.pad, g.h, g.w, yn);
        if let Some(b) = b {
            for oc in 0..g.cout {
                let bv = b[oc];
                for v in &mut yn[oc * g.oh * g.ow..(oc + 1) * g.oh * g.ow] {
                    *v = *v + bv;
                }
            }
        }
    }
}

/// Transpose convolution backward. Accumulates into `dx`, `dw`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn convt2d_bw<E: Scalar>(
    x: &[E],
    w: &[E],
    dy: &[E],
    g: &ConvT2dGeom,
    dx: Option<&mut [E]>,
    dw: Option<&mut [E]>,
    db: Option<&mut [E]>,
) {
    let k2 = g.cout * g.kh * g.kw;
    let l = g.h * g.w;
    let mut dcols = vec![E::zero(); k2 * l];
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..g.n {
        let xn = &x[n * g.cin * l..(n + 1) * g.cin * l];
        let dyn_ = &dy[n * g.cout * g.oh * g.ow..(n + 1) * g.cout * g.oh * g.ow];
        im2col(dyn_, g.cout, g.oh, g.ow, g.kh, g.kw, g.stride, g.pad, g.h, g.w, &mut dcols);
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.cin * l..(n + 1) * g.cin * l];
            matmul_acc(w, &dcols, dxn, g.cin, k2, l);
        }
        if let Some(dw) = dw.as_deref_mut() {
            matmul_abt_acc(xn, &dcols, dw, g.cin, l, k2);
        }
    }
    if let Some(db) = db {
        let ol = g.oh * g.ow;
        for n in 0..g.n {
            for oc in 0..g.cout {
                let row = (n * g.cout + oc) * ol;
                let mut acc = E::zero();
                for &v in &dy[row..row + ol] {
                    acc = acc + v;
                }
                db[oc] = db[oc] + acc;
            }
        }
    }
}

/// Max-pool forward. Records, per output element, the flat index of the
/// winning input element; ties go to the first window position in
/// row-major scan order. Padded positions never win.
#[allow(clippy::too_many_arguments)]
pub fn maxpool_fw<E: Scalar>(
    x: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    y: &mut [E],
    argmax: &mut [u32],
) {
    for ni in 0..n {
        for ch in 0..c {
            let plane = (ni * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = E::neg_infinity();
                    let mut best_i = u32::MAX;
                    for ki in 0..kh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = plane + iy as usize * w + ix as usize;
                            // First valid element claims the slot so a
                            // NaN-filled window still records an
                            // in-bounds index for backward.
                            if best_i == u32::MAX || x[i] > best {
                                best = x[i];
                                best_i = i as u32;
                            }
                        }
                    }
                    let o = ((ni * c + ch) * oh + oy) * ow + ox;
                    y[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
    }
}

/// Per-channel batch statistics over the `(n, h, w)` axes: biased
/// variance, as used for normalization.
pub fn channel_moments<E: Scalar>(x: &[E], n: usize, c: usize, hw: usize) -> (Vec<E>, Vec<E>) {
    let m = n * hw;
    let inv_m = E::from_f64(1.0 / m as f64);
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ch in 0..c {
        let mut acc = E::zero();
        for ni in 0..n {
            let row = (ni * c + ch) * hw;
            for &v in &x[row..row + hw] {
                acc = acc + v;
            }
        }
        mean[ch] = acc * inv_m;
    }
    for ch in 0..c {
        let mu = mean[ch];
        let mut acc = E::zero();
        for ni in 0..n {
            let row = (ni * c + ch) * hw;
            for &v in &x[row..row + hw] {
                let d = v - mu;
                acc = acc + d * d;
            }
        }
        var[ch] = acc * inv_m;
    }
    (mean, var)
}
