//! Layer kernels on channel-major feature maps.
//!
//! Convolutions go through im2col + GEMM. A transposed convolution is the
//! data-gradient of the matching forward convolution, so both share the same
//! [`Geometry`] and the same im2col/col2im pair.

use crate::scalar::Real;
use crate::tensor::Feat;

/// Square kernel geometry of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub const fn new(k: usize, stride: usize, pad: usize) -> Self {
        Self { k, stride, pad }
    }

    /// Output extent of the forward convolution along one axis.
    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Input extent a transposed convolution produces from `len`.
    pub fn transposed_len(&self, len: usize) -> usize {
        (len - 1) * self.stride + self.k - 2 * self.pad
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold output rows `oy0..oy1` of sample `n` into `dst`, one row of the
/// `(C*k*k) x cols` matrix every `ld` elements. Out-of-range taps are zero.
#[allow(clippy::too_many_arguments)]
fn im2col_into<T: Real>(x: &Feat<T>, g: Geometry, n: usize, oy0: usize, oy1: usize, dst: &mut [T], ld: usize) {
    let ow = g.out_len(x.w);
    let kk = g.k * g.k;
    let plane_in = x.h * x.w;
    let width = (oy1 - oy0) * ow;
    for c in 0..x.c {
        let xn = &x.channel(c)[n * plane_in..(n + 1) * plane_in];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut dst[(c * kk + ky * g.k + kx) * ld..][..width];
                for oy in oy0..oy1 {
                    let d = &mut row[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &xn[iy as usize * x.w..(iy as usize + 1) * x.w];
                    if g.stride == 1 {
                        // ix = ox + kx - pad
                        let lo = g.pad.saturating_sub(kx).min(ow);
                        let hi = (x.w + g.pad).saturating_sub(kx).min(ow).max(lo);
                        d[..lo].fill(T::zero());
                        d[hi..].fill(T::zero());
                        if lo < hi {
                            let s0 = lo + kx - g.pad;
                            d[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix >= 0 && ix < x.w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatter-add the matrix back onto sample `n` of `out`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(src: &[T], ld: usize, out: &mut Feat<T>, g: Geometry, n: usize, oy0: usize, oy1: usize) {
    let (h, w) = (out.h, out.w);
    let ow = g.out_len(w);
    let kk = g.k * g.k;
    let plane_in = h * w;
    for ci in 0..out.c {
        let xn = &mut out.channel_mut(ci)[n * plane_in..(n + 1) * plane_in];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &src[(ci * kk + ky * g.k + kx) * ld..];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xn[iy as usize * w..(iy as usize + 1) * w];
                    let s = &row[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kx).min(ow);
                        let hi = (w + g.pad).saturating_sub(kx).min(ow).max(lo);
                        if lo < hi {
                            let d0 = lo + kx - g.pad;
                            for (d, &v) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&s[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in s.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfold `x` into a `(C*k*k) x (N*oh*ow)` matrix.
pub fn im2col<T: Real>(x: &Feat<T>, g: Geometry) -> (Vec<T>, usize, usize) {
    let (oh, ow) = (g.out_len(x.h), g.out_len(x.w));
    let cols_n = x.n * oh * ow;
    let mut cols = vec![T::zero(); x.c * g.k * g.k * cols_n];
    for n in 0..x.n {
        im2col_into(x, g, n, 0, oh, &mut cols[n * oh * ow..], cols_n);
    }
    (cols, oh, ow)
}

/// Fold a `(C*k*k) x (N*oh*ow)` matrix back onto a `(C, N, h, w)` map, summing overlaps.
pub fn col2im<T: Real>(cols: &[T], c: usize, n: usize, h: usize, w: usize, g: Geometry) -> Feat<T> {
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let cols_n = n * oh * ow;
    assert_eq!(cols.len(), c * g.k * g.k * cols_n, "col2im extent mismatch");
    let mut out = Feat::zeros(c, n, h, w);
    for ni in 0..n {
        col2im_add(&cols[ni * oh * ow..], cols_n, &mut out, g, ni, 0, oh);
    }
    out
}

/// Target size (elements) of one unfolded block, small enough to stay in cache.
const BAND_ELEMS: usize = 1 << 17;

/// A block of output columns: either the whole batch or a row band of one sample.
#[derive(Clone, Copy)]
struct Band {
    sample: Option<usize>,
    oy0: usize,
    oy1: usize,
    /// First output column of the band within the `(N*oh*ow)` plane.
    offset: usize,
    len: usize,
}

fn bands(n: usize, oh: usize, ow: usize, rows: usize) -> Vec<Band> {
    let p = n * oh * ow;
    if rows * p <= 2 * BAND_ELEMS {
        return vec![Band { sample: None, oy0: 0, oy1: oh, offset: 0, len: p }];
    }
    let step = (BAND_ELEMS / (rows * ow)).clamp(1, oh);
    let mut out = Vec::new();
    for s in 0..n {
        let mut oy0 = 0;
        while oy0 < oh {
            let oy1 = (oy0 + step).min(oh);
            out.push(Band { sample: Some(s), oy0, oy1, offset: (s * oh + oy0) * ow, len: (oy1 - oy0) * ow });
            oy0 = oy1;
        }
    }
    out
}

impl Band {
    fn unfold<T: Real>(&self, x: &Feat<T>, g: Geometry, buf: &mut Vec<T>) {
        let rows = x.c * g.k * g.k;
        buf.resize(rows * self.len, T::zero());
        match self.sample {
            Some(s) => im2col_into(x, g, s, self.oy0, self.oy1, buf, self.len),
            None => {
                let per = self.len / x.n;
                for s in 0..x.n {
                    im2col_into(x, g, s, self.oy0, self.oy1, &mut buf[s * per..], self.len);
                }
            }
        }
    }

    fn fold<T: Real>(&self, buf: &[T], out: &mut Feat<T>, g: Geometry) {
        match self.sample {
            Some(s) => col2im_add(buf, self.len, out, g, s, self.oy0, self.oy1),
            None => {
                let per = self.len / out.n;
                for s in 0..out.n {
                    col2im_add(&buf[s * per..], self.len, out, g, s, self.oy0, self.oy1);
                }
            }
        }
    }
}

/// Input of a forward convolution, kept for its backward pass. The unfolded
/// matrix is rebuilt band by band when needed rather than stored whole.
#[derive(Debug, Clone)]
pub struct Unfolded<T> {
    input: Feat<T>,
    geom: Geometry,
}

impl<T: Real> Unfolded<T> {
    pub fn new(x: &Feat<T>, g: Geometry) -> Self {
        Self { input: x.clone(), geom: g }
    }

    pub fn from_owned(x: Feat<T>, g: Geometry) -> Self {
        Self { input: x, geom: g }
    }

    pub fn input(&self) -> &Feat<T> {
        &self.input
    }

    pub fn input_dims(&self) -> (usize, usize, usize, usize) {
        let f = &self.input;
        (f.c, f.n, f.h, f.w)
    }
}

/// Forward convolution. `weight` is `(co, ci*k*k)` row-major.
pub fn conv2d_forward<T: Real>(
    unfolded: &Unfolded<T>,
    weight: &[T],
    bias: Option<&[T]>,
    co: usize,
    g: Geometry,
) -> Feat<T> {
    debug_assert_eq!(g, unfolded.geom);
    let x = &unfolded.input;
    let (oh, ow) = (g.out_len(x.h), g.out_len(x.w));
    let p = x.n * oh * ow;
    let r = x.c * g.k * g.k;
    assert_eq!(weight.len(), co * r, "conv weight extent mismatch");
    let mut out = Feat::zeros(co, x.n, oh, ow);
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out.channel_mut(o).fill(bv);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() {
        T::gemm(co, r, p, T::one(), weight, (r as isize, 1), &x.data, (p as isize, 1), beta, &mut out.data, (p as isize, 1));
        return out;
    }
    let mut buf = Vec::new();
    for band in bands(x.n, oh, ow, r) {
        band.unfold(x, g, &mut buf);
        T::gemm(
            co,
            r,
            band.len,
            T::one(),
            weight,
            (r as isize, 1),
            &buf,
            (band.len as isize, 1),
            beta,
            &mut out.data[band.offset..],
            (p as isize, 1),
        );
    }
    out
}

/// Accumulate `d weight += d_out * unfolded^T`.
pub fn conv2d_weight_grad<T: Real>(unfolded: &Unfolded<T>, d_out: &Feat<T>, d_weight: &mut [T], g: Geometry) {
    let x = &unfolded.input;
    let r = x.c * g.k * g.k;
    let p = d_out.plane();
    assert_eq!(d_weight.len(), d_out.c * r);
    if g.is_pointwise() {
        T::gemm(d_out.c, p, r, T::one(), &d_out.data, (p as isize, 1), &x.data, (1, p as isize), T::one(), d_weight, (r as isize, 1));
        return;
    }
    let mut buf = Vec::new();
    for band in bands(x.n, d_out.h, d_out.w, r) {
        band.unfold(x, g, &mut buf);
        T::gemm(
            d_out.c,
            band.len,
            r,
            T::one(),
            &d_out.data[band.offset..],
            (p as isize, 1),
            &buf,
            (1, band.len as isize),
            T::one(),
            d_weight,
            (r as isize, 1),
        );
    }
}

/// Accumulate per-channel sums of `d_out` into `d_bias`.
pub fn bias_grad<T: Real>(d_out: &Feat<T>, d_bias: &mut [T]) {
    for (o, db) in d_bias.iter_mut().enumerate() {
        *db += T::from_f64(sum_f64(d_out.channel(o)));
    }
}

/// Data gradient of a forward convolution: `col2im(weight^T * d_out)`.
pub fn conv2d_input_grad<T: Real>(
    weight: &[T],
    d_out: &Feat<T>,
    ci: usize,
    h: usize,
    w: usize,
    g: Geometry,
) -> Feat<T> {
    let r = ci * g.k * g.k;
    let p = d_out.plane();
    assert_eq!(weight.len(), d_out.c * r);
    let mut out = Feat::zeros(ci, d_out.n, h, w);
    if g.is_pointwise() {
        T::gemm(r, d_out.c, p, T::one(), weight, (1, r as isize), &d_out.data, (p as isize, 1), T::zero(), &mut out.data, (p as isize, 1));
        return out;
    }
    let mut buf = Vec::new();
    for band in bands(d_out.n, d_out.h, d_out.w, r) {
        buf.resize(r * band.len, T::zero());
        T::gemm(
            r,
            d_out.c,
            band.len,
            T::one(),
            weight,
            (1, r as isize),
            &d_out.data[band.offset..],
            (p as isize, 1),
            T::zero(),
            &mut buf,
            (band.len as isize, 1),
        );
        band.fold(&buf, &mut out, g);
    }
    out
}

/// Sum in `f64`, accumulated over short `T` runs so the inner loop vectorises.
pub fn sum_f64<T: Real>(xs: &[T]) -> f64 {
    let mut total = 0.0;
    for chunk in xs.chunks(256) {
        let mut acc = [T::zero(); 8];
        let mut it = chunk.chunks_exact(8);
        for c in &mut it {
            for i in 0..8 {
                acc[i] += c[i];
            }
        }
        total += acc.iter().map(|v| v.as_f64()).sum::<f64>();
        total += it.remainder().iter().map(|v| v.as_f64()).sum::<f64>();
    }
    total
}

/// Dot product with the same accumulation scheme as [`sum_f64`].
pub fn dot_f64<T: Real>(xs: &[T], ys: &[T]) -> f64 {
    let mut total = 0.0;
    for (cx, cy) in xs.chunks(256).zip(ys.chunks(256)) {
        let mut acc = [T::zero(); 8];
        let mut ix = cx.chunks_exact(8);
        let mut iy = cy.chunks_exact(8);
        for (a, b) in (&mut ix).zip(&mut iy) {
            for i in 0..8 {
                acc[i] += a[i] * b[i];
            }
        }
        total += acc.iter().map(|v| v.as_f64()).sum::<f64>();
        total += ix.remainder().iter().zip(iy.remainder()).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>();
    }
    total
}

/// Transposed convolution. `weight` is `(ci, co*k*k)` row-major (the layout of
/// the forward convolution it transposes, read the other way round).
pub fn conv_transpose_forward<T: Real>(
    x: &Feat<T>,
    weight: &[T],
    bias: Option<&[T]>,
    co: usize,
    g: Geometry,
) -> Feat<T> {
    let r = co * g.k * g.k;
    let p = x.plane();
    assert_eq!(weight.len(), x.c * r, "transposed conv weight extent mismatch");
    let (oh, ow) = (g.transposed_len(x.h), g.transposed_len(x.w));
    debug_assert_eq!(g.out_len(oh), x.h);
    let mut cols = vec![T::zero(); r * p];
    T::gemm(
        r,
        x.c,
        p,
        T::one(),
        weight,
        (1, r as isize),
        &x.data,
        (p as isize, 1),
        T::zero(),
        &mut cols,
        (p as isize, 1),
    );
    let mut out = col2im(&cols, co, x.n, oh, ow, g);
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            for v in out.channel_mut(o) {
                *v += bv;
            }
        }
    }
    out
}

/// Backward of [`conv_transpose_forward`]: accumulates the weight gradient and
/// returns the data gradient.
pub fn conv_transpose_backward<T: Real>(
    x: &Feat<T>,
    weight: &[T],
    d_out: &Feat<T>,
    d_weight: &mut [T],
    g: Geometry,
) -> Feat<T> {
    let r = d_out.c * g.k * g.k;
    let (cols, oh, ow) = im2col(d_out, g);
    debug_assert_eq!((oh, ow), (x.h, x.w));
    let p = x.plane();
    T::gemm(
        x.c,
        p,
        r,
        T::one(),
        &x.data,
        (p as isize, 1),
        &cols,
        (1, p as isize),
        T::one(),
        d_weight,
        (r as isize, 1),
    );
    let mut dx = Feat::zeros(x.c, x.n, x.h, x.w);
    T::gemm(
        x.c,
        r,
        p,
        T::one(),
        weight,
        (r as isize, 1),
        &cols,
        (p as isize, 1),
        T::zero(),
        &mut dx.data,
        (p as isize, 1),
    );
    dx
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output
/// element, the offset of the winning input inside its channel plane.
pub fn maxpool2_forward<T: Real>(x: &Feat<T>) -> (Feat<T>, Vec<u32>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "max pooling needs even extents");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Feat::zeros(x.c, x.n, oh, ow);
    let mut idx = vec![0u32; out.data.len()];
    let (pin, pout) = (x.plane(), out.plane());
    for c in 0..x.c {
        let xc = &x.data[c * pin..(c + 1) * pin];
        for n in 0..x.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = n * x.h * x.w + 2 * oy * x.w + 2 * ox;
                    let cand = [base, base + 1, base + x.w, base + x.w + 1];
                    let mut best = cand[0];
                    for &q in &cand[1..] {
                        if xc[q] > xc[best] {
                            best = q;
                        }
                    }
                    let o = c * pout + (n * oh + oy) * ow + ox;
                    out.data[o] = xc[best];
                    idx[o] = best as u32;
                }
            }
        }
    }
    (out, idx)
}

/// Route `d_out` back to the pooled winners.
pub fn maxpool2_backward<T: Real>(d_out: &Feat<T>, idx: &[u32], h: usize, w: usize) -> Feat<T> {
    let mut dx = Feat::zeros(d_out.c, d_out.n, h, w);
    let (pin, pout) = (dx.plane(), d_out.plane());
    for c in 0..d_out.c {
        for j in 0..pout {
            dx.data[c * pin + idx[c * pout + j] as usize] += d_out.data[c * pout + j];
        }
    }
    dx
}

/// Adjoint of [`maxpool2_backward`]: read each output's winner.
pub fn maxpool2_gather<T: Real>(x: &Feat<T>, idx: &[u32], oh: usize, ow: usize) -> Feat<T> {
    let mut out = Feat::zeros(x.c, x.n, oh, ow);
    let (pin, pout) = (x.plane(), out.plane());
    for c in 0..x.c {
        for j in 0..pout {
            out.data[c * pout + j] = x.data[c * pin + idx[c * pout + j] as usize];
        }
    }
    out
}

/// Per-channel batch statistics captured by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub x_hat: Feat<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn batchnorm_train_forward<T: Real>(
    x: &Feat<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Feat<T>, BatchNormCache<T>) {
    let m = x.plane();
    let mut y = Feat::zeros(x.c, x.n, x.h, x.w);
    let mut x_hat = Feat::zeros(x.c, x.n, x.h, x.w);
    let mut inv_std = Vec::with_capacity(x.c);
    let mut means = Vec::with_capacity(x.c);
    let mut vars = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let xc = x.channel(c);
        let mean = sum_f64(xc) / m as f64;
        let mean_t = T::from_f64(mean);
        let mut var = 0.0;
        for chunk in xc.chunks(256) {
            let mut acc = [T::zero(); 8];
            let mut it = chunk.chunks_exact(8);
            for v in &mut it {
                for i in 0..8 {
                    let d = v[i] - mean_t;
                    acc[i] += d * d;
                }
            }
            var += acc.iter().map(|v| v.as_f64()).sum::<f64>();
            var += it.remainder().iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
        }
        var /= m as f64;
        let is = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma[c], beta[c]);
        let is_t = T::from_f64(is);
        for ((h, o), &v) in x_hat.channel_mut(c).iter_mut().zip(y.channel_mut(c)).zip(xc) {
            *h = (v - mean_t) * is_t;
            *o = g * *h + b;
        }
        inv_std.push(is_t);
        means.push(mean);
        vars.push(var);
    }
    (y, BatchNormCache { x_hat, inv_std, mean: means, var: vars })
}

pub fn batchnorm_eval_forward<T: Real>(
    x: &Feat<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Feat<T> {
    let mut y = Feat::zeros(x.c, x.n, x.h, x.w);
    for c in 0..x.c {
        let is = T::from_f64(1.0 / (running_var[c].as_f64() + eps).sqrt());
        let (g, b, rm) = (gamma[c], beta[c], running_mean[c]);
        for (o, &v) in y.channel_mut(c).iter_mut().zip(x.channel(c)) {
            *o = g * ((v - rm) * is) + b;
        }
    }
    y
}

/// Backward of a training-mode batch norm. Accumulates `d_gamma`, `d_beta`.
pub fn batchnorm_backward<T: Real>(
    d_y: &Feat<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
    d_gamma: &mut [T],
    d_beta: &mut [T],
) -> Feat<T> {
    let m = d_y.plane() as f64;
    let mut dx = Feat::zeros(d_y.c, d_y.n, d_y.h, d_y.w);
    for c in 0..d_y.c {
        let dy = d_y.channel(c);
        let xh = cache.x_hat.channel(c);
        let sum_dy = sum_f64(dy);
        let sum_dy_xh = dot_f64(dy, xh);
        d_beta[c] += T::from_f64(sum_dy);
        d_gamma[c] += T::from_f64(sum_dy_xh);
        let scale = T::from_f64(gamma[c].as_f64() * cache.inv_std[c].as_f64() / m);
        let (mt, sdy, sdx) = (T::from_f64(m), T::from_f64(sum_dy), T::from_f64(sum_dy_xh));
        for ((o, &a), &b) in dx.channel_mut(c).iter_mut().zip(dy).zip(xh) {
            *o = scale * (mt * a - sdy - b * sdx);
        }
    }
    dx
}

/// In-place ReLU; returns nothing because the output itself marks the active set.
pub fn relu_inplace<T: Real>(x: &mut Feat<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// `d_x = d_y` where the ReLU output was positive, else 0.
pub fn relu_backward<T: Real>(d_y: &mut Feat<T>, y: &Feat<T>) {
    for (d, &v) in d_y.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
}

/// Leaky ReLU applied out of place so the pre-activation can be kept.
pub fn leaky_relu<T: Real>(z: &Feat<T>, slope: T) -> Feat<T> {
    let data = z.data.iter().map(|&v| if v > T::zero() { v } else { v * slope }).collect();
    Feat { c: z.c, n: z.n, h: z.h, w: z.w, data }
}

/// Multiply `d` by the leaky-ReLU derivative at pre-activation `z`.
pub fn leaky_relu_scale<T: Real>(d: &mut Feat<T>, z: &Feat<T>, slope: T) {
    for (g, &v) in d.data.iter_mut().zip(&z.data) {
        if v <= T::zero() {
            *g *= slope;
        }
    }
}
