//! Forward and backward kernels for the dense operators used by the
//! autograd tape. Everything works on single `C x H x W` samples.

use crate::tensor::{Scalar, Tensor};

/// Output extent of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: conv_out_len(h, k, stride, pad),
            wo: conv_out_len(w, k, stride, pad),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose tap `kj` lands inside the row.
fn valid_cols(g: &Geom, kj: usize) -> (usize, usize) {
    let lo = if kj >= g.pad {
        0
    } else {
        (g.pad - kj).div_ceil(g.stride)
    };
    let hi = if g.w + g.pad <= kj {
        0
    } else {
        (g.w + g.pad - kj).div_ceil(g.stride).min(g.wo)
    };
    (lo.min(hi), hi)
}

fn im2col<F: Scalar>(x: &[F], g: &Geom, cols: &mut [F]) {
    let n = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out.fill(F::zero());
                        continue;
                    }
                    out[..lo].fill(F::zero());
                    out[hi..].fill(F::zero());
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (v, s) in out[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Scalar>(cols: &[F], g: &Geom, dx: &mut [F]) {
    let n = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let start = lo * g.stride + kj - g.pad;
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (d, v) in dst[start..].iter_mut().step_by(g.stride).zip(s) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

fn add_bias<F: Scalar>(out: &mut [F], bias: &[F], n: usize) {
    for (o, &b) in bias.iter().enumerate() {
        out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<F: Scalar>(dy: &[F], cout: usize, n: usize) -> Vec<F> {
    (0..cout)
        .map(|o| dy[o * n..(o + 1) * n].iter().copied().sum())
        .collect()
}

/// Cross-correlation of `x: C x H x W` with `w: O x C x K x K`.
pub fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Tensor<F> {
    let (c, h, wd) = x.dims3();
    let (o, k) = (w.shape()[0], w.shape()[2]);
    debug_assert_eq!(w.shape()[1], c);
    let g = Geom::new(c, h, wd, k, stride, pad);
    let n = g.cols();
    let mut out = vec![F::zero(); o * n];
    if g.is_pointwise() {
        F::gemm(o, c, n, w.data(), false, x.data(), false, &mut out, false);
    } else {
        let mut cols = vec![F::zero(); g.rows() * n];
        im2col(x.data(), &g, &mut cols);
        F::gemm(o, g.rows(), n, w.data(), false, &cols, false, &mut out, false);
    }
    if let Some(b) = b {
        add_bias(&mut out, b.data(), n);
    }
    Tensor::from_vec(&[o, g.ho, g.wo], out).expect("conv output shape")
}

pub struct ConvGrads<F> {
    pub dx: Option<Tensor<F>>,
    pub dw: Option<Tensor<F>>,
    pub db: Option<Tensor<F>>,
}

pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> ConvGrads<F> {
    let (c, h, wd) = x.dims3();
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let g = Geom::new(c, h, wd, k, stride, pad);
    let n = g.cols();
    let rows = g.rows();
    let cols = if need.1 && !g.is_pointwise() {
        let mut cols = vec![F::zero(); rows * n];
        im2col(x.data(), &g, &mut cols);
        Some(cols)
    } else {
        None
    };
    let dw = need.1.then(|| {
        let mut dw = vec![F::zero(); o * rows];
        let src = cols.as_deref().unwrap_or(x.data());
        F::gemm(o, n, rows, dy.data(), false, src, true, &mut dw, false);
        Tensor::from_vec(w.shape(), dw).expect("dw shape")
    });
    let dx = need.0.then(|| {
        if g.is_pointwise() {
            let mut dx = vec![F::zero(); c * n];
            F::gemm(c, o, n, w.data(), true, dy.data(), false, &mut dx, false);
            Tensor::from_vec(x.shape(), dx).expect("dx shape")
        } else {
            let mut dcols = vec![F::zero(); rows * n];
            F::gemm(rows, o, n, w.data(), true, dy.data(), false, &mut dcols, false);
            let mut dx = vec![F::zero(); c * h * wd];
            col2im(&dcols, &g, &mut dx);
            Tensor::from_vec(x.shape(), dx).expect("dx shape")
        }
    });
    let db = need.2.then(|| Tensor::from_vec(&[o], bias_grad(dy.data(), o, n)).expect("db"));
    ConvGrads { dx, dw, db }
}

/// Bilinear read of `plane` (`h x w`) at fractional `(py, px)`; samples
/// outside the plane read as zero.
#[inline]
pub fn bilinear<F: Scalar>(plane: &[F], h: usize, w: usize, py: F, px: F) -> F {
    let y0f = py.floor();
    let x0f = px.floor();
    let ly = py - y0f;
    let lx = px - x0f;
    let y0 = y0f.to_i64().unwrap_or(i64::MIN / 2);
    let x0 = x0f.to_i64().unwrap_or(i64::MIN / 2);
    let read = |y: i64, x: i64| -> F {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            F::zero()
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let one = F::one();
    read(y0, x0) * (one - ly) * (one - lx)
        + read(y0, x0 + 1) * (one - ly) * lx
        + read(y0 + 1, x0) * ly * (one - lx)
        + read(y0 + 1, x0 + 1) * ly * lx
}

/// Scatter `g` through the bilinear read at `(py, px)`: accumulates into
/// `dplane` and returns `(d/dpy, d/dpx)` of the sampled value times `g`.
#[inline]
fn bilinear_backward<F: Scalar>(
    plane: &[F],
    dplane: Option<&mut [F]>,
    h: usize,
    w: usize,
    py: F,
    px: F,
    g: F,
) -> (F, F) {
    let y0f = py.floor();
    let x0f = px.floor();
    let ly = py - y0f;
    let lx = px - x0f;
    let y0 = y0f.to_i64().unwrap_or(i64::MIN / 2);
    let x0 = x0f.to_i64().unwrap_or(i64::MIN / 2);
    let inside = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64;
    let read = |y: i64, x: i64| -> F {
        if inside(y, x) {
            plane[y as usize * w + x as usize]
        } else {
            F::zero()
        }
    };
    let one = F::one();
    let v00 = read(y0, x0);
    let v01 = read(y0, x0 + 1);
    let v10 = read(y0 + 1, x0);
    let v11 = read(y0 + 1, x0 + 1);
    if let Some(d) = dplane {
        let corners = [
            (y0, x0, (one - ly) * (one - lx)),
            (y0, x0 + 1, (one - ly) * lx),
            (y0 + 1, x0, ly * (one - lx)),
            (y0 + 1, x0 + 1, ly * lx),
        ];
        for (y, x, wt) in corners {
            if inside(y, x) {
                d[y as usize * w + x as usize] += g * wt;
            }
        }
    }
    let dpy = ((v10 - v00) * (one - lx) + (v11 - v01) * lx) * g;
    let dpx = ((v01 - v00) * (one - ly) + (v11 - v10) * ly) * g;
    (dpy, dpx)
}

/// Sampling positions and columns of a stride-1 deformable convolution
/// with `K x K` taps and padding `K / 2`. Offsets are `(2 K^2) x H x W`
/// with channel `2 t` holding the row shift and `2 t + 1` the column
/// shift of tap `t = ki * K + kj`.
fn deform_cols<F: Scalar>(x: &Tensor<F>, off: &Tensor<F>, k: usize) -> Vec<F> {
    let (c, h, w) = x.dims3();
    let n = h * w;
    let pad = (k / 2) as isize;
    let offd = off.data();
    let mut cols = vec![F::zero(); c * k * k * n];
    for ch in 0..c {
        let plane = x.channel(ch);
        for ki in 0..k {
            for kj in 0..k {
                let tap = ki * k + kj;
                let dys = &offd[2 * tap * n..(2 * tap + 1) * n];
                let dxs = &offd[(2 * tap + 1) * n..(2 * tap + 2) * n];
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..h {
                    let by = F::of((oy as isize + ki as isize - pad) as f64);
                    for ox in 0..w {
                        let bx = F::of((ox as isize + kj as isize - pad) as f64);
                        let i = oy * w + ox;
                        dst[i] = bilinear(plane, h, w, by + dys[i], bx + dxs[i]);
                    }
                }
            }
        }
    }
    cols
}

pub fn deform_conv_forward<F: Scalar>(
    x: &Tensor<F>,
    off: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
) -> Tensor<F> {
    let (c, h, wd) = x.dims3();
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let n = h * wd;
    let cols = deform_cols(x, off, k);
    let mut out = vec![F::zero(); o * n];
    F::gemm(o, c * k * k, n, w.data(), false, &cols, false, &mut out, false);
    if let Some(b) = b {
        add_bias(&mut out, b.data(), n);
    }
    Tensor::from_vec(&[o, h, wd], out).expect("deform output shape")
}

pub struct DeformGrads<F> {
    pub dx: Option<Tensor<F>>,
    pub doff: Option<Tensor<F>>,
    pub dw: Option<Tensor<F>>,
    pub db: Option<Tensor<F>>,
}

pub fn deform_conv_backward<F: Scalar>(
    x: &Tensor<F>,
    off: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    need: (bool, bool, bool, bool),
) -> DeformGrads<F> {
    let (c, h, wd) = x.dims3();
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let n = h * wd;
    let rows = c * k * k;
    let dw = need.2.then(|| {
        let cols = deform_cols(x, off, k);
        let mut dw = vec![F::zero(); o * rows];
        F::gemm(o, n, rows, dy.data(), false, &cols, true, &mut dw, false);
        Tensor::from_vec(w.shape(), dw).expect("dw")
    });
    let db = need.3.then(|| Tensor::from_vec(&[o], bias_grad(dy.data(), o, n)).expect("db"));
    let (dx, doff) = if need.0 || need.1 {
        let mut dcols = vec![F::zero(); rows * n];
        F::gemm(rows, o, n, w.data(), true, dy.data(), false, &mut dcols, false);
        let mut dx = vec![F::zero(); c * n];
        let mut doff = vec![F::zero(); 2 * k * k * n];
        let pad = (k / 2) as isize;
        let offd = off.data();
        for ch in 0..c {
            let plane = x.channel(ch);
            for ki in 0..k {
                for kj in 0..k {
                    let tap = ki * k + kj;
                    let row = (ch * k + ki) * k + kj;
                    for oy in 0..h {
                        let by = F::of((oy as isize + ki as isize - pad) as f64);
                        for ox in 0..wd {
                            let bx = F::of((ox as isize + kj as isize - pad) as f64);
                            let i = oy * wd + ox;
                            let g = dcols[row * n + i];
                            if g == F::zero() {
                                continue;
                            }
                            let py = by + offd[2 * tap * n + i];
                            let px = bx + offd[(2 * tap + 1) * n + i];
                            let dplane = if need.0 {
                                Some(&mut dx[ch * n..(ch + 1) * n])
                            } else {
                                None
                            };
                            let (gy, gx) = bilinear_backward(plane, dplane, h, wd, py, px, g);
                            doff[2 * tap * n + i] += gy;
                            doff[(2 * tap + 1) * n + i] += gx;
                        }
                    }
                }
            }
        }
        (
            need.0.then(|| Tensor::from_vec(x.shape(), dx).expect("dx")),
            need.1.then(|| Tensor::from_vec(off.shape(), doff).expect("doff")),
        )
    } else {
        (None, None)
    };
    DeformGrads { dx, doff, dw, db }
}

/// Per-channel mean and population standard deviation.
pub fn channel_stats<F: Scalar>(x: &Tensor<F>) -> Vec<(F, F)> {
    let (c, _, _) = x.dims3();
    (0..c)
        .map(|ch| {
            let p = x.channel(ch);
            let n = F::of(p.len() as f64);
            let mu = p.iter().copied().sum::<F>() / n;
            let var = p.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / n;
            (mu, var.sqrt())
        })
        .collect()
}

/// `sigma(y) * (x - mu(x)) / (sigma(x) + eps) + mu(y)` per channel.
pub fn adain_forward<F: Scalar>(x: &Tensor<F>, y: &Tensor<F>, eps: F) -> Tensor<F> {
    let (c, h, w) = x.dims3();
    let n = h * w;
    let sx = channel_stats(x);
    let sy = channel_stats(y);
    let mut out = vec![F::zero(); c * n];
    for ch in 0..c {
        let (mx, dx) = sx[ch];
        let (my, dy) = sy[ch];
        let scale = dy / (dx + eps);
        for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(x.channel(ch)) {
            *o = scale * (v - mx) + my;
        }
    }
    Tensor::from_vec(x.shape(), out).expect("adain shape")
}

pub fn adain_backward<F: Scalar>(
    x: &Tensor<F>,
    y: &Tensor<F>,
    eps: F,
    g: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let (c, h, w) = x.dims3();
    let n = h * w;
    let nf = F::of(n as f64);
    let sx = channel_stats(x);
    let sy = channel_stats(y);
    let mut gx = vec![F::zero(); c * n];
    let mut gy = vec![F::zero(); c * n];
    for ch in 0..c {
        let (mx, sdx) = sx[ch];
        let (my, sdy) = sy[ch];
        let xp = x.channel(ch);
        let yp = y.channel(ch);
        let gp = g.channel(ch);
        let denom = sdx + eps;
        // d/d sigma_y and d/d mu_y
        let mut d_sy = F::zero();
        let mut d_my = F::zero();
        let mut g_mean = F::zero();
        let mut g_xc = F::zero();
        for i in 0..n {
            let xc = xp[i] - mx;
            d_sy += gp[i] * xc / denom;
            d_my += gp[i];
            g_mean += gp[i];
            g_xc += gp[i] * xc;
        }
        g_mean /= nf;
        for i in 0..n {
            let mut v = d_my / nf;
            if sdy > F::zero() {
                v += d_sy * (yp[i] - my) / (nf * sdy);
            }
            gy[ch * n + i] = v;
        }
        let a = sdy / denom;
        for i in 0..n {
            let xc = xp[i] - mx;
            let mut v = a * (gp[i] - g_mean);
            if sdx > F::zero() {
                v -= sdy * g_xc / (denom * denom) * xc / (nf * sdx);
            }
            gx[ch * n + i] = v;
        }
    }
    (
        Tensor::from_vec(x.shape(), gx).expect("gx"),
        Tensor::from_vec(y.shape(), gy).expect("gy"),
    )
}

#[inline]
pub fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// `log(1 + exp(v))` without overflow.
#[inline]
pub fn softplus<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}
