//! Direct loop implementations of the pipeline's defining formulas.
//!
//! These are deliberately naive: one scalar accumulator per output element
//! and no shared code with the production kernels. Tests and `selftest`
//! compare the fast paths against them.

use rresm_numerics::{Real, Tensor};

/// Zero-padded cross-correlation, `C_out×C_in×kh×kw` kernel.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[co, ho, wo]);
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = T::zero();
                for ci in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            let (y, xx) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                s += w.at(&[o, ci, u, v]) * x.at(&[ci, y as usize, xx as usize]);
                            }
                        }
                    }
                }
                out.set(&[o, i, j], s);
            }
        }
    }
    out
}

/// Zero-padded 3-D cross-correlation, `C_out×C_in×k×k×k` kernel.
pub fn conv3d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let s = x.shape();
    let (c, dims) = (s[0], [s[1], s[2], s[3]]);
    let (co, k) = (w.shape()[0], [w.shape()[2], w.shape()[3], w.shape()[4]]);
    let od: Vec<usize> = (0..3).map(|a| (dims[a] + 2 * pad - k[a]) / stride + 1).collect();
    let mut out = Tensor::zeros(&[co, od[0], od[1], od[2]]);
    let inside = |p: isize, a: usize| p >= 0 && (p as usize) < dims[a];
    for o in 0..co {
        for i in 0..od[0] {
            for j in 0..od[1] {
                for l in 0..od[2] {
                    let mut acc = T::zero();
                    for ci in 0..c {
                        for a in 0..k[0] {
                            for b in 0..k[1] {
                                for e in 0..k[2] {
                                    let z = (i * stride + a) as isize - pad as isize;
                                    let y = (j * stride + b) as isize - pad as isize;
                                    let xx = (l * stride + e) as isize - pad as isize;
                                    if inside(z, 0) && inside(y, 1) && inside(xx, 2) {
                                        acc += w.at(&[o, ci, a, b, e])
                                            * x.at(&[ci, z as usize, y as usize, xx as usize]);
                                    }
                                }
                            }
                        }
                    }
                    out.set(&[o, i, j, l], acc);
                }
            }
        }
    }
    out
}

/// Group-wise correlation, one accumulator per entry.
pub fn gwc<T: Real>(fl: &Tensor<T>, fr: &Tensor<T>, groups: usize, disparities: usize) -> Tensor<T> {
    let (c, h, w) = (fl.shape()[0], fl.shape()[1], fl.shape()[2]);
    let gs = c / groups;
    let mut out = Tensor::zeros(&[groups, disparities, h, w]);
    for g in 0..groups {
        for d in 0..disparities {
            for y in 0..h {
                for x in 0..w {
                    if x < d {
                        continue;
                    }
                    let mut s = T::zero();
                    for ch in g * gs..(g + 1) * gs {
                        s += fl.at(&[ch, y, x]) * fr.at(&[ch, y, x - d]);
                    }
                    out.set(&[g, d, y, x], s / T::of(gs as f64));
                }
            }
        }
    }
    out
}

/// Plane means of a `C×D×H×W` volume: `(z_x: C×W, z_y: C×H, z_z: C×D)`.
pub fn axis_mean<T: Real>(vol: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = vol.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let mut zx = Tensor::zeros(&[c, w]);
    let mut zy = Tensor::zeros(&[c, h]);
    let mut zz = Tensor::zeros(&[c, d]);
    for ch in 0..c {
        for x in 0..w {
            let mut acc = T::zero();
            for z in 0..d {
                for y in 0..h {
                    acc += vol.at(&[ch, z, y, x]);
                }
            }
            zx.set(&[ch, x], acc / T::of((d * h) as f64));
        }
        for y in 0..h {
            let mut acc = T::zero();
            for z in 0..d {
                for x in 0..w {
                    acc += vol.at(&[ch, z, y, x]);
                }
            }
            zy.set(&[ch, y], acc / T::of((d * w) as f64));
        }
        for z in 0..d {
            let mut acc = T::zero();
            for y in 0..h {
                for x in 0..w {
                    acc += vol.at(&[ch, z, y, x]);
                }
            }
            zz.set(&[ch, z], acc / T::of((h * w) as f64));
        }
    }
    (zx, zy, zz)
}

/// `out[c,z,y,x] = vol[c,z,y,x] · a_x[c,x] · a_y[c,y] · a_z[c,z]`.
pub fn split_apply<T: Real>(vol: &Tensor<T>, ax: &Tensor<T>, ay: &Tensor<T>, az: &Tensor<T>) -> Tensor<T> {
    let s = vol.shape();
    let mut out = vol.clone();
    for c in 0..s[0] {
        for z in 0..s[1] {
            for y in 0..s[2] {
                for x in 0..s[3] {
                    let v = vol.at(&[c, z, y, x]) * ax.at(&[c, x]) * ay.at(&[c, y]) * az.at(&[c, z]);
                    out.set(&[c, z, y, x], v);
                }
            }
        }
    }
    out
}

/// Selective-scan inputs for [`ssm_scan`]; token-dependent quantities are
/// given directly rather than through projections.
pub struct ScanInputs<'a, T> {
    /// `C×L` sequence.
    pub x: &'a Tensor<T>,
    /// `H×L` step sizes, one row per head.
    pub dt: &'a Tensor<T>,
    /// Per-head decay rates (≤ 0).
    pub a: &'a [T],
    /// `N×L` input and output maps.
    pub b: &'a Tensor<T>,
    pub c: &'a Tensor<T>,
    /// Per-channel skip.
    pub d_skip: &'a [T],
}

/// Sequential recurrence; `reverse` runs it from the last token to the first.
pub fn ssm_scan<T: Real>(p: &ScanInputs<'_, T>, reverse: bool) -> Tensor<T> {
    let (ch, l) = (p.x.shape()[0], p.x.shape()[1]);
    let (heads, n) = (p.dt.shape()[0], p.b.shape()[0]);
    let per_head = ch / heads;
    let mut y = Tensor::zeros(&[ch, l]);
    for c in 0..ch {
        let hd = c / per_head;
        let mut state = vec![T::zero(); n];
        for step in 0..l {
            let t = if reverse { l - 1 - step } else { step };
            let dt = p.dt.at(&[hd, t]);
            let decay = (dt * p.a[hd]).exp();
            let xt = p.x.at(&[c, t]);
            let mut out = T::zero();
            for (k, s) in state.iter_mut().enumerate() {
                *s = decay * *s + dt * p.b.at(&[k, t]) * xt;
                out += p.c.at(&[k, t]) * *s;
            }
            y.set(&[c, t], out + p.d_skip[c] * xt);
        }
    }
    y
}

/// `Σ_d d · softmax_d(scores[:, y, x])` for a `D×H×W` score volume.
pub fn soft_argmax<T: Real>(scores: &Tensor<T>) -> Tensor<T> {
    let (d, h, w) = (scores.shape()[0], scores.shape()[1], scores.shape()[2]);
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let m = (0..d).map(|k| scores.at(&[k, y, x])).fold(T::neg_infinity(), T::max);
            let z: T = (0..d).map(|k| (scores.at(&[k, y, x]) - m).exp()).sum();
            let mut acc = T::zero();
            for k in 0..d {
                acc += T::of(k as f64) * ((scores.at(&[k, y, x]) - m).exp() / z);
            }
            out.set(&[y, x], acc);
        }
    }
    out
}

/// Bilinear sample of an `H×W` map at continuous source coordinates, using
/// half-pixel centres for an integer `factor`, times `value_scale`.
pub fn bilinear_upsample(x: &Tensor<f64>, factor: usize, value_scale: f64) -> Tensor<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let src = |i: usize, n: usize| ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    Tensor::from_fn(&[h * factor, w * factor], |idx| {
        let (sy, sx) = (src(idx / (w * factor), h), src(idx % (w * factor), w));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let v = x.at(&[y0, x0]) * (1.0 - fy) * (1.0 - fx)
            + x.at(&[y0, x1]) * (1.0 - fy) * fx
            + x.at(&[y1, x0]) * fy * (1.0 - fx)
            + x.at(&[y1, x1]) * fy * fx;
        v * value_scale
    })
}

/// Haar analysis of each 2×2 window, written out term by term.
/// Returns `[ll, lh, hl, hh]`, each `C×H/2×W/2`.
pub fn haar_dwt<T: Real>(x: &Tensor<T>) -> [Tensor<T>; 4] {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let half = T::of(0.5);
    let mut bands = [(); 4].map(|_| Tensor::zeros(&[c, h / 2, w / 2]));
    for ch in 0..c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let a = x.at(&[ch, 2 * i, 2 * j]);
                let b = x.at(&[ch, 2 * i, 2 * j + 1]);
                let cc = x.at(&[ch, 2 * i + 1, 2 * j]);
                let d = x.at(&[ch, 2 * i + 1, 2 * j + 1]);
                bands[0].set(&[ch, i, j], half * (a + b + cc + d));
                bands[1].set(&[ch, i, j], half * (a - b + cc - d));
                bands[2].set(&[ch, i, j], half * (a + b - cc - d));
                bands[3].set(&[ch, i, j], half * (a - b - cc + d));
            }
        }
    }
    bands
}

/// Inverse of [`haar_dwt`].
pub fn haar_iwt<T: Real>(bands: &[Tensor<T>; 4]) -> Tensor<T> {
    let (c, h, w) = (bands[0].shape()[0], bands[0].shape()[1], bands[0].shape()[2]);
    let half = T::of(0.5);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let [ll, lh, hl, hh] = [0, 1, 2, 3].map(|k| bands[k].at(&[ch, i, j]));
                out.set(&[ch, 2 * i, 2 * j], half * (ll + lh + hl + hh));
                out.set(&[ch, 2 * i, 2 * j + 1], half * (ll - lh + hl - hh));
                out.set(&[ch, 2 * i + 1, 2 * j], half * (ll + lh - hl - hh));
                out.set(&[ch, 2 * i + 1, 2 * j + 1], half * (ll - lh - hl + hh));
            }
        }
    }
    out
}

/// Masked mean of the smooth-L1 penalty.
pub fn smooth_l1(pred: &[f64], gt: &[f64], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            let x = (pred[i] - gt[i]).abs();
            total += if x < 1.0 { 0.5 * x * x } else { x - 0.5 };
            n += 1;
        }
    }
    total / n as f64
}

pub fn mae(pred: &[f64], gt: &[f64], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..pred.len() {
        if mask[i] {
            total += (pred[i] - gt[i]).abs();
            n += 1;
        }
    }
    total / n as f64
}

pub fn bad_n(pred: &[f64], gt: &[f64], mask: &[bool], thr: f64) -> f64 {
    let mut bad = 0;
    let mut n = 0;
    for i in 0..pred.len() {
        if mask[i] {
            n += 1;
            if (pred[i] - gt[i]).abs() > thr {
                bad += 1;
            }
        }
    }
    100.0 * bad as f64 / n as f64
}

pub fn d1(pred: &[f64], gt: &[f64], mask: &[bool]) -> f64 {
    let mut bad = 0;
    let mut n = 0;
    for i in 0..pred.len() {
        if mask[i] {
            n += 1;
            let e = (pred[i] - gt[i]).abs();
            if e > 3.0 && e > 0.05 * gt[i] {
                bad += 1;
            }
        }
    }
    100.0 * bad as f64 / n as f64
}
