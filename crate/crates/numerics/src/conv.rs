//! Convolution kernels (cross-correlation convention, no kernel flip).
//!
//! 2-D and 3-D convolutions share one im2col + GEMM implementation: a 2-D
//! problem is a 3-D one with unit depth. Output positions are processed in
//! row chunks so the column buffer stays cache sized. Transposed convolution
//! is the exact adjoint of the forward map and reuses the same kernels.

use crate::error::shape_err;
use crate::{Backward, BackwardCtx, Graph, Real, Result, Tensor, Var};

/// Column-buffer budget in elements per chunk.
const COL_BUDGET: usize = 1 << 18;

/// Stride, zero padding and channel groups of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self { stride: 1, padding: 0, groups: 1 }
    }
}

impl ConvOpts {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding, groups: 1 }
    }

    pub fn groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }
}

/// Fully resolved geometry of a (depth, height, width) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        c_out: usize,
        groups: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(shape_err!("{c_in} -> {c_out} channels cannot be split in {groups} groups"));
        }
        if stride.contains(&0) || kernel.contains(&0) {
            return Err(shape_err!("stride {stride:?} and kernel {kernel:?} must be positive"));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad[a];
            if padded < kernel[a] {
                return Err(shape_err!(
                    "kernel extent {} exceeds padded input extent {padded} (input {input:?}, pad {pad:?})",
                    kernel[a]
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self { c_in, c_out, groups, input, kernel, stride, pad, output })
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of the unrolled patch matrix (per group).
    pub fn patch_len(&self) -> usize {
        self.cin_g() * self.kernel.iter().product::<usize>()
    }

    pub fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    /// Multiply-adds of one forward evaluation.
    pub fn macs(&self) -> u64 {
        (self.c_out * self.patch_len() * self.out_positions()) as u64
    }

    fn chunk_rows(&self) -> usize {
        (COL_BUDGET / (self.patch_len() * self.output[2])).max(1)
    }

    /// Unrolls output rows `r0..r1` (flattened over depth × height) into `col`.
    fn im2col<T: Real>(&self, x: &[T], r0: usize, r1: usize, col: &mut [T]) {
        self.for_each_segment(r0, r1, col, |seg, base, lo, hi, sw| {
            seg[..lo].fill(T::zero());
            seg[hi..].fill(T::zero());
            match base {
                None => seg[lo..hi].fill(T::zero()),
                Some(base) if sw == 1 => {
                    let start = base.wrapping_add(lo);
                    seg[lo..hi].copy_from_slice(&x[start..start + hi - lo]);
                }
                Some(base) => {
                    for (o, v) in seg[lo..hi].iter_mut().enumerate() {
                        *v = x[base.wrapping_add((lo + o) * sw)];
                    }
                }
            }
        });
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters `col` back, accumulating into `x`.
    fn col2im<T: Real>(&self, col: &mut [T], r0: usize, r1: usize, x: &mut [T]) {
        self.for_each_segment(r0, r1, col, |seg, base, lo, hi, sw| {
            let Some(base) = base else { return };
            if sw == 1 {
                let start = base.wrapping_add(lo);
                for (d, &v) in x[start..start + hi - lo].iter_mut().zip(&seg[lo..hi]) {
                    *d += v;
                }
            } else {
                for (o, &v) in seg[lo..hi].iter().enumerate() {
                    x[base.wrapping_add((lo + o) * sw)] += v;
                }
            }
        });
    }

    /// Walks every (patch row, output row) segment of the column buffer.
    ///
    /// The callback receives the segment, the input offset `base` such that
    /// output column `o` reads `x[base + o * stride]` (`None` when the whole
    /// input row lies in the padding), and the valid column range `lo..hi`.
    /// `base` is only meaningful for columns inside `lo..hi`.
    fn for_each_segment<T: Real>(
        &self,
        r0: usize,
        r1: usize,
        col: &mut [T],
        mut f: impl FnMut(&mut [T], Option<usize>, usize, usize, usize),
    ) {
        let [di, hi, wi] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let [_, ho, wo] = self.output;
        let n = (r1 - r0) * wo;
        let mut row = 0;
        for c in 0..self.cin_g() {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        // valid output columns satisfy 0 <= o*sw + e - pw < wi
                        let lo = if e >= pw { 0 } else { (pw - e).div_ceil(sw) };
                        let hi_col = if wi + pw > e { ((wi + pw - e - 1) / sw + 1).min(wo) } else { 0 };
                        let lo = lo.min(hi_col);
                        let dst = &mut col[row * n..(row + 1) * n];
                        for (ri, r) in (r0..r1).enumerate() {
                            let (od, oh) = (r / ho, r % ho);
                            let id = (od * sd + a) as isize - pd as isize;
                            let ih = (oh * sh + b) as isize - ph as isize;
                            let seg = &mut dst[ri * wo..(ri + 1) * wo];
                            let inside = id >= 0 && (id as usize) < di && ih >= 0 && (ih as usize) < hi;
                            let base = inside.then(|| {
                                let row_start = ((c * di + id as usize) * hi + ih as usize) * wi;
                                // row_start + e - pw, kept non-negative by the lo bound
                                (row_start + e).wrapping_sub(pw)
                            });
                            f(seg, base, lo, hi_col, sw);
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

/// Direct (no column buffer) kernels for narrow stride-1 convolutions, where
/// unrolling patches costs more than the arithmetic.
mod direct {
    use super::ConvGeom;
    use crate::Real;

    pub(super) fn applies(geom: &ConvGeom) -> bool {
        geom.stride == [1, 1, 1] && geom.cout_g() <= 2
    }

    /// Visits every (output channel, output row, patch row) triple, passing
    /// the weight index, output offset, input offset and run length.
    fn walk(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [di, hi, wi] = geom.input;
        let [kd, kh, kw] = geom.kernel;
        let [pd, ph, pw] = geom.pad;
        let [dout, ho, wo] = geom.output;
        let k = geom.patch_len();
        for o in 0..geom.cout_g() {
            for od in 0..dout {
                for oh in 0..ho {
                    let out_off = o * geom.out_positions() + (od * ho + oh) * wo;
                    let mut row = 0;
                    for c in 0..geom.cin_g() {
                        for a in 0..kd {
                            let id = (od + a) as isize - pd as isize;
                            for b in 0..kh {
                                let ih = (oh + b) as isize - ph as isize;
                                let inside = id >= 0 && (id as usize) < di && ih >= 0 && (ih as usize) < hi;
                                if !inside {
                                    row += kw;
                                    continue;
                                }
                                let in_row = ((c * di + id as usize) * hi + ih as usize) * wi;
                                for e in 0..kw {
                                    let lo = pw.saturating_sub(e);
                                    let hi_col = (wi + pw).saturating_sub(e).min(wo);
                                    if lo < hi_col {
                                        // output column j reads input column j + e - pw
                                        let in_start = in_row + lo + e - pw;
                                        f(o * k + row, out_off + lo, in_start, hi_col - lo);
                                    }
                                    row += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub(super) fn forward<T: Real>(geom: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
        walk(geom, |wi, o, i, n| {
            let wv = w[wi];
            for (d, &s) in out[o..o + n].iter_mut().zip(&x[i..i + n]) {
                *d += wv * s;
            }
        });
    }

    pub(super) fn backward_data<T: Real>(geom: &ConvGeom, gout: &[T], w: &[T], gx: &mut [T]) {
        walk(geom, |wi, o, i, n| {
            let wv = w[wi];
            for (d, &g) in gx[i..i + n].iter_mut().zip(&gout[o..o + n]) {
                *d += wv * g;
            }
        });
    }

    /// Dot product with eight independent accumulators so it vectorizes.
    fn dot<T: Real>(a: &[T], b: &[T]) -> T {
        let mut lanes = [T::zero(); 8];
        let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
        let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
        for (xa, xb) in ca.zip(cb) {
            for l in 0..8 {
                lanes[l] += xa[l] * xb[l];
            }
        }
        lanes.iter().copied().sum::<T>() + tail
    }

    pub(super) fn backward_weight<T: Real>(geom: &ConvGeom, x: &[T], gout: &[T], gw: &mut [T]) {
        walk(geom, |wi, o, i, n| {
            gw[wi] += dot(&gout[o..o + n], &x[i..i + n]);
        });
    }
}

fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], isize, isize),
    b: (&[T], isize, isize),
    beta: T,
    c: (&mut [T], isize, isize),
) {
    // Strides and extents are derived from the owning geometry; the slices
    // are only the base pointers.
    unsafe {
        T::gemm(m, k, n, T::one(), a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, beta,
            c.0.as_mut_ptr(), c.1, c.2);
    }
}

/// Forward convolution. `x` is `c_in × input`, `w` is `c_out × patch_len`.
pub fn conv_forward<T: Real>(geom: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (cin_g, cout_g, k) = (geom.cin_g(), geom.cout_g(), geom.patch_len());
    let (p, pin, wo) = (geom.out_positions(), geom.in_positions(), geom.output[2]);
    let rows = geom.output[0] * geom.output[1];
    let chunk = geom.chunk_rows();
    let mut out = vec![T::zero(); geom.c_out * p];
    let mut col = if direct::applies(geom) { Vec::new() } else { vec![T::zero(); k * chunk.min(rows) * wo] };
    for gi in 0..geom.groups {
        let xg = &x[gi * cin_g * pin..(gi + 1) * cin_g * pin];
        let wg = &w[gi * cout_g * k..(gi + 1) * cout_g * k];
        if direct::applies(geom) {
            direct::forward(geom, xg, wg, &mut out[gi * cout_g * p..(gi + 1) * cout_g * p]);
            continue;
        }
        for r0 in (0..rows).step_by(chunk) {
            let r1 = (r0 + chunk).min(rows);
            let n = (r1 - r0) * wo;
            geom.im2col(xg, r0, r1, &mut col[..k * n]);
            let dst = &mut out[gi * cout_g * p + r0 * wo..];
            gemm(cout_g, k, n, (wg, k as isize, 1), (&col, n as isize, 1), T::zero(), (dst, p as isize, 1));
        }
    }
    if let Some(b) = bias {
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[o]);
        }
    }
    out
}

/// Gradient with respect to the input; also the forward map of the
/// transposed convolution.
pub fn conv_backward_data<T: Real>(geom: &ConvGeom, gout: &[T], w: &[T]) -> Vec<T> {
    let (cin_g, cout_g, k) = (geom.cin_g(), geom.cout_g(), geom.patch_len());
    let (p, pin, wo) = (geom.out_positions(), geom.in_positions(), geom.output[2]);
    let rows = geom.output[0] * geom.output[1];
    let chunk = geom.chunk_rows();
    let mut gx = vec![T::zero(); geom.c_in * pin];
    let mut col = if direct::applies(geom) { Vec::new() } else { vec![T::zero(); k * chunk.min(rows) * wo] };
    for gi in 0..geom.groups {
        let wg = &w[gi * cout_g * k..(gi + 1) * cout_g * k];
        let gxg = &mut gx[gi * cin_g * pin..(gi + 1) * cin_g * pin];
        if direct::applies(geom) {
            direct::backward_data(geom, &gout[gi * cout_g * p..(gi + 1) * cout_g * p], wg, gxg);
            continue;
        }
        for r0 in (0..rows).step_by(chunk) {
            let r1 = (r0 + chunk).min(rows);
            let n = (r1 - r0) * wo;
            let src = &gout[gi * cout_g * p + r0 * wo..];
            gemm(k, cout_g, n, (wg, 1, k as isize), (src, p as isize, 1), T::zero(), (&mut col[..], n as isize, 1));
            geom.col2im(&mut col[..k * n], r0, r1, gxg);
        }
    }
    gx
}

/// Gradient with respect to the kernel, `c_out × patch_len`.
pub fn conv_backward_weight<T: Real>(geom: &ConvGeom, x: &[T], gout: &[T]) -> Vec<T> {
    let (cin_g, cout_g, k) = (geom.cin_g(), geom.cout_g(), geom.patch_len());
    let (p, pin, wo) = (geom.out_positions(), geom.in_positions(), geom.output[2]);
    let rows = geom.output[0] * geom.output[1];
    let chunk = geom.chunk_rows();
    let mut gw = vec![T::zero(); geom.c_out * k];
    let mut col = if direct::applies(geom) { Vec::new() } else { vec![T::zero(); k * chunk.min(rows) * wo] };
    for gi in 0..geom.groups {
        let xg = &x[gi * cin_g * pin..(gi + 1) * cin_g * pin];
        let gwg = &mut gw[gi * cout_g * k..(gi + 1) * cout_g * k];
        if direct::applies(geom) {
            direct::backward_weight(geom, xg, &gout[gi * cout_g * p..(gi + 1) * cout_g * p], gwg);
            continue;
        }
        for r0 in (0..rows).step_by(chunk) {
            let r1 = (r0 + chunk).min(rows);
            let n = (r1 - r0) * wo;
            geom.im2col(xg, r0, r1, &mut col[..k * n]);
            let src = &gout[gi * cout_g * p + r0 * wo..];
            gemm(cout_g, n, k, (src, p as isize, 1), (&col, 1, n as isize), T::one(), (gwg, k as isize, 1));
        }
    }
    gw
}

fn bias_grad<T: Real>(gout: &[T], c_out: usize) -> Tensor<T> {
    let p = gout.len() / c_out;
    Tensor::from_fn(&[c_out], |o| gout[o * p..(o + 1) * p].iter().copied().sum())
}

struct ConvOp {
    geom: ConvGeom,
    transposed: bool,
}

impl<T: Real> Backward<T> for ConvOp {
    fn name(&self) -> &'static str {
        if self.transposed {
            "conv_transpose"
        } else {
            "conv"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let gy = ctx.grad.data();
        let geom = &self.geom;
        let (gx, gw) = if self.transposed {
            // y = Aᵀx with A the forward conv: dx = A·dy, dW from (dy as input, x as output grad)
            let gx = ctx.needs_grad[0].then(|| conv_forward(geom, gy, w.data(), None));
            let gw = ctx.needs_grad[1].then(|| conv_backward_weight(geom, gy, x.data()));
            (gx, gw)
        } else {
            let gx = ctx.needs_grad[0].then(|| conv_backward_data(geom, gy, w.data()));
            let gw = ctx.needs_grad[1].then(|| conv_backward_weight(geom, x.data(), gy));
            (gx, gw)
        };
        let mut grads = vec![
            gx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
            gw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        ];
        if ctx.inputs.len() == 3 {
            grads.push(ctx.needs_grad[2].then(|| bias_grad(gy, ctx.inputs[2].numel())));
        }
        Ok(grads)
    }
}

fn record_conv<T: Real>(
    g: &mut Graph<T>,
    geom: ConvGeom,
    x: Var,
    w: Var,
    bias: Option<Var>,
    out_shape: Vec<usize>,
) -> Result<Var> {
    if let Some(b) = bias {
        if g.value(b).numel() != geom.c_out {
            return Err(shape_err!("bias has {} entries for {} output channels", g.value(b).numel(), geom.c_out));
        }
    }
    let data = conv_forward(&geom, g.value(x).data(), g.value(w).data(), bias.map(|b| g.value(b).data()));
    let out = Tensor::new(&out_shape, data)?;
    g.add_flops(2 * geom.macs());
    let mut parents = vec![x, w];
    parents.extend(bias);
    Ok(g.record(out, &parents, ConvOp { geom, transposed: false }))
}

pub fn conv2d_geom(x: &[usize], w: &[usize], opts: ConvOpts) -> Result<ConvGeom> {
    let [c, h, wd] = dims::<3>(x, "conv2d input")?;
    let [co, ci, kh, kw] = dims::<4>(w, "conv2d kernel")?;
    if ci * opts.groups != c {
        return Err(shape_err!(
            "conv2d kernel expects {} input channels ({ci} × {} groups), input has {c}",
            ci * opts.groups,
            opts.groups
        ));
    }
    let (s, p) = (opts.stride, opts.padding);
    ConvGeom::new(c, co, opts.groups, [1, h, wd], [1, kh, kw], [1, s, s], [0, p, p])
}

pub fn conv3d_geom(x: &[usize], w: &[usize], opts: ConvOpts) -> Result<ConvGeom> {
    let [c, d, h, wd] = dims::<4>(x, "conv3d input")?;
    let [co, ci, kd, kh, kw] = dims::<5>(w, "conv3d kernel")?;
    if ci * opts.groups != c {
        return Err(shape_err!(
            "conv3d kernel expects {} input channels, input has {c}",
            ci * opts.groups
        ));
    }
    let (s, p) = (opts.stride, opts.padding);
    ConvGeom::new(c, co, opts.groups, [d, h, wd], [kd, kh, kw], [s; 3], [p; 3])
}

fn dims<const N: usize>(shape: &[usize], what: &str) -> Result<[usize; N]> {
    shape.try_into().map_err(|_| shape_err!("{what} must have rank {N}, got {shape:?}"))
}

/// 2-D convolution of a `C_in×H×W` input with a `C_out×(C_in/groups)×k_h×k_w` kernel.
pub fn conv2d<T: Real>(g: &mut Graph<T>, x: Var, w: Var, bias: Option<Var>, opts: ConvOpts) -> Result<Var> {
    let geom = conv2d_geom(g.shape(x), g.shape(w), opts)?;
    let [_, ho, wo] = geom.output;
    record_conv(g, geom, x, w, bias, vec![geom.c_out, ho, wo])
}

/// 3-D convolution of a `C_in×D×H×W` input with a `C_out×(C_in/groups)×k×k×k` kernel.
pub fn conv3d<T: Real>(g: &mut Graph<T>, x: Var, w: Var, bias: Option<Var>, opts: ConvOpts) -> Result<Var> {
    let geom = conv3d_geom(g.shape(x), g.shape(w), opts)?;
    let [d, h, wd] = geom.output;
    record_conv(g, geom, x, w, bias, vec![geom.c_out, d, h, wd])
}

/// Geometry of the forward convolution whose adjoint maps `x` (with
/// `C_out` channels) back to `C_in` channels.
pub fn conv_transpose2d_geom(x: &[usize], w: &[usize], opts: ConvOpts) -> Result<ConvGeom> {
    let [c, hs, ws] = dims::<3>(x, "conv_transpose2d input")?;
    let [co, ci, kh, kw] = dims::<4>(w, "conv_transpose2d kernel")?;
    if c != co {
        return Err(shape_err!("conv_transpose2d input has {c} channels, kernel maps {co}"));
    }
    let (s, p) = (opts.stride, opts.padding);
    if s == 0 {
        return Err(shape_err!("stride must be positive"));
    }
    let ext = |n: usize, k: usize| ((n - 1) * s + k).checked_sub(2 * p);
    let (Some(h), Some(wd)) = (ext(hs, kh), ext(ws, kw)) else {
        return Err(shape_err!("padding {p} too large for transposed output"));
    };
    let geom = ConvGeom::new(ci * opts.groups, co, opts.groups, [1, h, wd], [1, kh, kw], [1, s, s], [0, p, p])?;
    if geom.output != [1, hs, ws] {
        return Err(shape_err!("transposed geometry mismatch for input {x:?}"));
    }
    Ok(geom)
}

pub fn conv_transpose2d_values<T: Real>(x: &Tensor<T>, w: &Tensor<T>, opts: ConvOpts) -> Result<Tensor<T>> {
    let geom = conv_transpose2d_geom(x.shape(), w.shape(), opts)?;
    let data = conv_backward_data(&geom, x.data(), w.data());
    Tensor::new(&[geom.c_in, geom.input[1], geom.input[2]], data)
}

pub fn conv2d_values<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, opts: ConvOpts) -> Result<Tensor<T>> {
    let geom = conv2d_geom(x.shape(), w.shape(), opts)?;
    let data = conv_forward(&geom, x.data(), w.data(), bias.map(|b| b.data()));
    Tensor::new(&[geom.c_out, geom.output[1], geom.output[2]], data)
}

pub fn conv3d_values<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, opts: ConvOpts) -> Result<Tensor<T>> {
    let geom = conv3d_geom(x.shape(), w.shape(), opts)?;
    let data = conv_forward(&geom, x.data(), w.data(), bias.map(|b| b.data()));
    let [d, h, wd] = geom.output;
    Tensor::new(&[geom.c_out, d, h, wd], data)
}

/// Transposed 2-D convolution: the adjoint of [`conv2d`] with the same kernel
/// and options. Output extent is `(n - 1)·stride + k - 2·padding`.
pub fn conv_transpose2d<T: Real>(g: &mut Graph<T>, x: Var, w: Var, opts: ConvOpts) -> Result<Var> {
    let geom = conv_transpose2d_geom(g.shape(x), g.shape(w), opts)?;
    let data = conv_backward_data(&geom, g.value(x).data(), g.value(w).data());
    let out = Tensor::new(&[geom.c_in, geom.input[1], geom.input[2]], data)?;
    g.add_flops(2 * geom.macs());
    Ok(g.record(out, &[x, w], ConvOp { geom, transposed: true }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;

    fn brute_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let [co, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (wd + 2 * p - kw) / s + 1;
        let mut out = Tensor::zeros(&[co, ho, wo]);
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (y, xx) = ((i * s + u) as isize - p as isize, (j * s + v) as isize - p as isize);
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += w.at(&[o, ci, u, v]) * x.at(&[ci, y as usize, xx as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[o, i, j], acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_strided_padded_matches_loops() {
        for (seed, (s, p, k)) in [(1, 1, 3), (2, 1, 3), (2, 0, 2), (3, 2, 3), (1, 0, 1), (2, 2, 5)].iter().enumerate() {
            let x = Tensor::<f64>::randn(&[3, 7, 9], 1.0, seed as u64);
            let w = Tensor::<f64>::randn(&[4, 3, *k, *k], 1.0, 50 + seed as u64);
            let got = conv2d_values(&x, &w, None, ConvOpts::new(*s, *p)).unwrap();
            let want = brute_conv2d(&x, &w, *s, *p);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "s={s} p={p} k={k}");
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        assert!(conv2d_values(&x, &w, None, ConvOpts::new(1, 1)).is_err());
        let w = Tensor::<f32>::zeros(&[2, 3, 7, 7]);
        assert!(conv2d_values(&x, &w, None, ConvOpts::new(1, 1)).is_err());
    }

    #[test]
    fn large_problem_spans_several_chunks() {
        // patch_len 27*16 with width 128 forces multi-row chunks
        let x = Tensor::<f64>::randn(&[16, 4, 40, 128], 1.0, 3);
        let w = Tensor::<f64>::randn(&[2, 16, 3, 3, 3], 1.0, 4);
        let fast = conv3d_values(&x, &w, None, ConvOpts::new(1, 1)).unwrap();
        let geom = conv3d_geom(x.shape(), w.shape(), ConvOpts::new(1, 1)).unwrap();
        assert!(geom.chunk_rows() < geom.output[0] * geom.output[1]);
        // spot-check a handful of outputs directly
        for &(o, z, y, xx) in &[(0, 0, 0, 0), (1, 3, 39, 127), (0, 2, 17, 64), (1, 1, 20, 1)] {
            let mut acc = 0.0;
            for c in 0..16 {
                for a in 0..3 {
                    for b in 0..3 {
                        for e in 0..3 {
                            let (zi, yi, xi) = (z as isize + a as isize - 1, y as isize + b as isize - 1, xx as isize + e as isize - 1);
                            if zi >= 0 && yi >= 0 && xi >= 0 && zi < 4 && yi < 40 && xi < 128 {
                                acc += w.at(&[o, c, a, b, e]) * x.at(&[c, zi as usize, yi as usize, xi as usize]);
                            }
                        }
                    }
                }
            }
            assert!((fast.at(&[o, z, y, xx]) - acc).abs() < 1e-10);
        }
    }

    #[test]
    fn narrow_direct_path_matches_loops() {
        for (k, p) in [(3, 1), (3, 0), (1, 0), (5, 2)] {
            let x = Tensor::<f64>::randn(&[3, 7, 9], 1.0, k as u64);
            let w = Tensor::<f64>::randn(&[1, 3, k, k], 1.0, 9);
            let geom = conv2d_geom(x.shape(), w.shape(), ConvOpts::new(1, p)).unwrap();
            assert!(direct::applies(&geom));
            let got = conv2d_values(&x, &w, None, ConvOpts::new(1, p)).unwrap();
            assert!(got.max_abs_diff(&brute_conv2d(&x, &w, 1, p)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn grouped_conv_is_blockwise() {
        let x = Tensor::<f64>::randn(&[4, 6, 6], 1.0, 1);
        let w = Tensor::<f64>::randn(&[6, 2, 3, 3], 1.0, 2);
        let got = conv2d_values(&x, &w, None, ConvOpts::new(1, 1).groups(2)).unwrap();
        for gi in 0..2 {
            let xs = crate::ops::slice_values(&x, 0, gi * 2, 2).unwrap();
            let ws = crate::ops::slice_values(&w, 0, gi * 3, 3).unwrap();
            let want = brute_conv2d(&xs, &ws, 1, 1);
            let part = crate::ops::slice_values(&got, 0, gi * 3, 3).unwrap();
            assert!(part.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn transpose_single_pixel_reproduces_kernel() {
        let x = Tensor::<f64>::full(&[1, 1, 1], 3.0);
        let w = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = conv_transpose2d_values(&x, &w, ConvOpts::new(2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn transpose_identity_kernel_is_identity() {
        let x = Tensor::<f64>::randn(&[2, 5, 3], 1.0, 9);
        let w = Tensor::<f64>::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv_transpose2d_values(&x, &w, ConvOpts::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let (s, p) = [(1, 1), (2, 1), (2, 0), (1, 0)][seed as usize % 4];
            let x = Tensor::<f64>::randn(&[2, 6, 5], 1.0, seed);
            let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 0.5, seed + 40);
            let b = Tensor::<f64>::randn(&[3], 0.5, seed + 80);
            let x3 = Tensor::<f64>::randn(&[2, 4, 5, 4], 1.0, seed + 120);
            let w3 = Tensor::<f64>::randn(&[2, 2, 3, 3, 3], 0.5, seed + 160);
            let wt = Tensor::<f64>::randn(&[3, 2, 2, 2], 0.5, seed + 200);
            let w1 = Tensor::<f64>::randn(&[1, 2, 3, 3, 3], 0.5, seed + 240);
            let err = check_inputs(&[x, w, b, x3, w3, wt, w1], |g, v| {
                let y = conv2d(g, v[0], v[1], Some(v[2]), ConvOpts::new(s, p))?;
                let yt = conv_transpose2d(g, y, v[5], ConvOpts::new(2, 0))?;
                let y3 = conv3d(g, v[3], v[4], None, ConvOpts::new(s, p))?;
                let narrow = conv3d(g, y3, v[6], None, ConvOpts::new(1, 1))?;
                let rn = Tensor::randn(g.shape(narrow), 1.0, 9);
                let c = crate::ops::weighted_sum(g, narrow, &rn)?;
                let r = Tensor::randn(g.shape(yt), 1.0, 7);
                let r3 = Tensor::randn(g.shape(y3), 1.0, 8);
                let a = crate::ops::weighted_sum(g, yt, &r)?;
                let b = crate::ops::weighted_sum(g, y3, &r3)?;
                let ab = crate::ops::add(g, a, b)?;
                crate::ops::add(g, ab, c)
            })
            .unwrap();
            assert!(err < 1e-3, "seed {seed}: relative error {err}");
        }
    }
}
