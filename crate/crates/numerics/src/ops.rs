//! Elementwise, reduction and layout operations recorded on a [`Graph`].

use crate::error::{contract_err, shape_err};
use crate::{Backward, BackwardCtx, Graph, Real, Result, Tensor, Var};

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err!("operand shapes differ: {:?} vs {:?}", g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct AddOp;
impl<T: Real> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])
    }
}

pub fn add<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b)?;
    let out = g.value(a).zip_map(g.value(b), |x, y| x + y)?;
    Ok(g.record(out, &[a, b], AddOp))
}

struct SubOp;
impl<T: Real> Backward<T> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.map(|v| -v))])
    }
}

pub fn sub<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b)?;
    let out = g.value(a).zip_map(g.value(b), |x, y| x - y)?;
    Ok(g.record(out, &[a, b], SubOp))
}

struct MulOp;
impl<T: Real> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let ga = ctx.needs_grad[0].then(|| ctx.grad.zip_map(b, |g, y| g * y)).transpose()?;
        let gb = ctx.needs_grad[1].then(|| ctx.grad.zip_map(a, |g, x| g * x)).transpose()?;
        Ok(vec![ga, gb])
    }
}

pub fn mul<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(g, a, b)?;
    let out = g.value(a).zip_map(g.value(b), |x, y| x * y)?;
    Ok(g.record(out, &[a, b], MulOp))
}

struct ScaleOp<T>(T);
impl<T: Real> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.scale(self.0))])
    }
}

/// Multiplies by a constant.
pub fn scale<T: Real>(g: &mut Graph<T>, a: Var, s: T) -> Var {
    let out = g.value(a).scale(s);
    g.record(out, &[a], ScaleOp(s))
}

struct AddScalarOp;
impl<T: Real> Backward<T> for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.clone())])
    }
}

pub fn add_scalar<T: Real>(g: &mut Graph<T>, a: Var, s: T) -> Var {
    let out = g.value(a).map(|v| v + s);
    g.record(out, &[a], AddScalarOp)
}

struct SumOp;
impl<T: Real> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let g = ctx.grad.data()[0];
        Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g))])
    }
}

/// Sum of all elements, as a 1-element tensor.
pub fn sum<T: Real>(g: &mut Graph<T>, a: Var) -> Var {
    let out = Tensor::scalar(g.value(a).sum());
    g.record(out, &[a], SumOp)
}

pub fn mean<T: Real>(g: &mut Graph<T>, a: Var) -> Var {
    let n = T::of(g.value(a).numel() as f64);
    let s = sum(g, a);
    scale(g, s, T::one() / n)
}

/// `Σ a ⊙ w` for a constant weight tensor; handy for projecting an output to a scalar.
pub fn weighted_sum<T: Real>(g: &mut Graph<T>, a: Var, w: &Tensor<T>) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = mul(g, a, wv)?;
    Ok(sum(g, p))
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus_scalar<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

struct SigmoidOp;
impl<T: Real> Backward<T> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.zip_map(ctx.output, |g, s| g * s * (T::one() - s))?)])
    }
}

pub fn sigmoid<T: Real>(g: &mut Graph<T>, a: Var) -> Var {
    let out = g.value(a).map(sigmoid_scalar);
    g.record(out, &[a], SigmoidOp)
}

struct SoftplusOp;
impl<T: Real> Backward<T> for SoftplusOp {
    fn name(&self) -> &'static str {
        "softplus"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.zip_map(ctx.inputs[0], |g, x| g * sigmoid_scalar(x))?)])
    }
}

pub fn softplus<T: Real>(g: &mut Graph<T>, a: Var) -> Var {
    let out = g.value(a).map(softplus_scalar);
    g.record(out, &[a], SoftplusOp)
}

struct ReluOp;
impl<T: Real> Backward<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let g = ctx.grad.zip_map(ctx.inputs[0], |g, x| if x > T::zero() { g } else { T::zero() })?;
        Ok(vec![Some(g)])
    }
}

pub fn relu<T: Real>(g: &mut Graph<T>, a: Var) -> Var {
    let out = g.value(a).map(|v| v.max(T::zero()));
    g.record(out, &[a], ReluOp)
}

pub fn prelu_scalar<T: Real>(x: T, slope: T) -> T {
    if x >= T::zero() {
        x
    } else {
        slope * x
    }
}

struct PreluOp;
impl<T: Real> Backward<T> for PreluOp {
    fn name(&self) -> &'static str {
        "prelu"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (x, a) = (ctx.inputs[0], ctx.inputs[1].data()[0]);
        let gx = ctx.needs_grad[0]
            .then(|| ctx.grad.zip_map(x, |g, x| if x >= T::zero() { g } else { a * g }))
            .transpose()?;
        let ga = ctx.needs_grad[1].then(|| {
            let s: T = ctx
                .grad
                .data()
                .iter()
                .zip(x.data())
                .filter(|(_, &x)| x < T::zero())
                .map(|(&g, &x)| g * x)
                .sum();
            Tensor::scalar(s)
        });
        Ok(vec![gx, ga])
    }
}

/// Parametric ReLU with a single learned slope (a 1-element tensor).
pub fn prelu<T: Real>(g: &mut Graph<T>, x: Var, slope: Var) -> Result<Var> {
    if g.value(slope).numel() != 1 {
        return Err(shape_err!("prelu slope must hold one value, got {:?}", g.shape(slope)));
    }
    let a = g.value(slope).data()[0];
    let out = g.value(x).map(|v| prelu_scalar(v, a));
    Ok(g.record(out, &[x, slope], PreluOp))
}

struct MatMulOp {
    m: usize,
    k: usize,
    n: usize,
}
impl<T: Real> Backward<T> for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b, gy) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let ga = ctx.needs_grad[0].then(|| {
            let mut out = vec![T::zero(); m * k];
            // dA = dY · Bᵀ
            unsafe {
                T::gemm(m, n, k, T::one(), gy.as_ptr(), n as isize, 1, b.as_ptr(), 1, n as isize,
                    T::zero(), out.as_mut_ptr(), k as isize, 1);
            }
            Tensor::new(&[m, k], out).expect("matmul grad shape")
        });
        let gb = ctx.needs_grad[1].then(|| {
            let mut out = vec![T::zero(); k * n];
            // dB = Aᵀ · dY
            unsafe {
                T::gemm(k, m, n, T::one(), a.as_ptr(), 1, k as isize, gy.as_ptr(), n as isize, 1,
                    T::zero(), out.as_mut_ptr(), n as isize, 1);
            }
            Tensor::new(&[k, n], out).expect("matmul grad shape")
        });
        Ok(vec![ga, gb])
    }
}

pub fn matmul_values<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(shape_err!("matmul needs [m,k]·[k,n], got {:?}·{:?}", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    unsafe {
        T::gemm(m, k, n, T::one(), a.data().as_ptr(), k as isize, 1, b.data().as_ptr(), n as isize,
            1, T::zero(), out.as_mut_ptr(), n as isize, 1);
    }
    Tensor::new(&[m, n], out)
}

/// Matrix product of `[m, k]` and `[k, n]`.
pub fn matmul<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let out = matmul_values(g.value(a), g.value(b))?;
    let (m, k) = (g.shape(a)[0], g.shape(a)[1]);
    let n = g.shape(b)[1];
    g.add_flops(2 * (m * k * n) as u64);
    Ok(g.record(out, &[a, b], MatMulOp { m, k, n }))
}

struct ChannelBiasOp;
impl<T: Real> Backward<T> for ChannelBiasOp {
    fn name(&self) -> &'static str {
        "channel_bias"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let c = ctx.inputs[1].numel();
        let inner = ctx.grad.numel() / c;
        let gb = ctx.needs_grad[1].then(|| {
            Tensor::from_fn(ctx.inputs[1].shape(), |i| ctx.grad.data()[i * inner..(i + 1) * inner].iter().copied().sum())
        });
        Ok(vec![Some(ctx.grad.clone()), gb])
    }
}

/// Adds `b[c]` to every element of channel `c` (axis 0) of `x`.
pub fn add_channel_bias<T: Real>(g: &mut Graph<T>, x: Var, b: Var) -> Result<Var> {
    let c = g.shape(x)[0];
    if g.value(b).numel() != c {
        return Err(shape_err!("bias of {} entries for {c} channels", g.value(b).numel()));
    }
    let inner = g.value(x).numel() / c;
    let bias = g.value(b).data().to_vec();
    let mut out = g.value(x).clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        chunk.iter_mut().for_each(|v| *v += bias[i]);
    }
    Ok(g.record(out, &[x, b], ChannelBiasOp))
}

struct ScaleChannelsOp<T>(Vec<T>);
impl<T: Real> Backward<T> for ScaleChannelsOp<T> {
    fn name(&self) -> &'static str {
        "scale_channels"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(scale_channels_values(ctx.grad, &self.0))])
    }
}

fn scale_channels_values<T: Real>(x: &Tensor<T>, factors: &[T]) -> Tensor<T> {
    let inner = x.numel() / factors.len();
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= factors[i]);
    }
    out
}

/// Multiplies channel `c` (axis 0) by the constant `factors[c]`.
pub fn scale_channels<T: Real>(g: &mut Graph<T>, x: Var, factors: Vec<T>) -> Result<Var> {
    if g.shape(x)[0] != factors.len() {
        return Err(shape_err!("{} factors for {} channels", factors.len(), g.shape(x)[0]));
    }
    let out = scale_channels_values(g.value(x), &factors);
    Ok(g.record(out, &[x], ScaleChannelsOp(factors)))
}

struct ReshapeOp;
impl<T: Real> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        Ok(vec![Some(ctx.grad.reshape(ctx.inputs[0].shape())?)])
    }
}

pub fn reshape<T: Real>(g: &mut Graph<T>, x: Var, shape: &[usize]) -> Result<Var> {
    let out = g.value(x).reshape(shape)?;
    Ok(g.record(out, &[x], ReshapeOp))
}

struct ConcatOp {
    axis: usize,
    extents: Vec<usize>,
}
impl<T: Real> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let mut start = 0;
        let mut grads = Vec::with_capacity(self.extents.len());
        for (i, &len) in self.extents.iter().enumerate() {
            grads.push(
                ctx.needs_grad[i].then(|| slice_values(ctx.grad, self.axis, start, len)).transpose()?,
            );
            start += len;
        }
        Ok(grads)
    }
}

/// Concatenates tensors that agree on every axis except `axis`.
pub fn concat<T: Real>(g: &mut Graph<T>, parts: &[Var], axis: usize) -> Result<Var> {
    let first = g.shape(parts[0]).to_vec();
    if axis >= first.len() {
        return Err(shape_err!("concat axis {axis} for rank {}", first.len()));
    }
    let mut extents = Vec::with_capacity(parts.len());
    for &p in parts {
        let s = g.shape(p);
        let compatible = s.len() == first.len()
            && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(shape_err!("cannot concat {:?} with {:?} on axis {axis}", s, first));
        }
        extents.push(s[axis]);
    }
    let mut shape = first.clone();
    shape[axis] = extents.iter().sum();
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for (&p, &len) in parts.iter().zip(&extents) {
            let block = len * inner;
            data.extend_from_slice(&g.value(p).data()[o * block..(o + 1) * block]);
        }
    }
    let out = Tensor::new(&shape, data)?;
    Ok(g.record(out, parts, ConcatOp { axis, extents }))
}

pub fn slice_values<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || len == 0 || start + len > shape[axis] {
        return Err(shape_err!("slice [{start}, {}) of axis {axis} in {shape:?}", start + len));
    }
    let (outer, n, inner) = axis_split(shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(&out_shape, data)
}

struct SliceOp {
    axis: usize,
    start: usize,
}
impl<T: Real> Backward<T> for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let shape = ctx.inputs[0].shape();
        let (outer, n, inner) = axis_split(shape, self.axis);
        let len = ctx.grad.shape()[self.axis];
        let mut out = Tensor::zeros(shape);
        for o in 0..outer {
            let dst = (o * n + self.start) * inner;
            let src = o * len * inner;
            out.data_mut()[dst..dst + len * inner]
                .copy_from_slice(&ctx.grad.data()[src..src + len * inner]);
        }
        Ok(vec![Some(out)])
    }
}

pub fn slice<T: Real>(g: &mut Graph<T>, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
    let out = slice_values(g.value(x), axis, start, len)?;
    Ok(g.record(out, &[x], SliceOp { axis, start }))
}

pub fn softmax_values<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mx = (0..n).map(|k| data[at(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..n {
                let e = (data[at(k)] - mx).exp();
                data[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                data[at(k)] /= total;
            }
        }
    }
    out
}

struct SoftmaxOp {
    axis: usize,
}
impl<T: Real> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (outer, n, inner) = axis_split(ctx.output.shape(), self.axis);
        let (p, gy) = (ctx.output.data(), ctx.grad.data());
        let mut gx = Tensor::zeros(ctx.output.shape());
        let out = gx.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let dot: T = (0..n).map(|k| p[at(k)] * gy[at(k)]).sum();
                for k in 0..n {
                    out[at(k)] = p[at(k)] * (gy[at(k)] - dot);
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Real>(g: &mut Graph<T>, x: Var, axis: usize) -> Result<Var> {
    if axis >= g.shape(x).len() {
        return Err(shape_err!("softmax axis {axis} for shape {:?}", g.shape(x)));
    }
    let out = softmax_values(g.value(x), axis);
    Ok(g.record(out, &[x], SoftmaxOp { axis }))
}

/// Views a `C×H×W` or `C×D×H×W` shape as (channels, [d, h, w]).
fn volume_dims(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match *shape {
        [c, h, w] => Ok((c, [1, h, w])),
        [c, d, h, w] => Ok((c, [d, h, w])),
        _ => Err(shape_err!("expected a C×H×W or C×D×H×W tensor, got {shape:?}")),
    }
}

struct UpsampleNearestOp {
    factors: [usize; 3],
}
impl<T: Real> Backward<T> for UpsampleNearestOp {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (c, [d, h, w]) = volume_dims(ctx.inputs[0].shape())?;
        let [fd, fh, fw] = self.factors;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let gy = ctx.grad.data();
        let mut gx = Tensor::zeros(ctx.inputs[0].shape());
        let out = gx.data_mut();
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let src = ((ch * od + z) * oh + y) * ow;
                    let dst = ((ch * d + z / fd) * h + y / fh) * w;
                    for x in 0..ow {
                        out[dst + x / fw] += gy[src + x];
                    }
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Nearest-neighbour upsampling of the trailing spatial axes by integer
/// factors `[depth, height, width]` (depth factor must be 1 for `C×H×W`).
pub fn upsample_nearest<T: Real>(g: &mut Graph<T>, x: Var, factors: [usize; 3]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (c, [d, h, w]) = volume_dims(&shape)?;
    if shape.len() == 3 && factors[0] != 1 || factors.contains(&0) {
        return Err(shape_err!("invalid upsample factors {factors:?} for {shape:?}"));
    }
    let [fd, fh, fw] = factors;
    let (od, oh, ow) = (d * fd, h * fh, w * fw);
    let src = g.value(x).data();
    let mut data = Vec::with_capacity(c * od * oh * ow);
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let row = ((ch * d + z / fd) * h + y / fh) * w;
                data.extend((0..ow).map(|x| src[row + x / fw]));
            }
        }
    }
    let out_shape = if shape.len() == 3 { vec![c, oh, ow] } else { vec![c, od, oh, ow] };
    let out = Tensor::new(&out_shape, data)?;
    Ok(g.record(out, &[x], UpsampleNearestOp { factors }))
}

/// Source taps for half-pixel bilinear resampling of one axis.
pub fn bilinear_taps<T: Real>(n_in: usize, factor: usize) -> Vec<(usize, usize, T)> {
    let f = factor as f64;
    (0..n_in * factor)
        .map(|i| {
            let src = ((i as f64 + 0.5) / f - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, T::of(src - i0 as f64))
        })
        .collect()
}

struct UpsampleBilinearOp<T> {
    factor: usize,
    value_scale: T,
}
impl<T: Real> Backward<T> for UpsampleBilinearOp<T> {
    fn name(&self) -> &'static str {
        "upsample_bilinear"
    }
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let in_shape = ctx.inputs[0].shape();
        let (c, h, w) = plane_dims(in_shape)?;
        let rows = bilinear_taps::<T>(h, self.factor);
        let cols = bilinear_taps::<T>(w, self.factor);
        let (oh, ow) = (rows.len(), cols.len());
        let gy = ctx.grad.data();
        let mut gx = Tensor::zeros(in_shape);
        let out = gx.data_mut();
        for ch in 0..c {
            for (y, &(y0, y1, wy)) in rows.iter().enumerate() {
                for (x, &(x0, x1, wx)) in cols.iter().enumerate() {
                    let gv = gy[(ch * oh + y) * ow + x] * self.value_scale;
                    let base = ch * h * w;
                    out[base + y0 * w + x0] += gv * (T::one() - wy) * (T::one() - wx);
                    out[base + y0 * w + x1] += gv * (T::one() - wy) * wx;
                    out[base + y1 * w + x0] += gv * wy * (T::one() - wx);
                    out[base + y1 * w + x1] += gv * wy * wx;
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err!("expected an H×W or C×H×W tensor, got {shape:?}")),
    }
}

/// Bilinear upsampling (half-pixel centres, edge clamped) of an `H×W` or
/// `C×H×W` tensor by an integer factor, multiplying every value by `value_scale`.
pub fn upsample_bilinear<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    factor: usize,
    value_scale: T,
) -> Result<Var> {
    if factor == 0 {
        return Err(contract_err!("upsample factor must be positive"));
    }
    let shape = g.shape(x).to_vec();
    let (c, h, w) = plane_dims(&shape)?;
    let rows = bilinear_taps::<T>(h, factor);
    let cols = bilinear_taps::<T>(w, factor);
    let src = g.value(x).data();
    let mut data = Vec::with_capacity(c * rows.len() * cols.len());
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, wy) in &rows {
            for &(x0, x1, wx) in &cols {
                let top = src[base + y0 * w + x0] * (T::one() - wx) + src[base + y0 * w + x1] * wx;
                let bot = src[base + y1 * w + x0] * (T::one() - wx) + src[base + y1 * w + x1] * wx;
                data.push((top * (T::one() - wy) + bot * wy) * value_scale);
            }
        }
    }
    let mut out_shape = shape.clone();
    let n = out_shape.len();
    out_shape[n - 2] = h * factor;
    out_shape[n - 1] = w * factor;
    let out = Tensor::new(&out_shape, data)?;
    Ok(g.record(out, &[x], UpsampleBilinearOp { factor, value_scale }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;

    #[test]
    fn activation_defining_cases() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert_eq!(prelu_scalar(-2.0f64, 0.25), -0.5);
        assert_eq!(prelu_scalar(3.0f64, 0.25), 3.0);
        assert!(sigmoid_scalar(-800.0f64) >= 0.0 && sigmoid_scalar(800.0f64) <= 1.0);
        assert!((softplus_scalar(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus_scalar(1000.0f32).is_finite());
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let x = Tensor::<f64>::full(&[7], 3.0);
        let p = softmax_values(&x, 0);
        assert!(p.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_sums_to_one_on_middle_axis() {
        let x = Tensor::<f64>::randn(&[2, 5, 3], 4.0, 1);
        let p = softmax_values(&x, 1);
        for o in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..5).map(|k| p.at(&[o, k, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::randn(&[2, 3], 1.0, 1));
        let b = g.constant(Tensor::randn(&[2, 4], 1.0, 2));
        let c = concat(&mut g, &[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 7]);
        let s = slice(&mut g, c, 1, 3, 4).unwrap();
        assert_eq!(g.value(s), g.value(b));
        assert!(concat(&mut g, &[a, c], 0).is_err());
    }

    #[test]
    fn bilinear_upsampling_preserves_constants() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[3, 5], 5.0));
        let y = upsample_bilinear(&mut g, x, 4, 4.0).unwrap();
        assert_eq!(g.shape(y), &[12, 20]);
        assert!(g.value(y).data().iter().all(|&v| (v - 20.0).abs() < 1e-12));
    }

    #[test]
    fn nearest_upsampling_repeats_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = upsample_nearest(&mut g, x, [1, 2, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        for seed in 0..20 {
            let x = Tensor::<f64>::randn(&[3, 4], 1.0, seed);
            let y = Tensor::<f64>::randn(&[3, 4], 1.0, seed + 100);
            let slope = Tensor::scalar(0.25);
            let w = Tensor::<f64>::randn(&[4, 2], 1.0, seed + 200);
            let r = Tensor::<f64>::randn(&[3, 2], 1.0, seed + 300);
            let err = check_inputs(&[x, y, slope, w], |g, v| {
                let s = sigmoid(g, v[0]);
                let p = prelu(g, v[1], v[2])?;
                let sp = softplus(g, v[1]);
                let m = mul(g, s, p)?;
                let a = add(g, m, sp)?;
                let sm = softmax(g, a, 1)?;
                let d = sub(g, sm, v[0])?;
                let mm = matmul(g, d, v[3])?;
                weighted_sum(g, mm, &r)
            })
            .unwrap();
            assert!(err < 1e-3, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn layout_gradients_match_finite_differences() {
        for seed in 0..20 {
            let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, seed);
            let b = Tensor::<f64>::randn(&[2], 1.0, seed + 1);
            let r = Tensor::<f64>::randn(&[2, 12, 16], 1.0, seed + 2);
            let r2 = Tensor::<f64>::randn(&[2, 5, 4], 1.0, seed + 3);
            let r3 = Tensor::<f64>::randn(&[2, 6, 8], 1.0, seed + 4);
            let err = check_inputs(&[x, b], |g, v| {
                let xb = add_channel_bias(g, v[0], v[1])?;
                let up = upsample_bilinear(g, xb, 4, 4.0)?;
                let c = concat(g, &[v[0], xb], 1)?;
                let s = slice(g, c, 1, 1, 5)?;
                let sc = scale_channels(g, s, vec![0.5, -2.0])?;
                let a = weighted_sum(g, up, &r)?;
                let b2 = weighted_sum(g, sc, &r2)?;
                let near = upsample_nearest(g, v[0], [1, 2, 2])?;
                let n = weighted_sum(g, near, &r3)?;
                let ab = add(g, a, b2)?;
                add(g, ab, n)
            })
            .unwrap();
            assert!(err < 1e-3, "seed {seed}: relative error {err}");
        }
    }
}
