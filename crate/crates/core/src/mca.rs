//! Axis attention over a cost volume with a bidirectional selective scan.
//!
//! The volume `C×D×H×W` is pooled onto its three axes, gated with a sigmoid,
//! and laid out as one sequence of `W + H + D` tokens of dimension `C`
//! (x segment, then y, then z). The scan output is split back into the three
//! segments and multiplied onto the volume.

use rand::Rng;
use rresm_numerics::{ops, Backward, BackwardCtx, Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::{Error, Result};

type Grads<T> = rresm_numerics::Result<Vec<Option<Tensor<T>>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            _ => Err(Error::Config(format!("pooling must be mean or max, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McaConfig {
    pub pooling: Pooling,
    pub state_dim: usize,
    pub head_dim: usize,
    /// When false the volume passes through unweighted.
    pub enabled: bool,
}

impl Default for McaConfig {
    fn default() -> Self {
        Self { pooling: Pooling::Mean, state_dim: 16, head_dim: 8, enabled: true }
    }
}

/// Pooled axis descriptors of a `C×D×H×W` volume.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisDescriptors<T> {
    pub z_x: Tensor<T>,
    pub z_y: Tensor<T>,
    pub z_z: Tensor<T>,
}

/// Per-axis weights split from the refined sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<T> {
    pub a_x: Tensor<T>,
    pub a_y: Tensor<T>,
    pub a_z: Tensor<T>,
}

fn vol_dims(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [c, d, h, w] => Ok([c, d, h, w]),
        _ => Err(Error::Shape(format!("expected a C×D×H×W volume, got {shape:?}"))),
    }
}

/// Pools onto the three axes and returns them concatenated as `C×(W+H+D)`.
fn pool_concat<T: Real>(vol: &Tensor<T>, pooling: Pooling) -> Result<Tensor<T>> {
    let [c, d, h, w] = vol_dims(vol.shape())?;
    let l = w + h + d;
    let data = vol.data();
    let mut out = vec![T::zero(); c * l];
    for ch in 0..c {
        let (sx, rest) = out[ch * l..(ch + 1) * l].split_at_mut(w);
        let (sy, sz) = rest.split_at_mut(h);
        let init = match pooling {
            Pooling::Mean => T::zero(),
            Pooling::Max => T::neg_infinity(),
        };
        sx.fill(init);
        sy.fill(init);
        for (z, szv) in sz.iter_mut().enumerate() {
            let mut accz = init;
            for y in 0..h {
                let row = &data[((ch * d + z) * h + y) * w..((ch * d + z) * h + y + 1) * w];
                for (x, &v) in row.iter().enumerate() {
                    match pooling {
                        Pooling::Mean => {
                            sx[x] += v;
                            sy[y] += v;
                            accz += v;
                        }
                        Pooling::Max => {
                            sx[x] = sx[x].max(v);
                            sy[y] = sy[y].max(v);
                            accz = accz.max(v);
                        }
                    }
                }
            }
            *szv = accz;
        }
        if pooling == Pooling::Mean {
            sx.iter_mut().for_each(|v| *v /= T::of((d * h) as f64));
            sy.iter_mut().for_each(|v| *v /= T::of((d * w) as f64));
            sz.iter_mut().for_each(|v| *v /= T::of((h * w) as f64));
        }
    }
    Ok(Tensor::new(&[c, l], out)?)
}

fn split_segments<T: Real>(seq: &Tensor<T>, w: usize, h: usize, d: usize) -> Result<[Tensor<T>; 3]> {
    Ok([
        ops::slice_values(seq, 1, 0, w)?,
        ops::slice_values(seq, 1, w, h)?,
        ops::slice_values(seq, 1, w + h, d)?,
    ])
}

pub fn axis_pool<T: Real>(vol: &Tensor<T>, pooling: Pooling) -> Result<AxisDescriptors<T>> {
    let [_, d, h, w] = vol_dims(vol.shape())?;
    let [z_x, z_y, z_z] = split_segments(&pool_concat(vol, pooling)?, w, h, d)?;
    Ok(AxisDescriptors { z_x, z_y, z_z })
}

/// `concat(σ(z_x), σ(z_y), σ(z_z))` along the sequence axis.
pub fn gate_concat<T: Real>(desc: &AxisDescriptors<T>) -> Result<Tensor<T>> {
    let c = desc.z_x.shape()[0];
    if desc.z_y.shape()[0] != c || desc.z_z.shape()[0] != c {
        return Err(Error::Shape("descriptor channel counts differ".into()));
    }
    let mut g = Graph::inference();
    let parts = [desc.z_x.clone(), desc.z_y.clone(), desc.z_z.clone()].map(|t| g.constant(t));
    let cat = ops::concat(&mut g, &parts, 1)?;
    let s = ops::sigmoid(&mut g, cat);
    Ok(g.value(s).clone())
}

pub fn split<T: Real>(seq: &Tensor<T>, w: usize, h: usize, d: usize) -> Result<AttentionMaps<T>> {
    check_len(seq.shape(), w, h, d)?;
    let [a_x, a_y, a_z] = split_segments(seq, w, h, d)?;
    Ok(AttentionMaps { a_x, a_y, a_z })
}

struct AxisPoolOp {
    pooling: Pooling,
}

impl<T: Real> Backward<T> for AxisPoolOp {
    fn name(&self) -> &'static str {
        "axis_pool"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let vol = ctx.inputs[0];
        let [c, d, h, w] = [vol.shape()[0], vol.shape()[1], vol.shape()[2], vol.shape()[3]];
        let l = w + h + d;
        let (gs, out) = (ctx.grad.data(), ctx.output.data());
        let src = vol.data();
        let mut gv = vec![T::zero(); vol.numel()];
        match self.pooling {
            Pooling::Mean => {
                let (nx, ny, nz) = (T::of((d * h) as f64), T::of((d * w) as f64), T::of((h * w) as f64));
                for ch in 0..c {
                    let g = &gs[ch * l..(ch + 1) * l];
                    for z in 0..d {
                        let gz = g[w + h + z] / nz;
                        for y in 0..h {
                            let gy = g[w + y] / ny;
                            let base = ((ch * d + z) * h + y) * w;
                            for x in 0..w {
                                gv[base + x] = g[x] / nx + gy + gz;
                            }
                        }
                    }
                }
            }
            Pooling::Max => {
                // Route each descriptor's gradient to the first maximal element.
                for ch in 0..c {
                    let (g, o) = (&gs[ch * l..(ch + 1) * l], &out[ch * l..(ch + 1) * l]);
                    let mut seen = vec![false; l];
                    for z in 0..d {
                        for y in 0..h {
                            let base = ((ch * d + z) * h + y) * w;
                            for x in 0..w {
                                let v = src[base + x];
                                for k in [x, w + y, w + h + z] {
                                    if !seen[k] && v == o[k] {
                                        seen[k] = true;
                                        gv[base + x] += g[k];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::new(vol.shape(), gv)?)])
    }
}

/// Gated descriptor sequence `C×(W+H+D)` recorded on the graph.
pub fn pool_gate<T: Real>(g: &mut Graph<T>, vol: Var, pooling: Pooling) -> Result<Var> {
    let pooled = pool_concat(g.value(vol), pooling)?;
    g.add_flops(3 * g.value(vol).numel() as u64);
    let z = g.record(pooled, &[vol], AxisPoolOp { pooling });
    Ok(ops::sigmoid(g, z))
}

fn check_len(seq: &[usize], w: usize, h: usize, d: usize) -> Result<()> {
    if seq.len() != 2 || seq[1] != w + h + d {
        return Err(Error::Contract(format!(
            "attention sequence {seq:?} does not match W + H + D = {}",
            w + h + d
        )));
    }
    Ok(())
}

fn reweight<T: Real>(vol: &Tensor<T>, seq: &Tensor<T>) -> Tensor<T> {
    let [c, d, h, w] = [vol.shape()[0], vol.shape()[1], vol.shape()[2], vol.shape()[3]];
    let l = w + h + d;
    let (v, a) = (vol.data(), seq.data());
    let mut out = vec![T::zero(); vol.numel()];
    for ch in 0..c {
        let (ax, ay, az) = (&a[ch * l..ch * l + w], &a[ch * l + w..ch * l + w + h], &a[ch * l + w + h..(ch + 1) * l]);
        for z in 0..d {
            for y in 0..h {
                let base = ((ch * d + z) * h + y) * w;
                for x in 0..w {
                    out[base + x] = v[base + x] * ax[x] * ay[y] * az[z];
                }
            }
        }
    }
    Tensor::new(vol.shape(), out).expect("same shape")
}

/// Applies a `C×(W+H+D)` sequence of axis weights to the volume.
pub fn split_apply_values<T: Real>(vol: &Tensor<T>, seq: &Tensor<T>) -> Result<Tensor<T>> {
    let [c, d, h, w] = vol_dims(vol.shape())?;
    check_len(seq.shape(), w, h, d)?;
    if seq.shape()[0] != c {
        return Err(Error::Contract(format!("{} attention channels for a {c}-channel volume", seq.shape()[0])));
    }
    Ok(reweight(vol, seq))
}

struct ReweightOp;

impl<T: Real> Backward<T> for ReweightOp {
    fn name(&self) -> &'static str {
        "axis_reweight"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let (vol, seq) = (ctx.inputs[0], ctx.inputs[1]);
        let [c, d, h, w] = [vol.shape()[0], vol.shape()[1], vol.shape()[2], vol.shape()[3]];
        let l = w + h + d;
        let (v, a, go) = (vol.data(), seq.data(), ctx.grad.data());
        let mut gv = vec![T::zero(); vol.numel()];
        let mut ga = vec![T::zero(); seq.numel()];
        for ch in 0..c {
            let a = &a[ch * l..(ch + 1) * l];
            let ga = &mut ga[ch * l..(ch + 1) * l];
            for z in 0..d {
                let az = a[w + h + z];
                for y in 0..h {
                    let ay = a[w + y];
                    let base = ((ch * d + z) * h + y) * w;
                    let (mut sy, mut sz) = (T::zero(), T::zero());
                    for x in 0..w {
                        let ax = a[x];
                        let gov = go[base + x];
                        gv[base + x] = gov * ax * ay * az;
                        let gvv = gov * v[base + x];
                        ga[x] += gvv * ay * az;
                        sy += gvv * ax * az;
                        sz += gvv * ax * ay;
                    }
                    ga[w + y] += sy;
                    ga[w + h + z] += sz;
                }
            }
        }
        Ok(vec![Some(Tensor::new(vol.shape(), gv)?), Some(Tensor::new(seq.shape(), ga)?)])
    }
}

pub fn split_apply<T: Real>(g: &mut Graph<T>, vol: Var, seq: Var) -> Result<Var> {
    let out = split_apply_values(g.value(vol), g.value(seq))?;
    g.add_flops(3 * out.numel() as u64);
    Ok(g.record(out, &[vol, seq], ReweightOp))
}

struct ScanOp<T> {
    reverse: bool,
    /// Every state `h_t`, laid out `[c][step][n]`.
    states: Vec<T>,
}

/// Runs the recurrence over channels, optionally recording every state.
#[allow(clippy::too_many_arguments)]
fn scan_forward<T: Real>(
    x: &[T],
    dt: &[T],
    a_log: &[T],
    b: &[T],
    cm: &[T],
    d_skip: &[T],
    ch: usize,
    l: usize,
    n: usize,
    reverse: bool,
    mut states: Option<&mut Vec<T>>,
) -> Vec<T> {
    let heads = a_log.len();
    let per_head = ch / heads;
    let mut y = vec![T::zero(); ch * l];
    let mut h = vec![T::zero(); n];
    for c in 0..ch {
        let hd = c / per_head;
        let a = -a_log[hd].exp();
        h.fill(T::zero());
        for step in 0..l {
            let t = if reverse { l - 1 - step } else { step };
            let dtv = dt[hd * l + t];
            let decay = (dtv * a).exp();
            let xt = x[c * l + t];
            let mut out = T::zero();
            for k in 0..n {
                h[k] = decay * h[k] + dtv * b[k * l + t] * xt;
                out += cm[k * l + t] * h[k];
            }
            if let Some(s) = states.as_deref_mut() {
                s.extend_from_slice(&h);
            }
            y[c * l + t] = out + d_skip[c] * xt;
        }
    }
    y
}

impl<T: Real> Backward<T> for ScanOp<T> {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Grads<T> {
        let [x, dt, a_log, b, cm, d_skip] = [0, 1, 2, 3, 4, 5].map(|i| ctx.inputs[i].data());
        let (ch, l) = (ctx.inputs[0].shape()[0], ctx.inputs[0].shape()[1]);
        let n = ctx.inputs[3].shape()[0];
        let heads = a_log.len();
        let per_head = ch / heads;
        let gy = ctx.grad.data();
        let mut gx = vec![T::zero(); x.len()];
        let mut gdt = vec![T::zero(); dt.len()];
        let mut ga = vec![T::zero(); heads];
        let mut gb = vec![T::zero(); b.len()];
        let mut gc = vec![T::zero(); cm.len()];
        let mut gd = vec![T::zero(); d_skip.len()];
        let mut gh = vec![T::zero(); n];
        let state = |c: usize, step: usize, k: usize| self.states[(c * l + step) * n + k];
        for c in 0..ch {
            let hd = c / per_head;
            let a = -a_log[hd].exp();
            gh.fill(T::zero());
            for step in (0..l).rev() {
                let t = if self.reverse { l - 1 - step } else { step };
                let g = gy[c * l + t];
                let xt = x[c * l + t];
                let dtv = dt[hd * l + t];
                let decay = (dtv * a).exp();
                gd[c] += g * xt;
                let mut gxt = g * d_skip[c];
                let mut gdecay = T::zero();
                let mut gdt_t = T::zero();
                for k in 0..n {
                    let hk = state(c, step, k);
                    gc[k * l + t] += g * hk;
                    gh[k] += g * cm[k * l + t];
                    let prev = if step == 0 { T::zero() } else { state(c, step - 1, k) };
                    gdecay += gh[k] * prev;
                    gb[k * l + t] += gh[k] * dtv * xt;
                    gxt += gh[k] * dtv * b[k * l + t];
                    gdt_t += gh[k] * b[k * l + t] * xt;
                    gh[k] *= decay;
                }
                gx[c * l + t] += gxt;
                gdt[hd * l + t] += gdt_t + gdecay * decay * a;
                ga[hd] += gdecay * decay * dtv;
            }
        }
        for (hd, v) in ga.iter_mut().enumerate() {
            // dA/da_log = A
            *v *= -a_log[hd].exp();
        }
        let shapes: Vec<&[usize]> = ctx.inputs.iter().map(|t| t.shape()).collect();
        let grads = [gx, gdt, ga, gb, gc, gd];
        let mut out = Vec::with_capacity(6);
        for (i, gdat) in grads.into_iter().enumerate() {
            out.push(if ctx.needs_grad[i] { Some(Tensor::new(shapes[i], gdat)?) } else { None });
        }
        Ok(out)
    }
}

/// Records one directional scan. Inputs: `x: C×L`, `dt: H×L` (positive),
/// `a_log: H` with `A = −exp(a_log)`, `b, c: N×L`, `d_skip: C`.
pub fn selective_scan<T: Real>(g: &mut Graph<T>, inputs: [Var; 6], reverse: bool) -> Result<Var> {
    let [x, dt, a_log, b, cm, dsk] = inputs;
    let (&[ch, l], &[heads, l2], &[n, l3], &[n2, l4]) =
        (g.shape(x), g.shape(dt), g.shape(b), g.shape(cm))
    else {
        return Err(Error::Shape("scan operands must be matrices".into()));
    };
    if l2 != l || l3 != l || l4 != l || n2 != n || g.value(a_log).numel() != heads
        || g.value(dsk).numel() != ch || heads == 0 || ch % heads != 0
    {
        return Err(Error::Shape(format!(
            "inconsistent scan operands: x {ch}×{l}, dt {heads}×{l2}, b {n}×{l3}, c {n2}×{l4}"
        )));
    }
    let mut states = Vec::with_capacity(ch * l * n);
    let y = scan_forward(
        g.value(x).data(),
        g.value(dt).data(),
        g.value(a_log).data(),
        g.value(b).data(),
        g.value(cm).data(),
        g.value(dsk).data(),
        ch,
        l,
        n,
        reverse,
        Some(&mut states),
    );
    g.add_flops(6 * (ch * l * n) as u64);
    let out = Tensor::new(&[ch, l], y)?;
    Ok(g.record(out, &inputs, ScanOp { reverse, states }))
}

/// Projections of one scan direction.
#[derive(Clone, Debug)]
pub struct SsmLayer {
    pub dt_w: ParamId,
    pub dt_b: ParamId,
    pub b_w: ParamId,
    pub b_b: ParamId,
    pub c_w: ParamId,
    pub c_b: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

impl SsmLayer {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, ch: usize, cfg: &McaConfig) -> Result<Self> {
        if cfg.head_dim == 0 || ch % cfg.head_dim != 0 || cfg.state_dim == 0 {
            return Err(Error::Config(format!(
                "{ch} channels cannot be split into heads of {} (state {})",
                cfg.head_dim, cfg.state_dim
            )));
        }
        let heads = ch / cfg.head_dim;
        let n = cfg.state_dim;
        let std = (1.0 / ch as f64).sqrt();
        // softplus(ln(e − 1)) = 1: unit step size at initialization.
        let dt_bias = (std::f64::consts::E - 1.0).ln();
        Ok(Self {
            dt_w: store.add(format!("{name}.dt.weight"), Tensor::randn_with(&[heads, ch], 0.1 * std, rng)),
            dt_b: store.add(format!("{name}.dt.bias"), Tensor::full(&[heads, 1], T::of(dt_bias))),
            b_w: store.add(format!("{name}.b.weight"), Tensor::randn_with(&[n, ch], std, rng)),
            b_b: store.add(format!("{name}.b.bias"), Tensor::zeros(&[n, 1])),
            c_w: store.add(format!("{name}.c.weight"), Tensor::randn_with(&[n, ch], std, rng)),
            c_b: store.add(format!("{name}.c.bias"), Tensor::zeros(&[n, 1])),
            a_log: store.add(format!("{name}.a_log"), Tensor::zeros(&[heads])),
            d_skip: store.add(format!("{name}.d_skip"), Tensor::ones(&[ch])),
        })
    }

    /// Scans `seq: C×L` in one direction.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seq: Var, reverse: bool) -> Result<Var> {
        let proj = |g: &mut Graph<T>, w: ParamId, b: ParamId| -> Result<Var> {
            let (wv, bv) = (g.param(store, w), g.param(store, b));
            let m = ops::matmul(g, wv, seq)?;
            Ok(ops::add_channel_bias(g, m, bv)?)
        };
        let dt_lin = proj(g, self.dt_w, self.dt_b)?;
        let dt = ops::softplus(g, dt_lin);
        let b = proj(g, self.b_w, self.b_b)?;
        let c = proj(g, self.c_w, self.c_b)?;
        let a_log = g.param(store, self.a_log);
        let d_skip = g.param(store, self.d_skip);
        selective_scan(g, [seq, dt, a_log, b, c, d_skip], reverse)
    }
}

/// Two directional scans merged by a linear output projection.
#[derive(Clone, Debug)]
pub struct BiMamba {
    pub forward_scan: SsmLayer,
    pub backward_scan: SsmLayer,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl BiMamba {
    /// Output weights start small with unit bias, so the refined weights are
    /// close to one and the untrained module is nearly the identity.
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, ch: usize, cfg: &McaConfig) -> Result<Self> {
        let forward_scan = SsmLayer::new(store, rng, &format!("{name}.fwd"), ch, cfg)?;
        let backward_scan = SsmLayer::new(store, rng, &format!("{name}.bwd"), ch, cfg)?;
        let out_w = store.add(format!("{name}.out.weight"), Tensor::randn_with(&[ch, ch], 0.01, rng));
        let out_b = store.add(format!("{name}.out.bias"), Tensor::ones(&[ch, 1]));
        Ok(Self { forward_scan, backward_scan, out_w, out_b })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, seq: Var) -> Result<Var> {
        let f = self.forward_scan.forward(g, store, seq, false)?;
        let b = self.backward_scan.forward(g, store, seq, true)?;
        let s = ops::add(g, f, b)?;
        let (w, bias) = (g.param(store, self.out_w), g.param(store, self.out_b));
        let m = ops::matmul(g, w, s)?;
        Ok(ops::add_channel_bias(g, m, bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct Mca {
    pub config: McaConfig,
    pub bimamba: BiMamba,
}

impl Mca {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, ch: usize, config: McaConfig) -> Result<Self> {
        let bimamba = BiMamba::new(store, rng, name, ch, &config)?;
        Ok(Self { config, bimamba })
    }

    /// Refined `C×(W+H+D)` attention sequence for `vol`.
    pub fn attention<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, vol: Var) -> Result<Var> {
        let seq = pool_gate(g, vol, self.config.pooling)?;
        self.bimamba.forward(g, store, seq)
    }

    /// Re-weighted volume; the identity when the module is disabled.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, vol: Var) -> Result<Var> {
        vol_dims(g.shape(vol))?;
        if !self.config.enabled {
            return Ok(vol);
        }
        let a = self.attention(g, store, vol)?;
        split_apply(g, vol, a)
    }
}
