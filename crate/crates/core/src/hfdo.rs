//! Wavelet-domain refinement of the disparity.
//!
//! The left context feature is projected, split into Haar subbands, the LL
//! band is attenuated by `omega`, and the filtered feature is reconstructed.
//! A small head turns it into a residual added to the aggregated disparity.

use rand::Rng;
use rresm_numerics::conv::{self, ConvOpts};
use rresm_numerics::{ops, Backward, BackwardCtx, Graph, ParamStore, Real, Tensor, Var};

use crate::layers::{Conv, Init, Prelu};
use crate::{Error, Result};

/// The four 2×2 analysis kernels, in band order LL, LH, HL, HH.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HaarKernels {
    pub bands: [[[f64; 2]; 2]; 4],
}

impl Default for HaarKernels {
    fn default() -> Self {
        Self {
            bands: [
                [[0.5, 0.5], [0.5, 0.5]],
                [[0.5, -0.5], [0.5, -0.5]],
                [[0.5, 0.5], [-0.5, -0.5]],
                [[0.5, -0.5], [-0.5, 0.5]],
            ],
        }
    }
}

impl HaarKernels {
    /// Depthwise kernel `4C×1×2×2`; output channel `4c + k` is band `k` of channel `c`.
    pub fn depthwise<T: Real>(&self, channels: usize) -> Tensor<T> {
        Tensor::from_fn(&[4 * channels, 1, 2, 2], |i| {
            let k = (i / 4) % 4;
            T::of(self.bands[k][(i % 4) / 2][i % 2])
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    /// 1×1 projection over channels.
    Linear,
    /// 3×3 convolution.
    Conv3,
}

impl std::str::FromStr for ContextMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ContextMode::Linear),
            "conv3" => Ok(ContextMode::Conv3),
            _ => Err(Error::Config(format!("context mode must be linear or conv3, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for ContextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ContextMode::Linear => "linear",
            ContextMode::Conv3 => "conv3",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HfdoConfig {
    pub omega: f64,
    pub context: ContextMode,
    pub context_channels: usize,
    pub prelu_slope: f64,
}

impl Default for HfdoConfig {
    fn default() -> Self {
        Self { omega: 0.5, context: ContextMode::Linear, context_channels: 16, prelu_slope: 0.25 }
    }
}

impl HfdoConfig {
    pub fn validate(&self) -> Result<()> {
        check_omega(self.omega)?;
        if self.context_channels == 0 {
            return Err(Error::Config("hfdo context channels must be positive".into()));
        }
        Ok(())
    }
}

fn check_omega(omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Config(format!("omega must lie in [0, 1], got {omega}")));
    }
    Ok(())
}

/// Haar subbands, each `C×H/2×W/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

fn even_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok((c, h, w)),
        [_, _, _] => Err(Error::Contract(format!("wavelet transform needs even extents, got {shape:?}"))),
        _ => Err(Error::Shape(format!("expected C×H×W, got {shape:?}"))),
    }
}

/// Depthwise analysis: interleaved `4C×H/2×W/2` band tensor on the graph.
pub fn dwt<T: Real>(g: &mut Graph<T>, x: Var, kernels: &HaarKernels) -> Result<Var> {
    let (c, _, _) = even_dims(g.shape(x))?;
    let k = g.constant(kernels.depthwise(c));
    Ok(conv::conv2d(g, x, k, None, ConvOpts::new(2, 0).groups(c))?)
}

/// Synthesis from interleaved bands: the adjoint of [`dwt`].
pub fn iwt<T: Real>(g: &mut Graph<T>, bands: Var, kernels: &HaarKernels) -> Result<Var> {
    let c4 = g.shape(bands)[0];
    if c4 % 4 != 0 {
        return Err(Error::Contract(format!("{c4} band channels is not a multiple of 4")));
    }
    let k = g.constant(kernels.depthwise(c4 / 4));
    Ok(conv::conv_transpose2d(g, bands, k, ConvOpts::new(2, 0).groups(c4 / 4))?)
}

/// Scales the LL band of interleaved bands by `omega`.
pub fn attenuate_interleaved<T: Real>(g: &mut Graph<T>, bands: Var, omega: f64) -> Result<Var> {
    check_omega(omega)?;
    let c4 = g.shape(bands)[0];
    let factors = (0..c4).map(|i| if i % 4 == 0 { T::of(omega) } else { T::one() }).collect();
    Ok(ops::scale_channels(g, bands, factors)?)
}

fn deinterleave<T: Real>(t: &Tensor<T>) -> Result<WaveletBands<T>> {
    let (c4, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let c = c4 / 4;
    let plane = h * w;
    let band = |k: usize| -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(c * plane);
        for ch in 0..c {
            data.extend_from_slice(&t.data()[(4 * ch + k) * plane..(4 * ch + k + 1) * plane]);
        }
        Ok(Tensor::new(&[c, h, w], data)?)
    };
    Ok(WaveletBands { ll: band(0)?, lh: band(1)?, hl: band(2)?, hh: band(3)? })
}

fn interleave<T: Real>(b: &WaveletBands<T>) -> Result<Tensor<T>> {
    let s = b.ll.shape().to_vec();
    if [&b.lh, &b.hl, &b.hh].iter().any(|t| t.shape() != s.as_slice()) || s.len() != 3 {
        return Err(Error::Contract("wavelet bands have inconsistent shapes".into()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let mut data = Vec::with_capacity(4 * c * plane);
    for ch in 0..c {
        for t in [&b.ll, &b.lh, &b.hl, &b.hh] {
            data.extend_from_slice(&t.data()[ch * plane..(ch + 1) * plane]);
        }
    }
    Ok(Tensor::new(&[4 * c, h, w], data)?)
}

pub fn haar_dwt<T: Real>(x: &Tensor<T>, kernels: &HaarKernels) -> Result<WaveletBands<T>> {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let b = dwt(&mut g, xv, kernels)?;
    deinterleave(g.value(b))
}

pub fn attenuate<T: Real>(bands: &WaveletBands<T>, omega: f64) -> Result<WaveletBands<T>> {
    check_omega(omega)?;
    Ok(WaveletBands { ll: bands.ll.scale(T::of(omega)), ..bands.clone() })
}

pub fn haar_iwt<T: Real>(bands: &WaveletBands<T>, kernels: &HaarKernels) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let b = g.constant(interleave(bands)?);
    let x = iwt(&mut g, b, kernels)?;
    Ok(g.value(x).clone())
}

/// Replicates the last row/column so both extents are even.
struct PadEvenOp;

impl<T: Real> Backward<T> for PadEvenOp {
    fn name(&self) -> &'static str {
        "pad_even"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> rresm_numerics::Result<Vec<Option<Tensor<T>>>> {
        let s = ctx.inputs[0].shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ph, pw) = (ctx.grad.shape()[1], ctx.grad.shape()[2]);
        let mut gx = Tensor::zeros(s);
        for ch in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    let v = gx.at(&[ch, y.min(h - 1), x.min(w - 1)]) + ctx.grad.at(&[ch, y, x]);
                    gx.set(&[ch, y.min(h - 1), x.min(w - 1)], v);
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

fn pad_even<T: Real>(g: &mut Graph<T>, x: Var) -> Result<(Var, bool, bool)> {
    let s = g.shape(x).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (pad_h, pad_w) = (h % 2 == 1, w % 2 == 1);
    if !pad_h && !pad_w {
        return Ok((x, false, false));
    }
    let (ph, pw) = (h + pad_h as usize, w + pad_w as usize);
    let src = g.value(x);
    let out = Tensor::from_fn(&[c, ph, pw], |i| {
        let (ch, y, xx) = (i / (ph * pw), (i / pw) % ph, i % pw);
        src.at(&[ch, y.min(h - 1), xx.min(w - 1)])
    });
    Ok((g.record(out, &[x], PadEvenOp), pad_h, pad_w))
}

/// Which extents were padded by replication before the transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PadInfo {
    pub bottom: bool,
    pub right: bool,
}

#[derive(Clone, Debug)]
pub struct Hfdo {
    pub config: HfdoConfig,
    pub kernels: HaarKernels,
    context: Conv,
    head: Conv,
    head_act: Prelu,
}

impl Hfdo {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, channels: usize, config: HfdoConfig) -> Result<Self> {
        config.validate()?;
        let cs = config.context_channels;
        let k = match config.context {
            ContextMode::Linear => 1,
            ContextMode::Conv3 => 3,
        };
        let context = Conv::new2d(store, rng, "hfdo.context", channels, cs, k, 1, true, Init::Prelu);
        // A zero head makes the refinement start as the identity on d_cg.
        let head = Conv::new2d(store, rng, "hfdo.head", cs, 1, 3, 1, true, Init::Zero);
        let head_act = Prelu::new(store, "hfdo.head");
        store.get_mut(head_act.slope).value = Tensor::scalar(T::of(config.prelu_slope));
        Ok(Self { config, kernels: HaarKernels::default(), context, head, head_act })
    }

    /// `F_s = relu(project(F_l))`, padded to even extents if needed.
    pub fn context_project<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_l: Var) -> Result<(Var, PadInfo)> {
        if g.shape(f_l).len() != 3 {
            return Err(Error::Shape(format!("context feature must be C×H×W, got {:?}", g.shape(f_l))));
        }
        let (x, bottom, right) = pad_even(g, f_l)?;
        let p = self.context.forward(g, store, x)?;
        Ok((ops::relu(g, p), PadInfo { bottom, right }))
    }

    /// Filtered context feature `IWT(attenuate(DWT(F_s)))`.
    pub fn filter<T: Real>(&self, g: &mut Graph<T>, fs: Var) -> Result<Var> {
        let bands = dwt(g, fs, &self.kernels)?;
        let bands = attenuate_interleaved(g, bands, self.config.omega)?;
        iwt(g, bands, &self.kernels)
    }

    /// Quarter-resolution residual, cropped back to the unpadded extent.
    pub fn residual<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, filtered: Var, pad: PadInfo) -> Result<Var> {
        let r = self.head.forward(g, store, filtered)?;
        let r = self.head_act.forward(g, store, r)?;
        let s = g.shape(r).to_vec();
        let mut r = ops::reshape(g, r, &s[1..])?;
        if pad.bottom {
            r = ops::slice(g, r, 0, 0, s[1] - 1)?;
        }
        if pad.right {
            r = ops::slice(g, r, 1, 0, s[2] - 1)?;
        }
        Ok(r)
    }

    /// `d_dr = relu(d + upsample(residual))` with `d` at full resolution.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_l: Var, d: Var) -> Result<Var> {
        let (fs, pad) = self.context_project(g, store, f_l)?;
        let filtered = self.filter(g, fs)?;
        let r = self.residual(g, store, filtered, pad)?;
        refine(g, d, r)
    }
}

/// `relu(d + 4·bilinear×4(residual))`.
pub fn refine<T: Real>(g: &mut Graph<T>, d: Var, residual: Var) -> Result<Var> {
    let up = ops::upsample_bilinear(g, residual, 4, T::of(4.0))?;
    if g.shape(up) != g.shape(d) {
        return Err(Error::Shape(format!(
            "residual upsamples to {:?} but disparity is {:?}",
            g.shape(up),
            g.shape(d)
        )));
    }
    let s = ops::add(g, d, up)?;
    Ok(ops::relu(g, s))
}
