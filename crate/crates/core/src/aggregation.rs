//! 3-D U-Net aggregation around the axis attention, and disparity regression.

use rand::Rng;
use rresm_numerics::{ops, Backward, BackwardCtx, Graph, ParamStore, Real, Tensor, Var};

use crate::layers::{Conv, ConvPrelu, Init};
use crate::mca::{Mca, McaConfig};
use crate::{Error, Result};

/// Channel widths of the three U-Net levels.
pub const UNET_CHANNELS: [usize; 3] = [16, 32, 48];

#[derive(Clone, Debug)]
pub struct Aggregation {
    pub mca: Mca,
    lift: Option<Conv>,
    down1: ConvPrelu,
    down2: ConvPrelu,
    bottleneck: ConvPrelu,
    up2: ConvPrelu,
    up1: ConvPrelu,
    head: Conv,
}

impl Aggregation {
    /// `groups` is the channel count of the incoming cost volume. The MCA
    /// module runs at that width; a 1×1×1 lift maps to the first U-Net level
    /// when it differs.
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, groups: usize, mca: McaConfig) -> Result<Self> {
        let [c0, c1, c2] = UNET_CHANNELS;
        let mca = Mca::new(store, rng, "agg.mca", groups, mca)?;
        let lift = (groups != c0).then(|| Conv::new3d(store, rng, "agg.lift", groups, c0, 1, 1, true, Init::Linear));
        Ok(Self {
            mca,
            lift,
            down1: ConvPrelu::new3d(store, rng, "agg.down1", c0, c1, 2),
            down2: ConvPrelu::new3d(store, rng, "agg.down2", c1, c2, 2),
            bottleneck: ConvPrelu::new3d(store, rng, "agg.bottleneck", c2, c2, 1),
            up2: ConvPrelu::new3d(store, rng, "agg.up2", c2, c1, 1),
            up1: ConvPrelu::new3d(store, rng, "agg.up1", c1, c0, 1),
            head: Conv::new3d(store, rng, "agg.head", c0, 1, 3, 1, true, Init::Linear),
        })
    }

    /// `g_n×D×H×W` cost volume to `1×D×H×W` matching scores.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, cv: Var) -> Result<Var> {
        let shape = g.shape(cv).to_vec();
        let &[_, d, h, w] = shape.as_slice() else {
            return Err(Error::Shape(format!("cost volume must be G×D×H×W, got {shape:?}")));
        };
        if d % 4 != 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("aggregation needs D, H, W divisible by 4, got {d}×{h}×{w}")));
        }
        let mut v0 = self.mca.forward(g, store, cv)?;
        if let Some(lift) = &self.lift {
            v0 = lift.forward(g, store, v0)?;
        }
        let s1 = self.down1.forward(g, store, v0)?;
        let s2 = self.down2.forward(g, store, s1)?;
        let b = self.bottleneck.forward(g, store, s2)?;
        let u2 = self.up2.forward(g, store, b)?;
        let u2 = ops::upsample_nearest(g, u2, [2, 2, 2])?;
        let u2 = ops::add(g, u2, s1)?;
        let u1 = self.up1.forward(g, store, u2)?;
        let u1 = ops::upsample_nearest(g, u1, [2, 2, 2])?;
        let u1 = ops::add(g, u1, v0)?;
        self.head.forward(g, store, u1)
    }
}

/// Collapses the raw cost volume to scores with a single 3-D convolution.
#[derive(Clone, Debug)]
pub struct InitialHead {
    conv: Conv,
}

impl InitialHead {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, groups: usize) -> Self {
        Self { conv: Conv::new3d(store, rng, "initial.head", groups, 1, 3, 1, true, Init::Linear) }
    }

    /// Quarter-resolution disparity `d_f` (in bins) from the cost volume.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, cv: Var) -> Result<Var> {
        let s = self.conv.forward(g, store, cv)?;
        soft_argmax(g, s)
    }
}

fn score_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [1, d, h, w] | [d, h, w] => Ok((d, h, w)),
        _ => Err(Error::Shape(format!("scores must be 1×D×H×W or D×H×W, got {shape:?}"))),
    }
}

/// Softmax over the disparity axis and its expectation, per pixel.
fn soft_argmax_forward<T: Real>(scores: &[T], d: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); hw];
    let mut e = vec![T::zero(); d];
    for (p, o) in out.iter_mut().enumerate() {
        let m = (0..d).map(|k| scores[k * hw + p]).fold(T::neg_infinity(), T::max);
        for k in 0..d {
            e[k] = (scores[k * hw + p] - m).exp();
        }
        let z: T = e.iter().copied().sum();
        let mut acc = T::zero();
        for (k, &ek) in e.iter().enumerate() {
            acc += T::of(k as f64) * (ek / z);
        }
        *o = acc;
    }
    out
}

pub fn soft_argmax_values<T: Real>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, h, w) = score_dims(scores.shape())?;
    Ok(Tensor::new(&[h, w], soft_argmax_forward(scores.data(), d, h * w))?)
}

struct SoftArgmaxOp;

impl<T: Real> Backward<T> for SoftArgmaxOp {
    fn name(&self) -> &'static str {
        "soft_argmax"
    }

    // ∂μ/∂s_k = p_k (k − μ)
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> rresm_numerics::Result<Vec<Option<Tensor<T>>>> {
        let scores = ctx.inputs[0];
        let (d, h, w) = score_dims(scores.shape()).expect("checked in forward");
        let hw = h * w;
        let (s, mu, gout) = (scores.data(), ctx.output.data(), ctx.grad.data());
        let mut gs = vec![T::zero(); s.len()];
        for p in 0..hw {
            let m = (0..d).map(|k| s[k * hw + p]).fold(T::neg_infinity(), T::max);
            let z: T = (0..d).map(|k| (s[k * hw + p] - m).exp()).sum();
            for k in 0..d {
                let pk = (s[k * hw + p] - m).exp() / z;
                gs[k * hw + p] = gout[p] * pk * (T::of(k as f64) - mu[p]);
            }
        }
        Ok(vec![Some(Tensor::new(scores.shape(), gs)?)])
    }
}

/// Expected disparity bin under the softmax of `scores` (`1×D×H×W`), giving `H×W`.
pub fn soft_argmax<T: Real>(g: &mut Graph<T>, scores: Var) -> Result<Var> {
    let out = soft_argmax_values(g.value(scores))?;
    g.add_flops(4 * g.value(scores).numel() as u64);
    Ok(g.record(out, &[scores], SoftArgmaxOp))
}

/// Quarter-resolution disparity to full resolution: bilinear ×4, values ×4.
pub fn upsample_disparity<T: Real>(g: &mut Graph<T>, d: Var) -> Result<Var> {
    if g.shape(d).len() != 2 {
        return Err(Error::Shape(format!("disparity map must be H×W, got {:?}", g.shape(d))));
    }
    Ok(ops::upsample_bilinear(g, d, 4, T::of(4.0))?)
}
