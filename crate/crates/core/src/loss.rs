//! Masked smooth-L1 supervision of the three disparity outputs.

use rresm_numerics::{ops, Backward, BackwardCtx, Graph, Real, Tensor, Var};

use crate::{Error, Result};

/// Ground truth with its validity mask (`0 < gt < max_disparity`, finite).
#[derive(Clone, Debug, PartialEq)]
pub struct Supervision<T> {
    pub gt: Tensor<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> Supervision<T> {
    pub fn new(gt: Tensor<T>, max_disparity: f64) -> Self {
        let max = T::of(max_disparity);
        let mask = gt.data().iter().map(|&v| v.is_finite() && v > T::zero() && v < max).collect();
        Self { gt, mask }
    }

    /// Also excludes pixels where `extra` is false (e.g. occlusions).
    pub fn with_mask(gt: Tensor<T>, max_disparity: f64, extra: &[bool]) -> Result<Self> {
        if extra.len() != gt.numel() {
            return Err(Error::Shape(format!("mask of {} pixels for {} ground-truth pixels", extra.len(), gt.numel())));
        }
        let mut s = Self::new(gt, max_disparity);
        s.mask.iter_mut().zip(extra).for_each(|(m, &e)| *m &= e);
        Ok(s)
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w1: 1.0 / 3.0, w2: 1.0 / 3.0, w3: 1.0 / 3.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w1, self.w2, self.w3].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

pub fn smooth_l1_scalar<T: Real>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::of(0.5) * x * x
    } else {
        a - T::of(0.5)
    }
}

fn smooth_l1_grad<T: Real>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

fn check<T: Real>(pred: &[usize], sup: &Supervision<T>) -> Result<usize> {
    if pred != sup.gt.shape() {
        return Err(Error::Shape(format!("prediction {pred:?} vs ground truth {:?}", sup.gt.shape())));
    }
    match sup.n_valid() {
        0 => Err(Error::EmptyMask("no valid ground-truth pixel".into())),
        n => Ok(n),
    }
}

pub fn smooth_l1_values<T: Real>(pred: &Tensor<T>, sup: &Supervision<T>) -> Result<T> {
    let n = check(pred.shape(), sup)?;
    let mut total = T::zero();
    for ((&p, &g), &m) in pred.data().iter().zip(sup.gt.data()).zip(&sup.mask) {
        if m {
            total += smooth_l1_scalar(p - g);
        }
    }
    Ok(total / T::of(n as f64))
}

struct SmoothL1Op<T> {
    gt: Tensor<T>,
    mask: Vec<bool>,
    n: usize,
}

impl<T: Real> Backward<T> for SmoothL1Op<T> {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> rresm_numerics::Result<Vec<Option<Tensor<T>>>> {
        let scale = ctx.grad.data()[0] / T::of(self.n as f64);
        let pred = ctx.inputs[0];
        let data = pred
            .data()
            .iter()
            .zip(self.gt.data())
            .zip(&self.mask)
            .map(|((&p, &g), &m)| if m { scale * smooth_l1_grad(p - g) } else { T::zero() })
            .collect();
        Ok(vec![Some(Tensor::new(pred.shape(), data)?)])
    }
}

/// Mean smooth-L1 over the valid pixels of `sup`.
pub fn smooth_l1<T: Real>(g: &mut Graph<T>, pred: Var, sup: &Supervision<T>) -> Result<Var> {
    let n = check(g.shape(pred), sup)?;
    let v = smooth_l1_values(g.value(pred), sup)?;
    let op = SmoothL1Op { gt: sup.gt.clone(), mask: sup.mask.clone(), n };
    Ok(g.record(Tensor::scalar(v), &[pred], op))
}

#[derive(Clone, Copy, Debug)]
pub struct StageLosses {
    pub total: Var,
    /// `d_f`, `d_cg`, `d_dr` in that order.
    pub stages: [Var; 3],
}

/// `w1·L(d_f) + w2·L(d_cg) + w3·L(d_dr)`, all maps at full resolution.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    d_f: Var,
    d_cg: Var,
    d_dr: Var,
    sup: &Supervision<T>,
    w: LossWeights,
) -> Result<StageLosses> {
    w.validate()?;
    let stages = [smooth_l1(g, d_f, sup)?, smooth_l1(g, d_cg, sup)?, smooth_l1(g, d_dr, sup)?];
    let terms: Vec<Var> = stages.iter().zip([w.w1, w.w2, w.w3]).map(|(&s, wk)| ops::scale(g, s, T::of(wk))).collect();
    let partial = ops::add(g, terms[0], terms[1])?;
    let total = ops::add(g, partial, terms[2])?;
    Ok(StageLosses { total, stages })
}
