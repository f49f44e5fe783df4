//! Group-wise correlation cost volume.
//!
//! `CV[g, d, y, x] = (1 / s) · Σ_{c ∈ group g} F_l[c, y, x] · F_r[c, y, x − d]`
//! with group size `s = C / g_n`, and zero where `x − d < 0`.

use rayon::prelude::*;
use rresm_numerics::{Backward, BackwardCtx, Graph, Real, Tensor, Var};

use crate::{Error, Result};

/// Matching costs at quarter resolution, `g_n × D × H4 × W4`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<T> {
    pub values: Tensor<T>,
}

impl<T: Real> CostVolume<T> {
    pub fn groups(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn disparities(&self) -> usize {
        self.values.shape()[1]
    }
}

fn check(fl: &[usize], fr: &[usize], groups: usize, disparities: usize) -> Result<(usize, usize, usize)> {
    let &[c, h, w] = fl else {
        return Err(Error::Shape(format!("features must be C×H×W, got {fl:?}")));
    };
    if fl != fr {
        return Err(Error::Shape(format!("left features {fl:?} vs right {fr:?}")));
    }
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!("{c} feature channels are not divisible into {groups} groups")));
    }
    if disparities == 0 || disparities > w {
        return Err(Error::Contract(format!(
            "disparity range {disparities} must lie in 1..={w} (feature width)"
        )));
    }
    Ok((c, h, w))
}

/// Forward kernel. For each output element the channel products are summed in
/// increasing channel order and the sum is then divided by the group size.
pub fn build_gwc_values<T: Real>(fl: &Tensor<T>, fr: &Tensor<T>, groups: usize, disparities: usize) -> Result<CostVolume<T>> {
    let (c, h, w) = check(fl.shape(), fr.shape(), groups, disparities)?;
    let gs = c / groups;
    let norm = T::of(gs as f64);
    let (l, r) = (fl.data(), fr.data());
    let mut out = vec![T::zero(); groups * disparities * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(gd, plane)| {
        let (gi, d) = (gd / disparities, gd % disparities);
        for y in 0..h {
            let row = &mut plane[y * w..(y + 1) * w];
            for ch in gi * gs..(gi + 1) * gs {
                let lrow = &l[(ch * h + y) * w..(ch * h + y + 1) * w];
                let rrow = &r[(ch * h + y) * w..(ch * h + y + 1) * w];
                for x in d..w {
                    row[x] += lrow[x] * rrow[x - d];
                }
            }
            for v in &mut row[d..] {
                *v /= norm;
            }
        }
    });
    Ok(CostVolume { values: Tensor::new(&[groups, disparities, h, w], out)? })
}

struct GwcOp {
    groups: usize,
    disparities: usize,
}

impl<T: Real> Backward<T> for GwcOp {
    fn name(&self) -> &'static str {
        "gwc"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> rresm_numerics::Result<Vec<Option<Tensor<T>>>> {
        let (fl, fr) = (ctx.inputs[0], ctx.inputs[1]);
        let [c, h, w] = [fl.shape()[0], fl.shape()[1], fl.shape()[2]];
        let (groups, dn) = (self.groups, self.disparities);
        let gs = c / groups;
        let inv = T::one() / T::of(gs as f64);
        let gcv = ctx.grad.data();
        let (l, r) = (fl.data(), fr.data());
        let mut gl = vec![T::zero(); c * h * w];
        let mut gr = vec![T::zero(); c * h * w];
        gl.par_chunks_mut(h * w).zip(gr.par_chunks_mut(h * w)).enumerate().for_each(|(ch, (gl, gr))| {
            let gi = ch / gs;
            for d in 0..dn {
                for y in 0..h {
                    let grow = &gcv[((gi * dn + d) * h + y) * w..((gi * dn + d) * h + y + 1) * w];
                    let base = (ch * h + y) * w;
                    for x in d..w {
                        let gv = grow[x] * inv;
                        gl[y * w + x] += gv * r[base + x - d];
                        gr[y * w + x - d] += gv * l[base + x];
                    }
                }
            }
        });
        let gl = ctx.needs_grad[0].then(|| Tensor::new(fl.shape(), gl)).transpose()?;
        let gr = ctx.needs_grad[1].then(|| Tensor::new(fr.shape(), gr)).transpose()?;
        Ok(vec![gl, gr])
    }
}

/// Records the cost volume of `fl`, `fr` on the graph.
pub fn build_gwc<T: Real>(g: &mut Graph<T>, fl: Var, fr: Var, groups: usize, disparities: usize) -> Result<Var> {
    let cv = build_gwc_values(g.value(fl), g.value(fr), groups, disparities)?;
    let [c, h, w] = [g.shape(fl)[0], g.shape(fl)[1], g.shape(fl)[2]];
    g.add_flops(2 * (c * disparities * h * w) as u64);
    Ok(g.record(cv.values, &[fl, fr], GwcOp { groups, disparities }))
}
