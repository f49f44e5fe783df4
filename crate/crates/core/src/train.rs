//! Supervised training steps over stereo samples.

use rresm_numerics::{Adam, Graph, Tensor};

use crate::dataset::StereoSample;
use crate::loss::{self, LossWeights, Supervision};
use crate::{Error, Result, StereoNet};

/// A sample ready for the network: images plus masked supervision.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub name: String,
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub sup: Supervision<f32>,
}

impl TrainSample {
    pub fn from_stereo(name: impl Into<String>, s: &StereoSample, max_disparity: usize) -> Result<Self> {
        let name = name.into();
        let gt = s
            .gt_disparity
            .clone()
            .ok_or_else(|| Error::Format(format!("sample {name} has no ground-truth disparity")))?;
        let sup = match &s.valid {
            Some(v) => Supervision::with_mask(gt, max_disparity as f64, v)?,
            None => Supervision::new(gt, max_disparity as f64),
        };
        Ok(Self { name, left: s.left.clone(), right: s.right.clone(), sup })
    }
}

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub d_f: f64,
    pub d_cg: f64,
    pub d_dr: f64,
}

/// Forward, backward and one optimizer update. Returns the losses before the update.
pub fn train_step(net: &mut StereoNet<f32>, opt: &mut Adam<f32>, s: &TrainSample, w: LossWeights) -> Result<StepLosses> {
    let mut g = Graph::new();
    let out = net.forward(&mut g, &s.left, &s.right)?;
    let l = loss::total_loss(&mut g, out.d_f, out.d_cg, out.d_dr, &s.sup, w)?;
    let value = |v| -> Result<f64> { Ok(g.value(v).item()? as f64) };
    let losses = StepLosses {
        total: value(l.total)?,
        d_f: value(l.stages[0])?,
        d_cg: value(l.stages[1])?,
        d_dr: value(l.stages[2])?,
    };
    net.params.zero_grad();
    g.backward(l.total, &mut net.params)?;
    drop(g);
    opt.step(&mut net.params);
    Ok(losses)
}

/// Mean of the weighted total loss over `samples`, without updating anything.
pub fn mean_loss(net: &StereoNet<f32>, samples: &[TrainSample], w: LossWeights) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyMask("no samples to score".into()));
    }
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::inference();
        let out = net.forward(&mut g, &s.left, &s.right)?;
        let l = loss::total_loss(&mut g, out.d_f, out.d_cg, out.d_dr, &s.sup, w)?;
        total += g.value(l.total).item()? as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Mean absolute error of `d_dr` over the supervised pixels of all samples.
pub fn mean_epe(net: &StereoNet<f32>, samples: &[TrainSample]) -> Result<f64> {
    let (mut total, mut n) = (0.0f64, 0usize);
    for s in samples {
        let d = net.infer(&s.left, &s.right)?;
        for ((&p, &g), &m) in d.data().iter().zip(s.sup.gt.data()).zip(&s.sup.mask) {
            if m {
                total += (p - g).abs() as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("no supervised pixel in the sample set".into()));
    }
    Ok(total / n as f64)
}
