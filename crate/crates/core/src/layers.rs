//! Parameterized building blocks shared by the network stages.

use rand::Rng;
use rresm_numerics::conv::{self, ConvOpts};
use rresm_numerics::{ops, Graph, ParamId, ParamStore, Real, Tensor, Var};

use crate::Result;

/// Initialization of a convolution kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal for layers followed by PReLU with slope 0.25.
    Prelu,
    /// Unit-gain normal for linear outputs.
    Linear,
    /// Normal with a fixed standard deviation.
    Std(f64),
    Zero,
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        let fan = fan_in as f64;
        match self {
            Init::Prelu => (2.0 / (1.0 + 0.25f64 * 0.25) / fan).sqrt(),
            Init::Linear => (1.0 / fan).sqrt(),
            Init::Std(s) => s,
            Init::Zero => 0.0,
        }
    }
}

/// A 2-D or 3-D convolution with an optional per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: ConvOpts,
    volumetric: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        kernel: Vec<usize>,
        opts: ConvOpts,
        bias: bool,
        init: Init,
    ) -> Self {
        let fan_in: usize = kernel[1..].iter().product();
        let std = init.std(fan_in);
        let w = if std == 0.0 { Tensor::zeros(&kernel) } else { Tensor::randn_with(&kernel, std, rng) };
        let volumetric = kernel.len() == 5;
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[kernel[0]])));
        Self { weight, bias, opts, volumetric }
    }

    /// `k×k` 2-D convolution with padding `k / 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new2d<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        Self::build(store, rng, name, vec![c_out, c_in, k, k], ConvOpts::new(stride, k / 2), bias, init)
    }

    /// `k×k×k` 3-D convolution with padding `k / 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new3d<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        Self::build(store, rng, name, vec![c_out, c_in, k, k, k], ConvOpts::new(stride, k / 2), bias, init)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        let y = if self.volumetric {
            conv::conv3d(g, x, w, b, self.opts)?
        } else {
            conv::conv2d(g, x, w, b, self.opts)?
        };
        Ok(y)
    }
}

/// PReLU with one learned slope, initialized to 0.25.
#[derive(Clone, Copy, Debug)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str) -> Self {
        Self { slope: store.add(format!("{name}.slope"), Tensor::scalar(T::of(0.25))) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = g.param(store, self.slope);
        Ok(ops::prelu(g, x, a)?)
    }
}

/// Convolution followed by PReLU.
#[derive(Clone, Debug)]
pub struct ConvPrelu {
    pub conv: Conv,
    pub act: Prelu,
}

impl ConvPrelu {
    pub fn new2d<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let conv = Conv::new2d(store, rng, name, c_in, c_out, 3, stride, true, Init::Prelu);
        Self { conv, act: Prelu::new(store, name) }
    }

    pub fn new3d<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        let conv = Conv::new3d(store, rng, name, c_in, c_out, 3, stride, true, Init::Prelu);
        Self { conv, act: Prelu::new(store, name) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        self.act.forward(g, store, y)
    }
}
