//! Siamese encoder-decoder producing quarter-resolution matching features.
//!
//! Encoder: a stride-2 stem, then three stride-2 stages (16, 24, 32
//! channels at 1/4, 1/8, 1/16), each a 3×3 conv + PReLU pair. Decoder:
//! nearest 2× upsample, concatenation with the finer scale, 3×3 conv.

use rand::Rng;
use rresm_numerics::{ops, Graph, ParamStore, Real, Var};

use crate::layers::{Conv, ConvPrelu, Init};
use crate::{Error, Result};

/// Pixels enter the stem as `(x - 0.5) * INPUT_GAIN`, roughly unit range.
pub const INPUT_GAIN: f64 = 4.0;

pub const STAGE_CHANNELS: [usize; 3] = [16, 24, 32];

#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub s4: Var,
    pub s8: Var,
    pub s16: Var,
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvPrelu,
    conv: ConvPrelu,
}

impl Stage {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            down: ConvPrelu::new2d(store, rng, &format!("{name}.down"), c_in, c_out, 2),
            conv: ConvPrelu::new2d(store, rng, &format!("{name}.conv"), c_out, c_out, 1),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.down.forward(g, store, x)?;
        self.conv.forward(g, store, y)
    }
}

#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub channels: usize,
    stem: ConvPrelu,
    stages: [Stage; 3],
    fuse8: ConvPrelu,
    fuse4: Conv,
}

impl FeatureNet {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("feature channels must be positive".into()));
        }
        let [c4, c8, c16] = STAGE_CHANNELS;
        Ok(Self {
            channels,
            stem: ConvPrelu::new2d(store, rng, "feat.stem", 3, 16, 2),
            stages: [
                Stage::new(store, rng, "feat.s4", 16, c4),
                Stage::new(store, rng, "feat.s8", c4, c8),
                Stage::new(store, rng, "feat.s16", c8, c16),
            ],
            fuse8: ConvPrelu::new2d(store, rng, "feat.fuse8", c16 + c8, c8, 1),
            fuse4: Conv::new2d(store, rng, "feat.fuse4", c8 + c4, channels, 3, 1, true, Init::Linear),
        })
    }

    /// Image `3×H×W` in `[0, 1]` to the three encoder scales.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<FeaturePyramid> {
        let s = g.shape(image).to_vec();
        match *s.as_slice() {
            [3, h, w] if h % 16 == 0 && w % 16 == 0 => {}
            [3, h, w] => {
                return Err(Error::Shape(format!("image {h}×{w}: height and width must be divisible by 16")))
            }
            _ => return Err(Error::Shape(format!("image must be 3×H×W, got {s:?}"))),
        }
        let centred = ops::add_scalar(g, image, T::of(-0.5));
        let centred = ops::scale(g, centred, T::of(INPUT_GAIN));
        let x = self.stem.forward(g, store, centred)?;
        let s4 = self.stages[0].forward(g, store, x)?;
        let s8 = self.stages[1].forward(g, store, s4)?;
        let s16 = self.stages[2].forward(g, store, s8)?;
        Ok(FeaturePyramid { s4, s8, s16 })
    }

    /// Fuses the pyramid into the `C×H/4×W/4` matching feature.
    pub fn decode_fuse<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, p: &FeaturePyramid) -> Result<Var> {
        let up = ops::upsample_nearest(g, p.s16, [1, 2, 2])?;
        let m = ops::concat(g, &[up, p.s8], 0)?;
        let f8 = self.fuse8.forward(g, store, m)?;
        let up = ops::upsample_nearest(g, f8, [1, 2, 2])?;
        let m = ops::concat(g, &[up, p.s4], 0)?;
        self.fuse4.forward(g, store, m)
    }

    /// Encode and fuse; returns the pyramid as well as the matching feature.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<(FeaturePyramid, Var)> {
        let p = self.encode(g, store, image)?;
        let f = self.decode_fuse(g, store, &p)?;
        Ok((p, f))
    }
}

/// The context input of the refinement stage is the left matching feature itself.
pub fn context_feature(f_l: Var) -> Var {
    f_l
}
