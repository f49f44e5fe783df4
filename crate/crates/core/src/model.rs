//! The full stereo network: features, cost volume, aggregation, refinement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rresm_numerics::{Graph, ParamStore, Real, Tensor, Var};

use crate::aggregation::{self, Aggregation, InitialHead};
use crate::cost_volume;
use crate::feature_net::{self, FeatureNet};
use crate::hfdo::{Hfdo, HfdoConfig};
use crate::kv::KeyValues;
use crate::mca::McaConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Matching feature channels `C`.
    pub channels: usize,
    /// Correlation groups `g_n`.
    pub groups: usize,
    /// Full-resolution disparity range; the volume has `max_disparity / 4` bins.
    pub max_disparity: usize,
    pub mca: McaConfig,
    pub hfdo: HfdoConfig,
    /// Seed of the weight initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            groups: 16,
            max_disparity: 192,
            mca: McaConfig::default(),
            hfdo: HfdoConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "model.channels",
        "model.groups",
        "model.max_disparity",
        "model.init_seed",
        "mca.pooling",
        "mca.state_dim",
        "mca.head_dim",
        "mca.enabled",
        "hfdo.omega",
        "hfdo.context",
        "hfdo.context_channels",
        "hfdo.prelu_slope",
    ];

    /// Overrides fields from `kv`; keys outside [`Self::KEYS`] are ignored here.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read("model.channels", &mut self.channels)?;
        kv.read("model.groups", &mut self.groups)?;
        kv.read("model.max_disparity", &mut self.max_disparity)?;
        kv.read("model.init_seed", &mut self.init_seed)?;
        kv.read("mca.pooling", &mut self.mca.pooling)?;
        kv.read("mca.state_dim", &mut self.mca.state_dim)?;
        kv.read("mca.head_dim", &mut self.mca.head_dim)?;
        kv.read("mca.enabled", &mut self.mca.enabled)?;
        kv.read("hfdo.omega", &mut self.hfdo.omega)?;
        kv.read("hfdo.context", &mut self.hfdo.context)?;
        kv.read("hfdo.context_channels", &mut self.hfdo.context_channels)?;
        kv.read("hfdo.prelu_slope", &mut self.hfdo.prelu_slope)?;
        self.validate()
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("model.channels", self.channels);
        kv.insert("model.groups", self.groups);
        kv.insert("model.max_disparity", self.max_disparity);
        kv.insert("model.init_seed", self.init_seed);
        kv.insert("mca.pooling", self.mca.pooling);
        kv.insert("mca.state_dim", self.mca.state_dim);
        kv.insert("mca.head_dim", self.mca.head_dim);
        kv.insert("mca.enabled", self.mca.enabled);
        kv.insert("hfdo.omega", self.hfdo.omega);
        kv.insert("hfdo.context", self.hfdo.context);
        kv.insert("hfdo.context_channels", self.hfdo.context_channels);
        kv.insert("hfdo.prelu_slope", self.hfdo.prelu_slope);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.channels % self.groups != 0 {
            return Err(Error::Config(format!(
                "feature channels {} must be a positive multiple of groups {}",
                self.channels, self.groups
            )));
        }
        if self.max_disparity == 0 || self.max_disparity % 16 != 0 {
            return Err(Error::Config(format!(
                "max_disparity {} must be a positive multiple of 16",
                self.max_disparity
            )));
        }
        self.hfdo.validate()
    }

    /// Disparity bins of the quarter-resolution cost volume.
    pub fn disparity_bins(&self) -> usize {
        self.max_disparity / 4
    }
}

/// Graph handles of one forward pass. Full-resolution maps are in pixels;
/// quarter-resolution maps are in quarter-resolution bins.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub f_l: Var,
    pub f_r: Var,
    pub cost_volume: Var,
    pub d_f_quarter: Var,
    pub d_cg_quarter: Var,
    pub d_f: Var,
    pub d_cg: Var,
    pub d_dr: Var,
}

#[derive(Clone, Debug)]
pub struct StereoNet<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub features: FeatureNet,
    pub initial: InitialHead,
    pub aggregation: Aggregation,
    pub hfdo: Hfdo,
}

impl<T: Real> StereoNet<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let features = FeatureNet::new(&mut params, &mut rng, config.channels)?;
        let initial = InitialHead::new(&mut params, &mut rng, config.groups);
        let aggregation = Aggregation::new(&mut params, &mut rng, config.groups, config.mca.clone())?;
        let hfdo = Hfdo::new(&mut params, &mut rng, config.channels, config.hfdo.clone())?;
        Ok(Self { config, params, features, initial, aggregation, hfdo })
    }

    /// Switches the attention re-weighting without touching the weights.
    pub fn set_mca_enabled(&mut self, enabled: bool) {
        self.config.mca.enabled = enabled;
        self.aggregation.mca.config.enabled = enabled;
    }

    pub fn forward(&self, g: &mut Graph<T>, left: &Tensor<T>, right: &Tensor<T>) -> Result<Outputs> {
        if left.shape() != right.shape() {
            return Err(Error::Shape(format!("left {:?} vs right {:?}", left.shape(), right.shape())));
        }
        let store = &self.params;
        let (l, r) = (g.constant(left.clone()), g.constant(right.clone()));
        let (_, f_l) = self.features.forward(g, store, l)?;
        let (_, f_r) = self.features.forward(g, store, r)?;
        let cv = cost_volume::build_gwc(g, f_l, f_r, self.config.groups, self.config.disparity_bins())?;
        let d_f_quarter = self.initial.forward(g, store, cv)?;
        let scores = self.aggregation.forward(g, store, cv)?;
        let d_cg_quarter = aggregation::soft_argmax(g, scores)?;
        let d_f = aggregation::upsample_disparity(g, d_f_quarter)?;
        let d_cg = aggregation::upsample_disparity(g, d_cg_quarter)?;
        let ctx = feature_net::context_feature(f_l);
        let d_dr = self.hfdo.forward(g, store, ctx, d_cg)?;
        Ok(Outputs { f_l, f_r, cost_volume: cv, d_f_quarter, d_cg_quarter, d_f, d_cg, d_dr })
    }

    /// Refined full-resolution disparity.
    pub fn infer(&self, left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, left, right)?;
        Ok(g.value(out.d_dr).clone())
    }
}
