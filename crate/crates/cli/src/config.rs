//! Run configuration: flat `key=value` text with dotted keys.

use std::path::{Path, PathBuf};

use rresm_core::kv::KeyValues;
use rresm_core::loss::LossWeights;
use rresm_core::ModelConfig;
use rresm_numerics::AdamConfig;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means `epochs × samples`.
    pub max_steps: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Stop once the training-set EPE drops below this (0 disables).
    pub stop_epe: f64,
    /// Steps between EPE evaluations when `stop_epe` is set.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 100,
            max_steps: 0,
            crop_height: 256,
            crop_width: 512,
            seed: 0,
            weights: LossWeights::default(),
            stop_epe: 0.0,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

const TRAIN_KEYS: &[&str] = &[
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.epochs",
    "train.max_steps",
    "train.crop_height",
    "train.crop_width",
    "train.seed",
    "train.stop_epe",
    "train.eval_every",
    "loss.w1",
    "loss.w2",
    "loss.w3",
    "paths.checkpoint",
    "paths.manifest",
    "paths.out",
];

impl RunConfig {
    pub fn known_keys() -> Vec<&'static str> {
        ModelConfig::KEYS.iter().chain(TRAIN_KEYS).copied().collect()
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let kv = KeyValues::parse(text)?;
        kv.reject_unknown(&Self::known_keys())?;
        let mut cfg = Self::default();
        cfg.model.apply(&kv)?;
        let t = &mut cfg.train;
        kv.read("train.lr", &mut t.lr)?;
        kv.read("train.beta1", &mut t.beta1)?;
        kv.read("train.beta2", &mut t.beta2)?;
        kv.read("train.epochs", &mut t.epochs)?;
        kv.read("train.max_steps", &mut t.max_steps)?;
        kv.read("train.crop_height", &mut t.crop_height)?;
        kv.read("train.crop_width", &mut t.crop_width)?;
        kv.read("train.seed", &mut t.seed)?;
        kv.read("train.stop_epe", &mut t.stop_epe)?;
        kv.read("train.eval_every", &mut t.eval_every)?;
        kv.read("loss.w1", &mut t.weights.w1)?;
        kv.read("loss.w2", &mut t.weights.w2)?;
        kv.read("loss.w3", &mut t.weights.w3)?;
        let path = |k: &str| kv.get(k).map(PathBuf::from);
        cfg.checkpoint = path("paths.checkpoint");
        cfg.manifest = path("paths.manifest");
        cfg.out_dir = path("paths.out");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.weights.validate()?;
        let t = &self.train;
        let bad = |m: String| Err(CliError::Usage(m));
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad(format!("betas must lie in [0, 1), got ({}, {})", t.beta1, t.beta2));
        }
        if t.crop_height % 16 != 0 || t.crop_width % 16 != 0 || t.crop_height == 0 || t.crop_width == 0 {
            return bad(format!("crop {}×{} must be positive multiples of 16", t.crop_height, t.crop_width));
        }
        if t.eval_every == 0 {
            return bad("train.eval_every must be positive".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut kv = self.model.to_kv();
        let t = &self.train;
        kv.insert("train.lr", t.lr);
        kv.insert("train.beta1", t.beta1);
        kv.insert("train.beta2", t.beta2);
        kv.insert("train.epochs", t.epochs);
        kv.insert("train.max_steps", t.max_steps);
        kv.insert("train.crop_height", t.crop_height);
        kv.insert("train.crop_width", t.crop_width);
        kv.insert("train.seed", t.seed);
        kv.insert("train.stop_epe", t.stop_epe);
        kv.insert("train.eval_every", t.eval_every);
        kv.insert("loss.w1", t.weights.w1);
        kv.insert("loss.w2", t.weights.w2);
        kv.insert("loss.w3", t.weights.w3);
        for (k, p) in [("paths.checkpoint", &self.checkpoint), ("paths.manifest", &self.manifest), ("paths.out", &self.out_dir)] {
            if let Some(p) = p {
                kv.insert(k, p.display());
            }
        }
        kv.to_text()
    }
}

/// Model configuration stored next to a checkpoint (`<checkpoint>.cfg`).
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

pub fn write_model_sidecar(checkpoint: &Path, model: &ModelConfig) -> CliResult<()> {
    rresm_numerics::checkpoint::write_atomic(&sidecar_path(checkpoint), model.to_kv().to_text().as_bytes())?;
    Ok(())
}

pub fn read_model_sidecar(checkpoint: &Path) -> CliResult<Option<ModelConfig>> {
    let p = sidecar_path(checkpoint);
    if !p.exists() {
        return Ok(None);
    }
    let kv = KeyValues::parse(&std::fs::read_to_string(&p)?)?;
    kv.reject_unknown(ModelConfig::KEYS)?;
    let mut m = ModelConfig::default();
    m.apply(&kv)?;
    Ok(Some(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_protocol() {
        let c = RunConfig::default();
        assert_eq!(c.model.groups, 16);
        assert_eq!(c.model.max_disparity, 192);
        assert_eq!((c.train.lr, c.train.beta1, c.train.beta2), (1e-4, 0.9, 0.999));
        assert_eq!((c.train.crop_height, c.train.crop_width), (256, 512));
    }

    #[test]
    fn round_trip_and_rejection() {
        let c = RunConfig::parse("mca.pooling = max\ntrain.lr=0.001\nhfdo.context=conv3\n").unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert!(matches!(RunConfig::parse("train.lrr=1"), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::parse("hfdo.omega=2"), Err(CliError::Usage(_))));
        assert!(RunConfig::parse("train.crop_width=500").is_err());
    }
}
