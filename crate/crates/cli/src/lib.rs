//! Command implementations behind the `rresm` binary.

pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod gen;
pub mod infer;
pub mod train;

use std::path::Path;

use rresm_core::{ModelConfig, StereoNet};
use rresm_numerics::checkpoint;

pub use config::{RunConfig, TrainConfig};
pub use error::{CliError, CliResult};

/// Builds the network and, when given, loads checkpoint weights into it.
///
/// The model configuration comes from `explicit` if set, else from the
/// checkpoint's sidecar file, else the defaults.
pub fn load_model(checkpoint: Option<&Path>, explicit: Option<&ModelConfig>) -> CliResult<StereoNet<f32>> {
    let config = match (explicit, checkpoint) {
        (Some(c), _) => c.clone(),
        (None, Some(ck)) => config::read_model_sidecar(ck)?.unwrap_or_default(),
        (None, None) => ModelConfig::default(),
    };
    let mut net = StereoNet::<f32>::new(config)?;
    if let Some(ck) = checkpoint {
        if !ck.exists() {
            return Err(CliError::Data(format!("checkpoint {} does not exist", ck.display())));
        }
        checkpoint::load_into(&mut net.params, ck)?;
    }
    Ok(net)
}

pub fn save_model(net: &StereoNet<f32>, path: &Path) -> CliResult<()> {
    checkpoint::save(&net.params, path)?;
    config::write_model_sidecar(path, &net.config)?;
    Ok(())
}

pub(crate) fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}
