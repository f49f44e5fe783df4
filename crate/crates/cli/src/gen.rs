use std::path::{Path, PathBuf};

use rresm_core::dataset::{self, ManifestEntry};
use rresm_numerics::Tensor;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct RdsOptions {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Disparities of the left and right image halves, in pixels.
    pub d_left: u32,
    pub d_right: u32,
    pub max_disparity: usize,
    pub seed: u64,
}

impl Default for RdsOptions {
    fn default() -> Self {
        Self { count: 8, height: 256, width: 512, d_left: 8, d_right: 16, max_disparity: 192, seed: 0 }
    }
}

/// Writes `count` two-plane stereograms as PNG pairs with PFM ground truth
/// plus `manifest.txt`. Occluded pixels get ground truth 0, which the
/// supervision and evaluation masks exclude.
pub fn run(out_dir: &Path, o: &RdsOptions) -> CliResult<PathBuf> {
    if o.count == 0 {
        return Err(CliError::Usage("gen-rds needs a positive sample count".into()));
    }
    crate::ensure_dir(out_dir)?;
    let pattern = dataset::two_plane_pattern(o.height, o.width, o.d_left, o.d_right);
    let mut entries = Vec::with_capacity(o.count);
    for i in 0..o.count {
        let s = dataset::gen_rds(o.height, o.width, &pattern, o.max_disparity, o.seed.wrapping_add(i as u64))?;
        let gt = s.gt_disparity.as_ref().expect("stereograms carry ground truth");
        let valid = s.valid.as_ref().expect("stereograms carry a validity mask");
        let gt = Tensor::from_fn(gt.shape(), |k| if valid[k] { gt.data()[k] } else { 0.0 });
        let names = [format!("left_{i:03}.png"), format!("right_{i:03}.png"), format!("disp_{i:03}.pfm")];
        dataset::write_image(&out_dir.join(&names[0]), &s.left)?;
        dataset::write_image(&out_dir.join(&names[1]), &s.right)?;
        dataset::write_pfm(&out_dir.join(&names[2]), &gt)?;
        let [l, r, g] = names.map(PathBuf::from);
        entries.push(ManifestEntry { left: l, right: r, gt: Some(g), calib: None });
    }
    let manifest = out_dir.join("manifest.txt");
    dataset::write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
