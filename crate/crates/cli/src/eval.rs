use std::path::{Path, PathBuf};

use rresm_core::dataset;
use rresm_core::metrics::EvalReport;
use rresm_core::ModelConfig;
use rresm_numerics::checkpoint::write_atomic;

use crate::error::{CliError, CliResult};
use crate::infer::{eval_mask, predict, sample_name};

/// Per-sample reports followed by the pixel-weighted aggregate.
pub fn run(
    manifest: &Path,
    checkpoint: Option<&Path>,
    model: Option<&ModelConfig>,
    out_dir: Option<&Path>,
) -> CliResult<(Vec<EvalReport>, EvalReport, Option<PathBuf>)> {
    let net = crate::load_model(checkpoint, model)?;
    let entries = dataset::read_manifest(manifest)?;
    let mut reports = Vec::new();
    for e in &entries {
        if e.gt.is_none() {
            return Err(CliError::Data(format!("{} has no ground truth", e.left.display())));
        }
        let s = dataset::load_sample(e)?;
        let gt = s.gt_disparity.as_ref().expect("checked above");
        let d = predict(&net, &s.left, &s.right)?;
        let mask = eval_mask(gt, net.config.max_disparity);
        reports.push(EvalReport::evaluate(sample_name(&e.left), &d, gt, &mask, s.calib.as_ref())?);
    }
    let agg = EvalReport::aggregate(&reports)
        .ok_or_else(|| CliError::Data(format!("manifest {} has no evaluable pixels", manifest.display())))?;
    let written = match out_dir {
        Some(dir) => {
            crate::ensure_dir(dir)?;
            let text: String = reports.iter().chain([&agg]).map(|r| r.to_json_line() + "\n").collect();
            let p = dir.join("eval.jsonl");
            write_atomic(&p, text.as_bytes())?;
            Some(p)
        }
        None => None,
    };
    Ok((reports, agg, written))
}
