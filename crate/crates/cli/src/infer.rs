use std::path::{Path, PathBuf};

use rresm_core::dataset::{self, Calibration};
use rresm_core::metrics::{self, EvalReport};
use rresm_core::{ModelConfig, StereoNet};
use rresm_numerics::checkpoint::write_atomic;
use rresm_numerics::Tensor;

use crate::error::{CliError, CliResult};

/// Errors at or above this many pixels render at full intensity.
pub const ERROR_MAP_SCALE_PX: f64 = 8.0;

#[derive(Clone, Debug, Default)]
pub struct InferOptions {
    pub left: PathBuf,
    pub right: PathBuf,
    pub gt: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub disparity: Tensor<f32>,
    pub report: Option<EvalReport>,
    pub written: Vec<PathBuf>,
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
    }
    i as usize
}

/// Symmetric (edge-repeating mirror) padding of a `C×H×W` image.
pub fn pad_symmetric(img: &Tensor<f32>, top: usize, bottom: usize, left: usize, right: usize) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (ph, pw) = (h + top + bottom, w + left + right);
    Tensor::from_fn(&[c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        let sy = mirror(y as isize - top as isize, h);
        let sx = mirror(x as isize - left as isize, w);
        img.data()[(ch * h + sy) * w + sx]
    })
}

fn split_pad(n: usize) -> (usize, usize) {
    let total = n.next_multiple_of(16) - n;
    (total / 2, total - total / 2)
}

/// Refined disparity for images of any size: pads to a multiple of 16 when
/// needed and crops the prediction back.
pub fn predict(net: &StereoNet<f32>, left: &Tensor<f32>, right: &Tensor<f32>) -> CliResult<Tensor<f32>> {
    if left.shape() != right.shape() {
        return Err(CliError::Data(format!("left {:?} and right {:?} differ in size", left.shape(), right.shape())));
    }
    let (h, w) = (left.shape()[1], left.shape()[2]);
    if h % 16 == 0 && w % 16 == 0 {
        return Ok(net.infer(left, right)?);
    }
    let ((t, b), (l, r)) = (split_pad(h), split_pad(w));
    let d = net.infer(&pad_symmetric(left, t, b, l, r), &pad_symmetric(right, t, b, l, r))?;
    let pw = w + l + r;
    Ok(Tensor::from_fn(&[h, w], |i| d.data()[(i / w + t) * pw + i % w + l]))
}

/// Pixels with usable ground truth: finite and inside `(0, max_disparity)`.
pub fn eval_mask(gt: &Tensor<f32>, max_disparity: usize) -> Vec<bool> {
    gt.data().iter().map(|&g| g.is_finite() && g > 0.0 && (g as f64) < max_disparity as f64).collect()
}

pub fn run(opts: &InferOptions) -> CliResult<InferOutput> {
    let net = crate::load_model(opts.checkpoint.as_deref(), opts.model.as_ref())?;
    let left = dataset::read_image(&opts.left)?;
    let right = dataset::read_image(&opts.right)?;
    let calib = opts.calib.as_deref().map(Calibration::read).transpose()?;
    let d = predict(&net, &left, &right)?;
    crate::ensure_dir(&opts.out_dir)?;
    let mut written = Vec::new();
    let out = |name: &str| opts.out_dir.join(name);
    dataset::write_pfm(&out("disparity.pfm"), &d)?;
    written.push(out("disparity.pfm"));
    if let Some(c) = &calib {
        let (z, _) = dataset::disparity_to_depth(&d, c);
        dataset::write_pfm(&out("depth.pfm"), &z)?;
        written.push(out("depth.pfm"));
    }
    let report = match &opts.gt {
        Some(gt_path) => {
            let gt = dataset::read_pfm(gt_path)?;
            if gt.shape() != d.shape() {
                return Err(CliError::Data(format!("ground truth {:?} does not match prediction {:?}", gt.shape(), d.shape())));
            }
            let mask = eval_mask(&gt, net.config.max_disparity);
            let name = sample_name(&opts.left);
            let report = EvalReport::evaluate(name, &d, &gt, &mask, calib.as_ref())?;
            let map = metrics::render_error_map(&d, &gt, &mask, ERROR_MAP_SCALE_PX)?;
            dataset::write_gray_png(&out("error_map.png"), &map)?;
            write_atomic(&out("report.jsonl"), format!("{}\n", report.to_json_line()).as_bytes())?;
            written.push(out("error_map.png"));
            written.push(out("report.jsonl"));
            Some(report)
        }
        None => None,
    };
    Ok(InferOutput { disparity: d, report, written })
}

pub(crate) fn sample_name(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_padding_mirrors_edges() {
        let img = Tensor::new(&[1, 1, 3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let p = pad_symmetric(&img, 0, 0, 2, 2);
        assert_eq!(p.data(), &[2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 2.0]);
        assert_eq!(split_pad(30), (1, 1));
        assert_eq!(split_pad(33), (7, 8));
        assert_eq!(split_pad(32), (0, 0));
    }

    #[test]
    fn odd_sizes_are_padded_and_cropped() {
        let mut cfg = ModelConfig { max_disparity: 32, ..ModelConfig::default() };
        cfg.init_seed = 3;
        let net = StereoNet::<f32>::new(cfg).unwrap();
        let l = Tensor::<f32>::uniform(&[3, 20, 40], 0.0, 1.0, 1);
        let r = Tensor::<f32>::uniform(&[3, 20, 40], 0.0, 1.0, 2);
        let d = predict(&net, &l, &r).unwrap();
        assert_eq!(d.shape(), &[20, 40]);
        assert!(d.min_value() >= 0.0);
    }
}
