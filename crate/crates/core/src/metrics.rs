//! Disparity/depth error metrics and error-map rendering.

use image::GrayImage;
use rresm_numerics::Tensor;
use serde::Serialize;

use crate::dataset::{disparity_to_depth, Calibration};
use crate::{Error, Result};

fn check(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<usize> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::Shape(format!(
            "prediction ({}), ground truth ({}) and mask ({}) sizes differ",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    match mask.iter().filter(|&&m| m).count() {
        0 => Err(Error::Contract("metric over an empty mask".into())),
        n => Ok(n),
    }
}

fn errors<'a>(pred: &'a [f32], gt: &'a [f32], mask: &'a [bool]) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &g), _)| (((p as f64) - (g as f64)).abs(), g as f64))
}

/// Mean absolute error over the mask.
pub fn mae(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<f64> {
    let n = check(pred, gt, mask)?;
    Ok(errors(pred, gt, mask).map(|(e, _)| e).sum::<f64>() / n as f64)
}

/// Percentage of valid pixels with error strictly above `n`.
pub fn bad_n(pred: &[f32], gt: &[f32], mask: &[bool], n: f64) -> Result<f64> {
    if n <= 0.0 {
        return Err(Error::Contract(format!("bad-n threshold must be positive, got {n}")));
    }
    let total = check(pred, gt, mask)?;
    let bad = errors(pred, gt, mask).filter(|&(e, _)| e > n).count();
    Ok(100.0 * bad as f64 / total as f64)
}

/// Percentage of valid pixels whose error exceeds both 3 px and 5% of the ground truth.
pub fn d1(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<f64> {
    let total = check(pred, gt, mask)?;
    let bad = errors(pred, gt, mask).filter(|&(e, g)| e > 3.0 && e > 0.05 * g).count();
    Ok(100.0 * bad as f64 / total as f64)
}

/// `|pred − gt|` clamped to `[0, scale_max]` and mapped to 0..=255; invalid pixels black.
pub fn render_error_map(pred: &Tensor<f32>, gt: &Tensor<f32>, mask: &[bool], scale_max: f64) -> Result<GrayImage> {
    if scale_max <= 0.0 {
        return Err(Error::Contract(format!("error-map scale must be positive, got {scale_max}")));
    }
    let &[h, w] = pred.shape() else {
        return Err(Error::Shape(format!("error map needs an H×W prediction, got {:?}", pred.shape())));
    };
    pred.expect_same_shape(gt)?;
    if mask.len() != h * w {
        return Err(Error::Shape("mask size does not match the maps".into()));
    }
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        if !mask[i] {
            return image::Luma([0]);
        }
        let e = ((pred.data()[i] - gt.data()[i]).abs() as f64).min(scale_max);
        image::Luma([(255.0 * e / scale_max).round() as u8])
    }))
}

/// Metrics of one sample or of an aggregate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub sample: String,
    pub mae_px: f64,
    pub mae_mm: Option<f64>,
    pub bad1: f64,
    pub bad2: f64,
    pub bad3: f64,
    pub d1: f64,
    pub n_valid: usize,
}

impl EvalReport {
    /// Scores a disparity prediction; `mae_mm` needs a calibration and uses
    /// depth-valid pixels of both maps.
    pub fn evaluate(
        sample: impl Into<String>,
        pred: &Tensor<f32>,
        gt: &Tensor<f32>,
        mask: &[bool],
        calib: Option<&Calibration>,
    ) -> Result<Self> {
        let (p, g) = (pred.data(), gt.data());
        let n_valid = check(p, g, mask)?;
        let mae_mm = match calib {
            Some(c) => {
                let (zp, vp) = disparity_to_depth(pred, c);
                let (zg, vg) = disparity_to_depth(gt, c);
                let m: Vec<bool> = (0..mask.len()).map(|i| mask[i] && vp[i] && vg[i]).collect();
                mae(zp.data(), zg.data(), &m).ok()
            }
            None => None,
        };
        Ok(Self {
            sample: sample.into(),
            mae_px: mae(p, g, mask)?,
            mae_mm,
            bad1: bad_n(p, g, mask, 1.0)?,
            bad2: bad_n(p, g, mask, 2.0)?,
            bad3: bad_n(p, g, mask, 3.0)?,
            d1: d1(p, g, mask)?,
            n_valid,
        })
    }

    /// Pixel-weighted mean of per-sample reports.
    pub fn aggregate(reports: &[EvalReport]) -> Option<Self> {
        let n: usize = reports.iter().map(|r| r.n_valid).sum();
        if n == 0 {
            return None;
        }
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(|r| f(r) * r.n_valid as f64).sum::<f64>() / n as f64;
        let with_mm: Vec<&EvalReport> = reports.iter().filter(|r| r.mae_mm.is_some()).collect();
        let mm_n: usize = with_mm.iter().map(|r| r.n_valid).sum();
        let mae_mm = (mm_n > 0)
            .then(|| with_mm.iter().map(|r| r.mae_mm.unwrap_or(0.0) * r.n_valid as f64).sum::<f64>() / mm_n as f64);
        Some(Self {
            sample: "aggregate".into(),
            mae_px: avg(|r| r.mae_px),
            mae_mm,
            bad1: avg(|r| r.bad1),
            bad2: avg(|r| r.bad2),
            bad3: avg(|r| r.bad3),
            d1: avg(|r| r.d1),
            n_valid: n,
        })
    }

    /// One JSON object on a single line.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [bool; 3] = [true; 3];

    #[test]
    fn hand_cases() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0], &[true; 2]).unwrap(), 0.0);
        assert_eq!(mae(&[11.0, 17.0], &[10.0, 20.0], &[true; 2]).unwrap(), 2.0);
        let gt = [10.0f32, 10.0, 10.0];
        let pred = [10.5f32, 12.5, 14.0];
        assert!((bad_n(&pred, &gt, &ALL, 2.0).unwrap() - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(bad_n(&gt, &gt, &ALL, 1.0).unwrap(), 0.0);
        assert!(bad_n(&pred, &gt, &ALL, 0.0).is_err());
    }

    #[test]
    fn d1_needs_both_clauses() {
        // 4 px at gt 100: above 3 px but not above 5% (= 5 px)
        assert_eq!(d1(&[104.0], &[100.0], &[true]).unwrap(), 0.0);
        // 6 px at gt 100 exceeds both
        assert_eq!(d1(&[106.0], &[100.0], &[true]).unwrap(), 100.0);
        // 4 px at gt 20: 4 > 3 and 4 > 1
        assert_eq!(d1(&[24.0], &[20.0], &[true]).unwrap(), 100.0);
        assert_eq!(d1(&[20.0], &[20.0], &[true]).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(matches!(mae(&[1.0], &[2.0], &[false]), Err(Error::Contract(_))));
        assert!(d1(&[1.0], &[2.0], &[false]).is_err());
    }

    #[test]
    fn error_map_intensity() {
        let gt = Tensor::new(&[1, 3], vec![5.0f32, 5.0, 5.0]).unwrap();
        let pred = Tensor::new(&[1, 3], vec![5.0f32, 9.0, 100.0]).unwrap();
        let img = render_error_map(&pred, &gt, &[true, true, false], 4.0).unwrap();
        assert_eq!(img.as_raw(), &vec![0, 255, 0]);
        assert!(render_error_map(&pred, &gt, &[true; 3], 0.0).is_err());
    }

    #[test]
    fn report_keys_and_aggregate() {
        let gt = Tensor::new(&[1, 2], vec![10.0f32, 20.0]).unwrap();
        let pred = Tensor::new(&[1, 2], vec![12.0f32, 20.0]).unwrap();
        let c = Calibration::new(100.0, 5.0).unwrap();
        let r = EvalReport::evaluate("s0", &pred, &gt, &[true, true], Some(&c)).unwrap();
        assert_eq!(r.mae_px, 1.0);
        assert!((r.mae_mm.unwrap() - (50.0 - 500.0 / 12.0) / 2.0).abs() < 1e-4);
        let line = r.to_json_line();
        for key in ["sample", "mae_px", "mae_mm", "bad1", "bad2", "bad3", "d1", "n_valid"] {
            assert!(line.contains(&format!("\"{key}\"")), "{line}");
        }
        let agg = EvalReport::aggregate(&[r.clone(), r]).unwrap();
        assert_eq!(agg.n_valid, 4);
        assert_eq!(agg.sample, "aggregate");
    }
}
