//! Stereo samples on disk and synthetic random-dot stereograms.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rresm_numerics::checkpoint::write_atomic;
use rresm_numerics::Tensor;

use crate::kv::KeyValues;
use crate::{Error, Result};

/// Smallest disparity (px) that is converted to depth.
pub const DEPTH_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub focal_px: f64,
    pub baseline_mm: f64,
}

impl Calibration {
    pub fn new(focal_px: f64, baseline_mm: f64) -> Result<Self> {
        if !(focal_px > 0.0 && baseline_mm > 0.0 && focal_px.is_finite() && baseline_mm.is_finite()) {
            return Err(Error::Format(format!(
                "calibration needs positive focal_px and baseline_mm, got {focal_px} and {baseline_mm}"
            )));
        }
        Ok(Self { focal_px, baseline_mm })
    }

    /// Parses `focal_px=…` / `baseline_mm=…` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text).map_err(|e| Error::Format(e.to_string()))?;
        kv.reject_unknown(&["focal_px", "baseline_mm"]).map_err(|e| Error::Format(e.to_string()))?;
        let (mut f, mut b) = (f64::NAN, f64::NAN);
        kv.read("focal_px", &mut f).map_err(|e| Error::Format(e.to_string()))?;
        kv.read("baseline_mm", &mut b).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(f, b)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = format!("focal_px={}\nbaseline_mm={}\n", self.focal_px, self.baseline_mm);
        Ok(write_atomic(path, text.as_bytes())?)
    }
}

/// `depth = focal · baseline / d` where `d > ε`; other pixels are invalid (depth 0).
pub fn disparity_to_depth(d: &Tensor<f32>, calib: &Calibration) -> (Tensor<f32>, Vec<bool>) {
    let fb = calib.focal_px * calib.baseline_mm;
    let valid: Vec<bool> = d.data().iter().map(|&v| v > DEPTH_EPS).collect();
    let depth = Tensor::from_fn(d.shape(), |i| if valid[i] { (fb / d.data()[i] as f64) as f32 } else { 0.0 });
    (depth, valid)
}

/// Parses a grayscale little-endian PFM. Non-finite values are rejected.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PFM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    match token()?.as_str() {
        "Pf" => {}
        "PF" => return Err(Error::Format("colour PFM (PF) is not supported; expected grayscale Pf".into())),
        other => return Err(Error::Format(format!("bad PFM magic {other:?}"))),
    }
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PFM extent {s:?}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let scale_tok = token()?;
    let scale: f64 = scale_tok.parse().map_err(|_| Error::Format(format!("bad PFM scale {scale_tok:?}")))?;
    if scale >= 0.0 {
        return Err(Error::Format(format!(
            "PFM scale {scale} means big-endian data, which is not supported"
        )));
    }
    // exactly one whitespace byte separates the header from the payload
    let start = pos + 1;
    if w == 0 || h == 0 || bytes.len() < start + 4 * w * h {
        return Err(Error::Format(format!("PFM payload too short for {w}×{h}")));
    }
    let raw = &bytes[start..start + 4 * w * h];
    let mut data = vec![0f32; w * h];
    for (row, chunk) in raw.chunks_exact(4 * w).enumerate() {
        let y = h - 1 - row;
        for (x, b) in chunk.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::Format(format!("non-finite PFM value at ({y}, {x})")));
            }
            data[y * w + x] = v;
        }
    }
    Ok(Tensor::new(&[h, w], data)?)
}

pub fn encode_pfm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[h, w] = map.shape() else {
        return Err(Error::Shape(format!("PFM holds an H×W map, got {:?}", map.shape())));
    };
    if !map.all_finite() {
        return Err(Error::Format("refusing to write non-finite values to PFM".into()));
    }
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for y in (0..h).rev() {
        for &v in &map.data()[y * w..(y + 1) * w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    decode_pfm(&fs::read(path)?)
}

pub fn write_pfm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    Ok(write_atomic(path, &encode_pfm(map)?)?)
}

/// 8-bit PNG/PGM as `3×H×W` in `[0, 1]`; grayscale is replicated.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[3 * p + c] as f32 / 255.0
    }))
}

/// Writes a `3×H×W` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::Shape(format!("expected 3×H×W image, got {:?}", img.shape())));
    };
    let mut raw = vec![0u8; 3 * h * w];
    for (i, &v) in img.data().iter().enumerate() {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[3 * p + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size");
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok(write_atomic(path, &bytes)?)
}

pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)?;
    Ok(write_atomic(path, &bytes)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub gt_disparity: Option<Tensor<f32>>,
    pub gt_depth: Option<Tensor<f32>>,
    pub calib: Option<Calibration>,
    /// Pixels with usable ground truth beyond the range test (e.g. not occluded).
    pub valid: Option<Vec<bool>>,
}

impl StereoSample {
    pub fn new(left: Tensor<f32>, right: Tensor<f32>) -> Result<Self> {
        if left.shape() != right.shape() || left.ndim() != 3 || left.shape()[0] != 3 {
            return Err(Error::Shape(format!(
                "stereo pair must be two 3×H×W images, got {:?} and {:?}",
                left.shape(),
                right.shape()
            )));
        }
        Ok(Self { left, right, gt_disparity: None, gt_depth: None, calib: None, valid: None })
    }

    pub fn height(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[2]
    }
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub left: PathBuf,
    pub right: PathBuf,
    pub gt: Option<PathBuf>,
    pub calib: Option<PathBuf>,
}

/// Tab-separated `left right [gt [calib]]`; `-` marks a missing column.
/// Relative paths are resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if !(2..=4).contains(&cols.len()) {
            return Err(Error::Format(format!("manifest line {}: expected 2 to 4 tab-separated paths", i + 1)));
        }
        let path = |k: usize| cols.get(k).filter(|s| !s.is_empty() && **s != "-").map(|s| base.join(s));
        out.push(ManifestEntry {
            left: path(0).ok_or_else(|| Error::Format(format!("manifest line {}: missing left path", i + 1)))?,
            right: path(1).ok_or_else(|| Error::Format(format!("manifest line {}: missing right path", i + 1)))?,
            gt: path(2),
            calib: path(3),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&fs::read_to_string(path)?, base)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let col = |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
    let text: String = entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\t{}\n", e.left.display(), e.right.display(), col(&e.gt), col(&e.calib)))
        .collect();
    Ok(write_atomic(path, text.as_bytes())?)
}

/// Loads a sample. Ground truth is read as disparity unless a calibration
/// is present and the file name contains `depth`, in which case the map is
/// depth in mm.
pub fn load_sample(entry: &ManifestEntry) -> Result<StereoSample> {
    let mut s = StereoSample::new(read_image(&entry.left)?, read_image(&entry.right)?)?;
    s.calib = entry.calib.as_deref().map(Calibration::read).transpose()?;
    if let Some(gt) = &entry.gt {
        let map = read_pfm(gt)?;
        if map.shape() != [s.height(), s.width()] {
            return Err(Error::Shape(format!("ground truth {:?} does not match image {}×{}", map.shape(), s.height(), s.width())));
        }
        let is_depth = gt.file_name().is_some_and(|n| n.to_string_lossy().contains("depth"));
        match (is_depth, s.calib) {
            (true, Some(c)) => {
                let fb = (c.focal_px * c.baseline_mm) as f32;
                s.gt_disparity = Some(map.map(|z| if z > 0.0 { fb / z } else { 0.0 }));
                s.gt_depth = Some(map);
            }
            _ => s.gt_disparity = Some(map),
        }
    }
    Ok(s)
}

/// Constant disparity everywhere.
pub fn constant_pattern(h: usize, w: usize, d: u32) -> Tensor<f32> {
    Tensor::full(&[h, w], d as f32)
}

/// Left half at `d_left`, right half at `d_right`.
pub fn two_plane_pattern(h: usize, w: usize, d_left: u32, d_right: u32) -> Tensor<f32> {
    Tensor::from_fn(&[h, w], |i| if i % w < w / 2 { d_left as f32 } else { d_right as f32 })
}

/// Random-dot stereogram for a left-referenced integer disparity pattern.
///
/// The right image is i.i.d. colour noise. `left[y, x] = right[y, x − d]`
/// wherever that pixel is visible in the right view. A left pixel is
/// occluded when `x − d < 0` or when a left pixel with a larger disparity
/// lands on the same right pixel; occluded pixels get fresh noise and are
/// marked invalid.
pub fn gen_rds(h: usize, w: usize, pattern: &Tensor<f32>, max_disparity: usize, seed: u64) -> Result<StereoSample> {
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Shape(format!("stereogram size {h}×{w} must be divisible by 16")));
    }
    if pattern.shape() != [h, w] {
        return Err(Error::Shape(format!("pattern {:?} does not match {h}×{w}", pattern.shape())));
    }
    if let Some(&bad) = pattern.data().iter().find(|&&v| v.fract() != 0.0 || v < 0.0 || v >= max_disparity as f32) {
        return Err(Error::Contract(format!("pattern value {bad} is not an integer in [0, {max_disparity})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let right = Tensor::from_fn(&[3, h, w], |_| rng.random::<f32>());
    let mut left = Tensor::zeros(&[3, h, w]);
    let mut valid = vec![true; h * w];
    let disp = pattern.data();
    for y in 0..h {
        // nearest (largest) disparity landing on each right pixel
        let mut winner = vec![-1i64; w];
        for x in 0..w {
            let d = disp[y * w + x] as usize;
            if x >= d {
                winner[x - d] = winner[x - d].max(d as i64);
            }
        }
        for x in 0..w {
            let d = disp[y * w + x] as usize;
            let visible = x >= d && winner[x - d] == d as i64;
            valid[y * w + x] = visible;
            for c in 0..3 {
                let v = if visible { right.at(&[c, y, x - d]) } else { rng.random::<f32>() };
                left.set(&[c, y, x], v);
            }
        }
    }
    let mut s = StereoSample::new(left, right)?;
    s.gt_disparity = Some(pattern.clone());
    s.valid = Some(valid);
    Ok(s)
}
