use std::path::PathBuf;
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rresm_core::dataset::{self, StereoSample};
use rresm_core::train::{self, StepLosses, TrainSample};
use rresm_core::StereoNet;
use rresm_numerics::checkpoint::write_atomic;
use rresm_numerics::{Adam, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Capacity of the loader queue.
const QUEUE_DEPTH: usize = 4;

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub losses: Vec<StepLosses>,
    /// Training-set EPE of the final weights, in pixels.
    pub final_epe: f64,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
}

fn crop_map(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let (c, th, tw) = match *t.shape() {
        [c, th, tw] => (c, th, tw),
        [th, tw] => (1, th, tw),
        _ => unreachable!("maps are 2-D or 3-D"),
    };
    let data = (0..c * h * w).map(|i| t.data()[(i / (h * w) * th + y0 + (i / w) % h) * tw + x0 + i % w]).collect();
    let shape: Vec<usize> = if t.ndim() == 3 { vec![c, h, w] } else { vec![h, w] };
    Tensor::new(&shape, data).expect("crop stays in bounds")
}

/// Crops a sample to `h×w` at `(y0, x0)`.
pub fn crop_sample(s: &StereoSample, y0: usize, x0: usize, h: usize, w: usize) -> StereoSample {
    let sw = s.width();
    StereoSample {
        left: crop_map(&s.left, y0, x0, h, w),
        right: crop_map(&s.right, y0, x0, h, w),
        gt_disparity: s.gt_disparity.as_ref().map(|t| crop_map(t, y0, x0, h, w)),
        gt_depth: s.gt_depth.as_ref().map(|t| crop_map(t, y0, x0, h, w)),
        calib: s.calib,
        valid: s.valid.as_ref().map(|v| (0..h * w).map(|i| v[(y0 + i / w) * sw + x0 + i % w]).collect()),
    }
}

fn crop_size(s: &StereoSample, cfg: &RunConfig) -> CliResult<(usize, usize)> {
    let (h, w) = (cfg.train.crop_height.min(s.height()), cfg.train.crop_width.min(s.width()));
    if h % 16 != 0 || w % 16 != 0 {
        return Err(CliError::Data(format!(
            "sample {}×{} is smaller than the crop and not divisible by 16",
            s.height(),
            s.width()
        )));
    }
    Ok((h, w))
}

fn to_train(name: String, s: &StereoSample, cfg: &RunConfig) -> CliResult<TrainSample> {
    Ok(TrainSample::from_stereo(name, s, cfg.model.max_disparity)?)
}

/// Centre crops used to measure training-set EPE.
pub fn eval_set(samples: &[StereoSample], cfg: &RunConfig) -> CliResult<Vec<TrainSample>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (h, w) = crop_size(s, cfg)?;
            let c = crop_sample(s, (s.height() - h) / 2, (s.width() - w) / 2, h, w);
            to_train(format!("sample{i}"), &c, cfg)
        })
        .collect()
}

/// Trains `net` in place on in-memory samples. `on_step` sees every step's
/// losses before the update is applied.
pub fn train_samples(
    net: &mut StereoNet<f32>,
    samples: Vec<StereoSample>,
    cfg: &RunConfig,
    mut on_step: impl FnMut(usize, &StepLosses),
) -> CliResult<(Vec<StepLosses>, f64, bool)> {
    if samples.is_empty() {
        return Err(CliError::Data("no training samples".into()));
    }
    for s in &samples {
        crop_size(s, cfg)?;
        if s.gt_disparity.is_none() {
            return Err(CliError::Data("every training sample needs ground truth".into()));
        }
    }
    let t = cfg.train.clone();
    let steps = if t.max_steps > 0 { t.max_steps } else { t.epochs * samples.len() };
    let evals = eval_set(&samples, cfg)?;
    let loader_cfg = cfg.clone();
    let (tx, rx) = mpsc::sync_channel::<CliResult<TrainSample>>(QUEUE_DEPTH);
    let loader = thread::spawn(move || {
        let mut rng = ChaCha8Rng::seed_from_u64(loader_cfg.train.seed);
        let mut order: Vec<usize> = Vec::new();
        for step in 0..steps {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let i = order.pop().expect("refilled above");
            let s = &samples[i];
            let item = crop_size(s, &loader_cfg).and_then(|(h, w)| {
                let y0 = rng.random_range(0..=s.height() - h);
                let x0 = rng.random_range(0..=s.width() - w);
                to_train(format!("sample{i}/step{step}"), &crop_sample(s, y0, x0, h, w), &loader_cfg)
            });
            if tx.send(item).is_err() {
                break;
            }
        }
    });
    let mut opt = Adam::new(t.adam());
    let mut losses = Vec::with_capacity(steps);
    let mut stopped_early = false;
    let mut result = Ok(());
    for step in 0..steps {
        let sample = match rx.recv() {
            Ok(Ok(s)) => s,
            Ok(Err(e)) => {
                result = Err(e);
                break;
            }
            Err(_) => break,
        };
        let l = train::train_step(net, &mut opt, &sample, t.weights)?;
        on_step(step, &l);
        losses.push(l);
        if t.stop_epe > 0.0 && (step + 1) % t.eval_every == 0 && train::mean_epe(net, &evals)? < t.stop_epe {
            stopped_early = true;
            break;
        }
    }
    drop(rx);
    loader.join().map_err(|_| CliError::Data("loader thread panicked".into()))?;
    result?;
    let epe = train::mean_epe(net, &evals)?;
    Ok((losses, epe, stopped_early))
}

pub fn loss_curve_text(losses: &[StepLosses]) -> String {
    let mut s = String::from("# step total d_f d_cg d_dr\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i} {:.6} {:.6} {:.6} {:.6}\n", l.total, l.d_f, l.d_cg, l.d_dr));
    }
    s
}

/// `train-toy`: trains from the manifest in `cfg` and writes the checkpoint,
/// its config sidecar, the loss curve and the effective run config.
pub fn run(cfg: &RunConfig, on_step: impl FnMut(usize, &StepLosses)) -> CliResult<TrainReport> {
    let manifest = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::Usage("train-toy needs a manifest (--manifest or paths.manifest)".into()))?;
    let entries = dataset::read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(CliError::Data(format!("manifest {} lists no samples", manifest.display())));
    }
    let samples = entries.iter().map(dataset::load_sample).collect::<Result<Vec<_>, _>>()?;
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    crate::ensure_dir(&out_dir)?;
    let checkpoint = cfg.checkpoint.clone().unwrap_or_else(|| out_dir.join("model.ckpt"));
    let mut net = StereoNet::<f32>::new(cfg.model.clone())?;
    let (losses, final_epe, stopped_early) = train_samples(&mut net, samples, cfg, on_step)?;
    crate::save_model(&net, &checkpoint)?;
    let loss_curve = out_dir.join("loss_curve.txt");
    write_atomic(&loss_curve, loss_curve_text(&losses).as_bytes())?;
    write_atomic(&out_dir.join("run.cfg"), cfg.to_text().as_bytes())?;
    Ok(TrainReport { losses, final_epe, stopped_early, checkpoint, loss_curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_picks_the_window() {
        let mut s = StereoSample::new(
            Tensor::from_fn(&[3, 4, 6], |i| i as f32),
            Tensor::from_fn(&[3, 4, 6], |i| -(i as f32)),
        )
        .unwrap();
        s.gt_disparity = Some(Tensor::from_fn(&[4, 6], |i| i as f32));
        s.valid = Some((0..24).map(|i| i % 2 == 0).collect());
        let c = crop_sample(&s, 1, 2, 2, 3);
        assert_eq!(c.left.shape(), &[3, 2, 3]);
        assert_eq!(c.left.at(&[1, 0, 0]), s.left.at(&[1, 1, 2]));
        assert_eq!(c.gt_disparity.unwrap().data(), &[8.0, 9.0, 10.0, 14.0, 15.0, 16.0]);
        assert_eq!(c.valid.unwrap(), vec![true, false, true, true, false, true]);
    }
}
