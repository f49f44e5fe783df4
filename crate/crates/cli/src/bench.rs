use std::path::Path;
use std::time::Instant;

use rresm_core::{ModelConfig, StereoNet};
use rresm_numerics::{checkpoint, Graph, Tensor};

use crate::error::{CliError, CliResult};

pub const WARMUP: usize = 3;
pub const MIN_ITERS: usize = 10;

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub iters: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub std_ms: f64,
    /// Coefficient of variation, `std / mean`.
    pub cv: f64,
    pub params: usize,
    /// Sum of the checkpoint manifest's value counts, when a checkpoint was given.
    pub manifest_params: Option<usize>,
    /// Analytic estimate for one forward pass; a multiply-add counts as two.
    pub flops: u64,
    pub times_ms: Vec<f64>,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "input: {}x{}\niters: {}\nwarmup: {WARMUP}\nmean_ms: {:.3}\nmedian_ms: {:.3}\nstd_ms: {:.3}\ncv: {:.4}\nparams: {}\n",
            self.height, self.width, self.iters, self.mean_ms, self.median_ms, self.std_ms, self.cv, self.params
        );
        if let Some(m) = self.manifest_params {
            s.push_str(&format!("manifest_params: {m}\n"));
        }
        s.push_str(&format!("flops: {}\ngflops: {:.3}\n", self.flops, self.flops as f64 / 1e9));
        s
    }
}

/// FLOPs of one forward pass at `h×w`.
pub fn forward_flops(net: &StereoNet<f32>, h: usize, w: usize) -> CliResult<u64> {
    let img = Tensor::<f32>::full(&[3, h, w], 0.5);
    let mut g = Graph::inference();
    net.forward(&mut g, &img, &img)?;
    Ok(g.flops())
}

pub fn run(
    checkpoint_path: Option<&Path>,
    model: Option<&ModelConfig>,
    h: usize,
    w: usize,
    iters: usize,
    seed: u64,
) -> CliResult<BenchReport> {
    if iters < MIN_ITERS {
        return Err(CliError::Usage(format!("bench needs at least {MIN_ITERS} iterations, got {iters}")));
    }
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(CliError::Usage(format!("bench size {h}×{w} must be positive multiples of 16")));
    }
    let net = crate::load_model(checkpoint_path, model)?;
    let manifest_params = match checkpoint_path {
        Some(p) => {
            let bytes = std::fs::read(p)?;
            let (entries, _) = checkpoint::read_manifest(&bytes)?;
            Some(entries.iter().map(|e| e.shape.iter().product::<usize>()).sum())
        }
        None => None,
    };
    let left = Tensor::<f32>::uniform(&[3, h, w], 0.0, 1.0, seed);
    let right = Tensor::<f32>::uniform(&[3, h, w], 0.0, 1.0, seed.wrapping_add(1));
    for _ in 0..WARMUP {
        net.infer(&left, &right)?;
    }
    let mut times_ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let d = net.infer(&left, &right)?;
        times_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(d);
    }
    let n = iters as f64;
    let mean = times_ms.iter().sum::<f64>() / n;
    let std = (times_ms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = times_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if iters % 2 == 1 { sorted[iters / 2] } else { 0.5 * (sorted[iters / 2 - 1] + sorted[iters / 2]) };
    Ok(BenchReport {
        height: h,
        width: w,
        iters,
        mean_ms: mean,
        median_ms: median,
        std_ms: std,
        cv: std / mean,
        params: net.params.num_scalars(),
        manifest_params,
        flops: forward_flops(&net, h, w)?,
        times_ms,
    })
}
