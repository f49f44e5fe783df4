//! Built-in oracle suite, run by the `selftest` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rresm_numerics::gradcheck::check_inputs;
use rresm_numerics::conv::{self, ConvOpts};
use rresm_numerics::{ops, Graph, Tensor};

use crate::aggregation;
use crate::cost_volume;
use crate::dataset;
use crate::hfdo::{self, HaarKernels};
use crate::loss::{self, Supervision};
use crate::mca::{self, Pooling};
use crate::metrics;
use crate::oracle;
use crate::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct SelftestOptions {
    /// Fault injection: perturb one synthesis tap of the Haar filter bank.
    pub corrupt_haar: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Outcome = Result<(bool, String)>;

fn within(err: f64, tol: f64) -> (bool, String) {
    (err < tol, format!("max err {err:.3e} (tol {tol:.0e})"))
}

fn exact(same: bool) -> (bool, String) {
    (same, if same { "exact".into() } else { "values differ".into() })
}

fn kernels(opts: &SelftestOptions) -> HaarKernels {
    let mut k = HaarKernels::default();
    if opts.corrupt_haar {
        k.bands[3][1][1] += 0.25;
    }
    k
}

fn haar_hand_case(opts: &SelftestOptions) -> Outcome {
    let x = Tensor::new(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0])?;
    let b = hfdo::haar_dwt(&x, &kernels(opts))?;
    let got = [b.ll.data()[0], b.lh.data()[0], b.hl.data()[0], b.hh.data()[0]];
    Ok((got == [5.0, -1.0, -2.0, 0.0], format!("(LL,LH,HL,HH) = {got:?}")))
}

fn haar_reconstruction(opts: &SelftestOptions) -> Outcome {
    let k = kernels(opts);
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (mut worst, mut worst_energy) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let shape = [rng.random_range(1..4), 2 * rng.random_range(1..9), 2 * rng.random_range(1..9)];
        let x = Tensor::<f32>::randn(&shape, 1.0, seed);
        let b = hfdo::haar_dwt(&x, &k)?;
        let y = hfdo::haar_iwt(&b, &k)?;
        worst = worst.max(y.max_abs_diff(&x)? as f64);
        let e: f64 = [&b.ll, &b.lh, &b.hl, &b.hh].iter().map(|t| t.cast::<f64>().norm_sq()).sum();
        let ex = x.cast::<f64>().norm_sq();
        worst_energy = worst_energy.max((e - ex).abs() / ex);
    }
    Ok((
        worst < 1e-5 && worst_energy < 1e-4,
        format!("reconstruction {worst:.2e}, energy {worst_energy:.2e} over 100 tensors"),
    ))
}

fn haar_window_oracle(opts: &SelftestOptions) -> Outcome {
    let x = Tensor::<f64>::randn(&[2, 6, 8], 1.0, 3);
    let b = hfdo::haar_dwt(&x, &kernels(opts))?;
    let want = oracle::haar_dwt(&x);
    let mut err = 0.0f64;
    for (got, w) in [&b.ll, &b.lh, &b.hl, &b.hh].into_iter().zip(&want) {
        err = err.max(got.max_abs_diff(w)?);
    }
    Ok(within(err, 1e-12))
}

fn gwc_oracle(_: &SelftestOptions) -> Outcome {
    let fl = Tensor::<f32>::randn(&[8, 5, 12], 1.0, 1);
    let fr = Tensor::<f32>::randn(&[8, 5, 12], 1.0, 2);
    let cv = cost_volume::build_gwc_values(&fl, &fr, 4, 6)?;
    let ones = Tensor::<f32>::ones(&[32, 2, 4]);
    let c1 = cost_volume::build_gwc_values(&ones, &ones, 16, 1)?;
    let same = cv.values == oracle::gwc(&fl, &fr, 4, 6) && c1.values.data().iter().all(|&v| v == 1.0);
    Ok(exact(same))
}

fn axis_pool_oracle(_: &SelftestOptions) -> Outcome {
    let vol = Tensor::<f32>::randn(&[3, 4, 5, 6], 1.0, 4);
    let d = mca::axis_pool(&vol, Pooling::Mean)?;
    let (ox, oy, oz) = oracle::axis_mean(&vol);
    Ok(exact(d.z_x == ox && d.z_y == oy && d.z_z == oz))
}

fn split_apply_oracle(_: &SelftestOptions) -> Outcome {
    let (c, d, h, w) = (3, 4, 5, 6);
    let vol = Tensor::<f32>::randn(&[c, d, h, w], 1.0, 5);
    let seq = Tensor::<f32>::uniform(&[c, w + h + d], 0.0, 1.0, 6);
    let got = mca::split_apply_values(&vol, &seq)?;
    let maps = mca::split(&seq, w, h, d)?;
    Ok(exact(got == oracle::split_apply(&vol, &maps.a_x, &maps.a_y, &maps.a_z)))
}

struct ScanCase {
    x: Tensor<f64>,
    dt: Tensor<f64>,
    a_log: Tensor<f64>,
    b: Tensor<f64>,
    c: Tensor<f64>,
    d: Tensor<f64>,
}

impl ScanCase {
    fn new(l: usize, seed: u64) -> Self {
        Self {
            x: Tensor::randn(&[4, l], 1.0, seed),
            dt: Tensor::uniform(&[2, l], 0.05, 1.0, seed + 1),
            a_log: Tensor::randn(&[2], 0.5, seed + 2),
            b: Tensor::randn(&[3, l], 1.0, seed + 3),
            c: Tensor::randn(&[3, l], 1.0, seed + 4),
            d: Tensor::randn(&[4], 1.0, seed + 5),
        }
    }

    fn run(&self, reverse: bool) -> Result<Tensor<f64>> {
        let mut g = Graph::inference();
        let v = [&self.x, &self.dt, &self.a_log, &self.b, &self.c, &self.d].map(|t| g.constant(t.clone()));
        let y = mca::selective_scan(&mut g, v, reverse)?;
        Ok(g.value(y).clone())
    }

    fn oracle(&self, reverse: bool) -> Tensor<f64> {
        let a: Vec<f64> = self.a_log.data().iter().map(|v| -v.exp()).collect();
        let p = oracle::ScanInputs { x: &self.x, dt: &self.dt, a: &a, b: &self.b, c: &self.c, d_skip: self.d.data() };
        oracle::ssm_scan(&p, reverse)
    }
}

fn scan_oracle(_: &SelftestOptions) -> Outcome {
    let mut err = 0.0f64;
    for (i, l) in [1, 5, 16, 32].into_iter().enumerate() {
        let case = ScanCase::new(l, 10 * i as u64);
        for reverse in [false, true] {
            err = err.max(case.run(reverse)?.max_abs_diff(&case.oracle(reverse))?);
        }
    }
    Ok(within(err, 1e-5))
}

fn scan_causality(_: &SelftestOptions) -> Outcome {
    let l = 16;
    let base = ScanCase::new(l, 77);
    let y0 = base.run(false)?;
    let mut ok = true;
    for t in [0, 7, 15] {
        let mut p = ScanCase::new(l, 77);
        for c in 0..4 {
            let v = p.x.at(&[c, t]);
            p.x.set(&[c, t], v + 1.0);
        }
        let y = p.run(false)?;
        for c in 0..4 {
            for s in 0..l {
                let changed = y.at(&[c, s]) != y0.at(&[c, s]);
                if s < t && changed || s == t && !changed {
                    ok = false;
                }
            }
        }
    }
    Ok((ok, "outputs before a perturbed token are unchanged".into()))
}

fn soft_argmax_oracle(_: &SelftestOptions) -> Outcome {
    let s = Tensor::<f64>::randn(&[5, 3, 4], 2.0, 8);
    let same = aggregation::soft_argmax_values(&s)? == oracle::soft_argmax(&s);
    let uniform = aggregation::soft_argmax_values(&Tensor::<f64>::zeros(&[48, 2, 2]))?;
    let mid = uniform.data().iter().all(|&v| (v - 23.5).abs() < 1e-9);
    Ok((same && mid, format!("oracle match {same}, uniform mean 23.5 {mid}")))
}

fn upsample_oracle(_: &SelftestOptions) -> Outcome {
    let x = Tensor::<f64>::randn(&[4, 6], 3.0, 9);
    let mut g = Graph::inference();
    let v = g.constant(x.clone());
    let up = aggregation::upsample_disparity(&mut g, v)?;
    Ok(within(g.value(up).max_abs_diff(&oracle::bilinear_upsample(&x, 4, 4.0))?, 1e-5))
}

fn conv_oracle(_: &SelftestOptions) -> Outcome {
    let x = Tensor::<f64>::randn(&[3, 7, 9], 1.0, 11);
    let w = Tensor::<f64>::randn(&[4, 3, 3, 3], 1.0, 12);
    let y = conv::conv2d_values(&x, &w, None, ConvOpts::new(2, 1))?;
    let mut err = y.max_abs_diff(&oracle::conv2d(&x, &w, 2, 1))?;
    let x3 = Tensor::<f64>::randn(&[2, 4, 5, 6], 1.0, 13);
    let w3 = Tensor::<f64>::randn(&[3, 2, 3, 3, 3], 1.0, 14);
    let y3 = conv::conv3d_values(&x3, &w3, None, ConvOpts::new(1, 1))?;
    err = err.max(y3.max_abs_diff(&oracle::conv3d(&x3, &w3, 1, 1))?);
    Ok(within(err, 1e-10))
}

fn smooth_l1_oracle(_: &SelftestOptions) -> Outcome {
    let pred = Tensor::<f64>::randn(&[6, 7], 3.0, 15).map(|v| v + 10.0);
    let gt = Tensor::<f64>::uniform(&[6, 7], 0.0, 20.0, 16);
    let sup = Supervision::new(gt.clone(), 192.0);
    let got = loss::smooth_l1_values(&pred, &sup)?;
    Ok(within((got - oracle::smooth_l1(pred.data(), gt.data(), &sup.mask)).abs(), 1e-12))
}

fn metric_hand_cases(_: &SelftestOptions) -> Outcome {
    let m3 = [true; 3];
    let mae = metrics::mae(&[1.0, 3.0], &[0.0, 0.0], &[true; 2])?;
    let bad = metrics::bad_n(&[0.5, 2.5, 4.0], &[0.0; 3], &m3, 2.0)?;
    let d1 = metrics::d1(&[104.0], &[100.0], &[true])?;
    let d1_far = metrics::d1(&[106.0], &[100.0], &[true])?;
    let ok = mae == 2.0 && (bad - 200.0 / 3.0).abs() < 1e-9 && d1 == 0.0 && d1_far == 100.0;
    Ok((ok, format!("mae {mae}, bad2 {bad:.2}%, d1(err 4 @ 100) {d1}%, d1(err 6 @ 100) {d1_far}%")))
}

fn gradients(_: &SelftestOptions) -> Outcome {
    let mut worst = 0.0f64;
    let fl = Tensor::randn(&[4, 3, 6], 1.0, 20);
    let fr = Tensor::randn(&[4, 3, 6], 1.0, 21);
    let w = Tensor::randn(&[2, 3, 3, 6], 1.0, 22);
    worst = worst.max(check_inputs(&[fl, fr], |g, v| {
        let cv = cost_volume::build_gwc(g, v[0], v[1], 2, 3)?;
        Ok::<_, Error>(ops::weighted_sum(g, cv, &w)?)
    })?);
    let scores = Tensor::randn(&[6, 3, 3], 1.0, 23);
    let w2 = Tensor::randn(&[3, 3], 1.0, 24);
    worst = worst.max(check_inputs(&[scores], |g, v| {
        let d = aggregation::soft_argmax(g, v[0])?;
        Ok::<_, Error>(ops::weighted_sum(g, d, &w2)?)
    })?);
    let case = ScanCase::new(6, 25);
    let wy = Tensor::randn(&[4, 6], 1.0, 26);
    let inputs = [case.x, case.dt, case.a_log, case.b, case.c, case.d];
    for reverse in [false, true] {
        worst = worst.max(check_inputs(&inputs, |g, v| {
            let y = mca::selective_scan(g, [v[0], v[1], v[2], v[3], v[4], v[5]], reverse)?;
            Ok::<_, Error>(ops::weighted_sum(g, y, &wy)?)
        })?);
    }
    let vol = Tensor::randn(&[3, 2, 3, 4], 1.0, 27);
    let wv = Tensor::randn(&[3, 2, 3, 4], 1.0, 28);
    worst = worst.max(check_inputs(&[vol], |g, v| {
        let seq = mca::pool_gate(g, v[0], Pooling::Mean)?;
        let y = mca::split_apply(g, v[0], seq)?;
        Ok::<_, Error>(ops::weighted_sum(g, y, &wv)?)
    })?);
    let pred = Tensor::randn(&[4, 5], 2.0, 29).map(|v| v + 6.0);
    let sup = Supervision::new(Tensor::uniform(&[4, 5], 1.0, 10.0, 30), 192.0);
    worst = worst.max(check_inputs(&[pred], |g, v| loss::smooth_l1(g, v[0], &sup))?);
    Ok(within(worst, 1e-3))
}

fn pfm_round_trip(_: &SelftestOptions) -> Outcome {
    let m = Tensor::<f32>::randn(&[5, 7], 10.0, 31);
    let back = dataset::decode_pfm(&dataset::encode_pfm(&m)?)?;
    Ok(exact(back == m))
}

type CheckFn = fn(&SelftestOptions) -> Outcome;

const CHECKS: &[(&str, CheckFn)] = &[
    ("haar.hand_case", haar_hand_case),
    ("haar.reconstruction", haar_reconstruction),
    ("haar.window_oracle", haar_window_oracle),
    ("cost_volume.oracle", gwc_oracle),
    ("mca.axis_pool", axis_pool_oracle),
    ("mca.split_apply", split_apply_oracle),
    ("mca.scan_oracle", scan_oracle),
    ("mca.scan_causality", scan_causality),
    ("regression.soft_argmax", soft_argmax_oracle),
    ("regression.upsample", upsample_oracle),
    ("conv.oracle", conv_oracle),
    ("loss.smooth_l1", smooth_l1_oracle),
    ("metrics.hand_cases", metric_hand_cases),
    ("gradients.finite_difference", gradients),
    ("dataset.pfm_round_trip", pfm_round_trip),
];

pub fn run(opts: &SelftestOptions) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, f)| match f(opts) {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
        })
        .collect()
}

pub fn render_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{status}  {:width$}  {}\n", r.name, r.detail));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} checks, {} failed\n", results.len(), failed));
    out
}
