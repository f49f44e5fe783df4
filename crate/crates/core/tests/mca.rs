use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rresm_core::mca::{self, AxisDescriptors, BiMamba, Mca, McaConfig, Pooling, SsmLayer};
use rresm_core::{oracle, Error};
use rresm_numerics::gradcheck::check_params;
use rresm_numerics::{ops, Graph, ParamStore, Tensor};

#[test]
fn constant_volume_pools_to_constant() {
    let vol = Tensor::<f32>::full(&[2, 3, 4, 5], 3.7);
    let d = mca::axis_pool(&vol, Pooling::Mean).unwrap();
    for t in [&d.z_x, &d.z_y, &d.z_z] {
        assert!(t.data().iter().all(|&v| (v - 3.7).abs() < 1e-6));
    }
    assert_eq!(d.z_x.shape(), &[2, 5]);
    assert_eq!(d.z_y.shape(), &[2, 4]);
    assert_eq!(d.z_z.shape(), &[2, 3]);
}

#[test]
fn mean_pool_matches_loop_oracle_exactly() {
    let vol = Tensor::<f32>::from_fn(&[1, 2, 2, 2], |i| (i + 1) as f32);
    let d = mca::axis_pool(&vol, Pooling::Mean).unwrap();
    assert_eq!(d.z_z.data(), &[2.5, 6.5]);
    let (zx, zy, zz) = oracle::axis_mean(&vol);
    assert_eq!((d.z_x.clone(), d.z_y.clone(), d.z_z.clone()), (zx, zy, zz));
    for seed in 0..10 {
        let vol = Tensor::<f32>::randn(&[3, 4, 5, 6], 1.0, seed);
        let d = mca::axis_pool(&vol, Pooling::Mean).unwrap();
        let (zx, zy, zz) = oracle::axis_mean(&vol);
        assert_eq!(d.z_x, zx);
        assert_eq!(d.z_y, zy);
        assert_eq!(d.z_z, zz);
    }
}

#[test]
fn max_pool_is_the_literal_maximum() {
    let vol = Tensor::<f32>::from_fn(&[1, 2, 2, 2], |i| (i + 1) as f32);
    let d = mca::axis_pool(&vol, Pooling::Max).unwrap();
    assert_eq!(d.z_x.data(), &[7.0, 8.0]);
    assert_eq!(d.z_y.data(), &[6.0, 8.0]);
    assert_eq!(d.z_z.data(), &[4.0, 8.0]);
}

#[test]
fn gate_concat_layout() {
    let zeros = AxisDescriptors {
        z_x: Tensor::<f32>::zeros(&[4, 128]),
        z_y: Tensor::zeros(&[4, 64]),
        z_z: Tensor::zeros(&[4, 48]),
    };
    let s = mca::gate_concat(&zeros).unwrap();
    assert_eq!(s.shape(), &[4, 240]);
    assert!(s.data().iter().all(|&v| v == 0.5));

    let marked = AxisDescriptors {
        z_x: Tensor::<f64>::full(&[2, 3], 1.0),
        z_y: Tensor::full(&[2, 2], 2.0),
        z_z: Tensor::full(&[2, 4], 3.0),
    };
    let s = mca::gate_concat(&marked).unwrap();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    for c in 0..2 {
        for t in 0..9 {
            let want = sig(if t < 3 { 1.0 } else if t < 5 { 2.0 } else { 3.0 });
            assert!((s.at(&[c, t]) - want).abs() < 1e-15);
            assert!(s.at(&[c, t]) > 0.0 && s.at(&[c, t]) < 1.0);
        }
    }
}

struct Scan {
    x: Tensor<f64>,
    dt: Tensor<f64>,
    a_log: Tensor<f64>,
    b: Tensor<f64>,
    c: Tensor<f64>,
    d: Tensor<f64>,
}

impl Scan {
    fn random(ch: usize, heads: usize, n: usize, l: usize, seed: u64) -> Self {
        Self {
            x: Tensor::randn(&[ch, l], 1.0, seed),
            dt: Tensor::uniform(&[heads, l], 0.05, 1.5, seed + 1),
            a_log: Tensor::randn(&[heads], 0.5, seed + 2),
            b: Tensor::randn(&[n, l], 1.0, seed + 3),
            c: Tensor::randn(&[n, l], 1.0, seed + 4),
            d: Tensor::randn(&[ch], 1.0, seed + 5),
        }
    }

    fn run(&self, reverse: bool) -> Tensor<f64> {
        let mut g = Graph::new();
        let v = [&self.x, &self.dt, &self.a_log, &self.b, &self.c, &self.d].map(|t| g.constant(t.clone()));
        let y = mca::selective_scan(&mut g, v, reverse).unwrap();
        g.value(y).clone()
    }

    fn oracle(&self, reverse: bool) -> Tensor<f64> {
        let a: Vec<f64> = self.a_log.data().iter().map(|v| -v.exp()).collect();
        let inputs = oracle::ScanInputs {
            x: &self.x,
            dt: &self.dt,
            a: &a,
            b: &self.b,
            c: &self.c,
            d_skip: self.d.data(),
        };
        oracle::ssm_scan(&inputs, reverse)
    }
}

#[test]
fn single_step_closed_form() {
    let s = Scan::random(4, 2, 3, 1, 11);
    let y = s.run(false);
    for c in 0..4 {
        let x = s.x.at(&[c, 0]);
        let dt = s.dt.at(&[c / 2, 0]);
        let hstate: f64 = (0..3).map(|k| s.c.at(&[k, 0]) * dt * s.b.at(&[k, 0]) * x).sum();
        assert!((y.at(&[c, 0]) - (hstate + s.d.data()[c] * x)).abs() < 1e-12);
    }
}

#[test]
fn degenerate_parameters_give_cumulative_sum() {
    let l = 7;
    let s = Scan {
        x: Tensor::from_fn(&[1, l], |i| (i as f64) - 2.5),
        dt: Tensor::ones(&[1, l]),
        a_log: Tensor::full(&[1], -100.0),
        b: Tensor::ones(&[1, l]),
        c: Tensor::ones(&[1, l]),
        d: Tensor::zeros(&[1]),
    };
    let y = s.run(false);
    let mut acc = 0.0;
    for t in 0..l {
        acc += s.x.at(&[0, t]);
        assert!((y.at(&[0, t]) - acc).abs() < 1e-12);
    }
    let yb = s.run(true);
    let mut acc = 0.0;
    for t in (0..l).rev() {
        acc += s.x.at(&[0, t]);
        assert!((yb.at(&[0, t]) - acc).abs() < 1e-12);
    }
}

#[test]
fn scan_matches_sequential_oracle() {
    for (seed, l) in [(1u64, 16usize), (2, 32), (3, 5), (4, 1)] {
        let s = Scan::random(16, 2, 16, l, seed * 10);
        for reverse in [false, true] {
            let err = s.run(reverse).max_abs_diff(&s.oracle(reverse)).unwrap();
            assert!(err < 1e-5, "L = {l}: {err}");
        }
    }
}

#[test]
fn scan_is_causal_per_direction() {
    let s = Scan::random(8, 1, 4, 12, 77);
    let t0 = 5;
    for reverse in [false, true] {
        let base = s.run(reverse);
        let mut p = Scan { x: s.x.clone(), ..Scan::random(8, 1, 4, 12, 77) };
        let v = p.x.at(&[3, t0]);
        p.x.set(&[3, t0], v + 1.0);
        let moved = p.run(reverse);
        for t in 0..12 {
            let changed = (moved.at(&[3, t]) - base.at(&[3, t])).abs() > 0.0;
            let may_change = if reverse { t <= t0 } else { t >= t0 };
            assert!(may_change || !changed, "reverse={reverse}: token {t} changed");
            if t == t0 {
                assert!(changed);
            }
        }
    }
}

fn ssm_store(seed: u64, ch: usize, cfg: &McaConfig) -> (ParamStore<f64>, SsmLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = SsmLayer::new(&mut store, &mut rng, "s", ch, cfg).unwrap();
    (store, layer)
}

#[test]
fn shared_parameters_mirror_on_palindromes() {
    let cfg = McaConfig::default();
    let (store, layer) = ssm_store(5, 16, &cfg);
    let l = 9;
    let half = Tensor::<f64>::randn(&[16, l], 1.0, 6);
    let pal = Tensor::from_fn(&[16, l], |i| {
        let (c, t) = (i / l, i % l);
        half.at(&[c, t.min(l - 1 - t)])
    });
    let mut g = Graph::new();
    let x = g.constant(pal);
    let f = layer.forward(&mut g, &store, x, false).unwrap();
    let b = layer.forward(&mut g, &store, x, true).unwrap();
    let (f, b) = (g.value(f).clone(), g.value(b).clone());
    for c in 0..16 {
        for t in 0..l {
            assert!((f.at(&[c, t]) - b.at(&[c, l - 1 - t])).abs() < 1e-12);
            let s = f.at(&[c, t]) + b.at(&[c, t]);
            let m = f.at(&[c, l - 1 - t]) + b.at(&[c, l - 1 - t]);
            assert!((s - m).abs() < 1e-12);
        }
    }
}

#[test]
fn bimamba_shape_and_zero_input() {
    let cfg = McaConfig::default();
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let bm = BiMamba::new(&mut store, &mut rng, "bm", 16, &cfg).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[16, 240], 1.0, 1));
    let y = bm.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[16, 240]);

    for layer in [&bm.forward_scan, &bm.backward_scan] {
        store.get_mut(layer.d_skip).value = Tensor::zeros(&[16]);
    }
    store.get_mut(bm.out_b).value = Tensor::zeros(&[16, 1]);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[16, 30]));
    let y = bm.forward(&mut g, &store, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn split_apply_cases() {
    let vol = Tensor::<f32>::randn(&[2, 3, 4, 5], 1.0, 3);
    let ones = Tensor::ones(&[2, 12]);
    assert_eq!(mca::split_apply_values(&vol, &ones).unwrap(), vol);
    let twice_x = Tensor::from_fn(&[2, 12], |i| if i % 12 < 5 { 2.0 } else { 1.0 });
    assert_eq!(mca::split_apply_values(&vol, &twice_x).unwrap(), vol.scale(2.0));
    for seed in 0..10 {
        let vol = Tensor::<f32>::randn(&[3, 4, 2, 5], 1.0, seed);
        let seq = Tensor::<f32>::randn(&[3, 11], 1.0, seed + 100);
        let maps = mca::split(&seq, 5, 2, 4).unwrap();
        let want = oracle::split_apply(&vol, &maps.a_x, &maps.a_y, &maps.a_z);
        assert_eq!(mca::split_apply_values(&vol, &seq).unwrap(), want);
    }
    let bad = Tensor::<f32>::ones(&[2, 11]);
    assert!(matches!(mca::split_apply_values(&vol, &bad), Err(Error::Contract(_))));
}

#[test]
fn module_preserves_shape_and_can_be_disabled() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = Mca::new(&mut store, &mut rng, "m", 16, McaConfig::default()).unwrap();
    let vol = Tensor::randn(&[16, 8, 4, 8], 1.0, 2);
    let mut g = Graph::new();
    let v = g.constant(vol.clone());
    let y = m.forward(&mut g, &store, v).unwrap();
    assert_eq!(g.shape(y), vol.shape());
    assert_ne!(g.value(y), &vol);
    m.config.enabled = false;
    let y = m.forward(&mut g, &store, v).unwrap();
    assert_eq!(g.value(y), &vol);
}

#[test]
fn module_gradients_match_finite_differences() {
    for pooling in [Pooling::Mean, Pooling::Max] {
        let cfg = McaConfig { pooling, state_dim: 4, head_dim: 4, enabled: true };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = Mca::new(&mut store, &mut rng, "m", 8, cfg).unwrap();
        // larger output weights so every parameter matters at first order
        let w = store.value(m.bimamba.out_w).clone();
        store.get_mut(m.bimamba.out_w).value = w.scale(30.0);
        // distinct values spaced well beyond the FD step, so no max flips under perturbation
        let mut vals: Vec<f64> = (0..480).map(|i| (i as f64 - 240.0) * 0.01).collect();
        vals.shuffle(&mut ChaCha8Rng::seed_from_u64(13));
        let vol = Tensor::new(&[8, 4, 3, 5], vals).unwrap();
        let proj = Tensor::randn(&[8, 4, 3, 5], 1.0, 14);
        let report = check_params(&mut store, 24, |g, s| {
            let v = g.input(vol.clone());
            let y = m.forward(g, s, v)?;
            Ok::<_, Error>(ops::weighted_sum(g, y, &proj)?)
        })
        .unwrap();
        for r in report {
            assert!(r.rel_error < 1e-3, "{pooling:?} {}: {}", r.name, r.rel_error);
        }
        let err = rresm_numerics::gradcheck::check_inputs(&[vol.clone()], |g, v| {
            let y = m.forward(g, &store, v[0])?;
            Ok::<_, Error>(ops::weighted_sum(g, y, &proj)?)
        })
        .unwrap();
        assert!(err < 1e-3, "{pooling:?} volume gradient: {err}");
    }
}
