use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rresm_core::hfdo::{self, ContextMode, HaarKernels, Hfdo, HfdoConfig, WaveletBands};
use rresm_core::{oracle, Error};
use rresm_numerics::gradcheck::check_params;
use rresm_numerics::{ops, Graph, ParamStore, Tensor};

fn haar() -> HaarKernels {
    HaarKernels::default()
}

#[test]
fn hand_example_bands() {
    let x = Tensor::new(&[1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    let b = hfdo::haar_dwt(&x, &haar()).unwrap();
    assert_eq!(b.ll.data(), &[5.0]);
    assert_eq!(b.lh.data(), &[-1.0]);
    assert_eq!(b.hl.data(), &[-2.0]);
    assert_eq!(b.hh.data(), &[0.0]);
    assert_eq!(hfdo::haar_iwt(&b, &haar()).unwrap(), x);
    let half = hfdo::attenuate(&b, 0.5).unwrap();
    assert_eq!(half.ll.data(), &[2.5]);
}

#[test]
fn constant_input_has_no_detail() {
    let x = Tensor::<f32>::full(&[2, 4, 6], 1.75);
    let b = hfdo::haar_dwt(&x, &haar()).unwrap();
    assert!(b.ll.data().iter().all(|&v| v == 3.5));
    for t in [&b.lh, &b.hl, &b.hh] {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn matches_window_oracle() {
    for seed in 0..10 {
        let x = Tensor::<f32>::randn(&[1, 6, 6], 1.0, seed);
        let b = hfdo::haar_dwt(&x, &haar()).unwrap();
        let [ll, lh, hl, hh] = oracle::haar_dwt(&x);
        assert_eq!((b.ll, b.lh, b.hl, b.hh), (ll, lh, hl, hh));
    }
}

#[test]
fn attenuation_touches_only_ll() {
    let x = Tensor::<f64>::randn(&[3, 4, 4], 1.0, 5);
    let b = hfdo::haar_dwt(&x, &haar()).unwrap();
    assert_eq!(hfdo::attenuate(&b, 1.0).unwrap(), b);
    let z = hfdo::attenuate(&b, 0.0).unwrap();
    assert!(z.ll.data().iter().all(|&v| v == 0.0));
    assert_eq!((&z.lh, &z.hl, &z.hh), (&b.lh, &b.hl, &b.hh));
    assert!(matches!(hfdo::attenuate(&b, 1.5), Err(Error::Config(_))));
    assert!(matches!(hfdo::attenuate(&b, -0.1), Err(Error::Config(_))));
}

#[test]
fn perfect_reconstruction_and_energy() {
    for seed in 0..20 {
        let x = Tensor::<f32>::randn(&[3, 8, 8], 1.0, seed);
        let b = hfdo::haar_dwt(&x, &haar()).unwrap();
        let y = hfdo::haar_iwt(&hfdo::attenuate(&b, 1.0).unwrap(), &haar()).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-5);
        let e: f32 = [&b.ll, &b.lh, &b.hl, &b.hh].iter().map(|t| t.norm_sq()).sum();
        assert!((e - x.norm_sq()).abs() / x.norm_sq() < 1e-4);
        assert_eq!(oracle::haar_iwt(&[b.ll, b.lh, b.hl, b.hh]).max_abs_diff(&x).unwrap() < 1e-5, true);
    }
    let zero = WaveletBands {
        ll: Tensor::<f32>::zeros(&[2, 3, 3]),
        lh: Tensor::zeros(&[2, 3, 3]),
        hl: Tensor::zeros(&[2, 3, 3]),
        hh: Tensor::zeros(&[2, 3, 3]),
    };
    assert!(hfdo::haar_iwt(&zero, &haar()).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_errors() {
    let odd = Tensor::<f32>::ones(&[1, 3, 4]);
    assert!(matches!(hfdo::haar_dwt(&odd, &haar()), Err(Error::Contract(_))));
    let bad = WaveletBands {
        ll: Tensor::<f32>::zeros(&[1, 2, 2]),
        lh: Tensor::zeros(&[1, 2, 3]),
        hl: Tensor::zeros(&[1, 2, 2]),
        hh: Tensor::zeros(&[1, 2, 2]),
    };
    assert!(matches!(hfdo::haar_iwt(&bad, &haar()), Err(Error::Contract(_))));
}

#[test]
fn corrupted_kernels_break_reconstruction() {
    let mut k = haar();
    k.bands[3][0][0] = 0.4;
    let x = Tensor::<f32>::randn(&[2, 4, 4], 1.0, 1);
    let y = hfdo::haar_iwt(&hfdo::haar_dwt(&x, &k).unwrap(), &k).unwrap();
    assert!(y.max_abs_diff(&x).unwrap() > 1e-3);
}

fn module(cfg: HfdoConfig, channels: usize) -> (ParamStore<f64>, Hfdo) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Hfdo::new(&mut store, &mut rng, channels, cfg).unwrap();
    (store, m)
}

#[test]
fn context_projection_contract() {
    let (store, m) = module(HfdoConfig::default(), 32);
    let mut g = Graph::new();
    let f = g.constant(Tensor::randn(&[32, 64, 128], 1.0, 2));
    let (fs, pad) = m.context_project(&mut g, &store, f).unwrap();
    assert_eq!(g.shape(fs), &[16, 64, 128]);
    assert!(g.value(fs).data().iter().all(|&v| v >= 0.0));
    assert_eq!(pad, hfdo::PadInfo::default());
    let z = g.constant(Tensor::zeros(&[32, 4, 4]));
    let (fz, _) = m.context_project(&mut g, &store, z).unwrap();
    assert!(g.value(fz).data().iter().all(|&v| v == 0.0));

    let odd = g.constant(Tensor::randn(&[32, 5, 7], 1.0, 4));
    let (fo, pad) = m.context_project(&mut g, &store, odd).unwrap();
    assert_eq!(g.shape(fo), &[16, 6, 8]);
    assert!(pad.bottom && pad.right);
    let r = m.residual(&mut g, &store, fo, pad).unwrap();
    assert_eq!(g.shape(r), &[5, 7]);
    assert!(HfdoConfig { omega: 2.0, ..HfdoConfig::default() }.validate().is_err());
}

#[test]
fn zero_head_is_identity_and_relu_clamps() {
    let (store, m) = module(HfdoConfig::default(), 8);
    let mut g = Graph::new();
    let f = g.constant(Tensor::randn(&[8, 4, 6], 1.0, 5));
    let d = Tensor::uniform(&[16, 24], 0.0, 30.0, 6);
    let dv = g.constant(d.clone());
    let out = m.forward(&mut g, &store, f, dv).unwrap();
    assert_eq!(g.value(out), &d);

    let zero = g.constant(Tensor::zeros(&[4, 4]));
    let r = g.constant(Tensor::from_fn(&[1, 1], |_| -0.75));
    let out = hfdo::refine(&mut g, zero, r).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn refinement_gradients() {
    for context in [ContextMode::Linear, ContextMode::Conv3] {
        let cfg = HfdoConfig { context, context_channels: 4, ..HfdoConfig::default() };
        let (mut store, m) = module(cfg, 6);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            // non-zero head so the context path has a gradient
            let shape = store.value(id).shape().to_vec();
            if store.get(id).name.starts_with("hfdo.head.") && !store.get(id).name.ends_with("slope") {
                store.get_mut(id).value = Tensor::randn(&shape, 0.3, 40 + k as u64);
            }
        }
        let f = Tensor::randn(&[6, 4, 6], 1.0, 7);
        let d = Tensor::uniform(&[16, 24], 5.0, 30.0, 8);
        let proj = Tensor::randn(&[16, 24], 1.0, 9);
        let report = check_params(&mut store, 24, |g, s| {
            let (fv, dv) = (g.input(f.clone()), g.input(d.clone()));
            let y = m.forward(g, s, fv, dv)?;
            Ok::<_, Error>(ops::weighted_sum(g, y, &proj)?)
        })
        .unwrap();
        for r in report {
            assert!(r.rel_error < 1e-3, "{context:?} {}: {}", r.name, r.rel_error);
        }
        let err = rresm_numerics::gradcheck::check_inputs(&[f.clone(), d.clone()], |g, v| {
            let y = m.forward(g, &store, v[0], v[1])?;
            Ok::<_, Error>(ops::weighted_sum(g, y, &proj)?)
        })
        .unwrap();
        assert!(err < 1e-3, "{context:?} inputs: {err}");
    }
}
