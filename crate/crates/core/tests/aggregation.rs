use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rresm_core::aggregation::{self, Aggregation, InitialHead};
use rresm_core::mca::McaConfig;
use rresm_core::{oracle, Error};
use rresm_numerics::gradcheck::{check_inputs, check_params};
use rresm_numerics::{ops, Graph, ParamStore, Real, Tensor};

fn build<T: Real>(groups: usize) -> (ParamStore<T>, Aggregation, InitialHead) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let agg = Aggregation::new(&mut store, &mut rng, groups, McaConfig::default()).unwrap();
    let head = InitialHead::new(&mut store, &mut rng, groups);
    (store, agg, head)
}

#[test]
fn full_size_shapes_and_determinism() {
    let (store, agg, head) = build::<f32>(16);
    let cv = Tensor::randn(&[16, 48, 64, 128], 1.0, 1);
    let run = || {
        let mut g = Graph::inference();
        let v = g.constant(cv.clone());
        let s = agg.forward(&mut g, &store, v).unwrap();
        let d = head.forward(&mut g, &store, v).unwrap();
        (g.value(s).clone(), g.value(d).clone())
    };
    let (s, d) = run();
    assert_eq!(s.shape(), &[1, 48, 64, 128]);
    assert_eq!(d.shape(), &[64, 128]);
    assert!(d.min_value() >= 0.0 && d.max_value() <= 47.0);
    assert_eq!(run(), (s, d));
}

#[test]
fn rejects_indivisible_volumes() {
    let (store, agg, _) = build::<f32>(16);
    let mut g = Graph::inference();
    let v = g.constant(Tensor::zeros(&[16, 6, 8, 8]));
    assert!(matches!(agg.forward(&mut g, &store, v), Err(Error::Shape(_))));
}

#[test]
fn soft_argmax_limits() {
    let mut scores = Tensor::<f64>::zeros(&[1, 48, 2, 3]);
    for p in 0..6 {
        scores.set(&[0, 7, p / 3, p % 3], 40.0);
    }
    let d = aggregation::soft_argmax_values(&scores).unwrap();
    assert!(d.data().iter().all(|&v| (v - 7.0).abs() < 1e-3));
    let u = aggregation::soft_argmax_values(&Tensor::<f32>::full(&[1, 48, 2, 2], 0.3)).unwrap();
    assert!(u.data().iter().all(|&v| (v - 23.5).abs() < 1e-4));
}

#[test]
fn soft_argmax_matches_direct_formula() {
    for seed in 0..10 {
        let s = Tensor::<f32>::randn(&[5, 3, 4], 2.0, seed);
        let d = aggregation::soft_argmax_values(&s).unwrap();
        assert_eq!(d, oracle::soft_argmax(&s));
    }
}

#[test]
fn soft_argmax_shift_invariance_and_gradient() {
    let s = Tensor::<f64>::randn(&[6, 2, 3], 1.5, 3);
    let shift = Tensor::<f64>::randn(&[2, 3], 5.0, 4);
    let shifted = Tensor::from_fn(&[6, 2, 3], |i| s.data()[i] + shift.data()[i % 6]);
    let a = aggregation::soft_argmax_values(&s).unwrap();
    let b = aggregation::soft_argmax_values(&shifted).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
    for seed in 0..20 {
        let s = Tensor::randn(&[1, 6, 2, 3], 1.5, 50 + seed);
        let w = Tensor::randn(&[2, 3], 1.0, 80 + seed);
        let err = check_inputs(&[s], |g, v| {
            let d = aggregation::soft_argmax(g, v[0])?;
            Ok::<_, Error>(ops::weighted_sum(g, d, &w)?)
        })
        .unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn disparity_upsampling() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[3, 5], 5.0));
    let up = aggregation::upsample_disparity(&mut g, c).unwrap();
    assert_eq!(g.shape(up), &[12, 20]);
    assert!(g.value(up).data().iter().all(|&v| (v - 20.0).abs() < 1e-12));
    let x = Tensor::<f64>::randn(&[4, 6], 3.0, 9);
    let xv = g.constant(x.clone());
    let up = aggregation::upsample_disparity(&mut g, xv).unwrap();
    let want = oracle::bilinear_upsample(&x, 4, 4.0);
    assert!(g.value(up).max_abs_diff(&want).unwrap() < 1e-5);
}

#[test]
fn aggregation_gradients() {
    let (mut store, agg, _) = build::<f64>(16);
    let out_w = agg.mca.bimamba.out_w;
    let w = store.value(out_w).scale(30.0);
    store.get_mut(out_w).value = w;
    let cv = Tensor::randn(&[16, 8, 8, 8], 1.0, 31);
    let w = Tensor::randn(&[8, 8], 1.0, 32);
    let report = check_params(&mut store, 12, |g, s| {
        let v = g.constant(cv.clone());
        let scores = agg.forward(g, s, v)?;
        let d = aggregation::soft_argmax(g, scores)?;
        Ok::<_, Error>(ops::weighted_sum(g, d, &w)?)
    })
    .unwrap();
    // the head bias shifts every score equally, so soft-argmax ignores it
    for r in report.iter().filter(|r| r.name.starts_with("agg.") && r.name != "agg.head.bias") {
        assert!(r.rel_error < 1e-3, "{}: {}", r.name, r.rel_error);
    }
    let small = Tensor::randn(&[16, 4, 4, 4], 1.0, 33);
    let w4 = Tensor::randn(&[4, 4], 1.0, 34);
    let err = check_inputs(&[small], |g, v| {
        let scores = agg.forward(g, &store, v[0])?;
        let d = aggregation::soft_argmax(g, scores)?;
        Ok::<_, Error>(ops::weighted_sum(g, d, &w4)?)
    })
    .unwrap();
    assert!(err < 1e-3, "volume gradient {err}");
}
