use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rresm_core::feature_net::{self, FeatureNet};
use rresm_core::Error;
use rresm_numerics::{ops, Graph, ParamStore, Tensor};

fn net() -> (ParamStore<f32>, FeatureNet) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let f = FeatureNet::new(&mut store, &mut rng, 32).unwrap();
    (store, f)
}

#[test]
fn pyramid_and_fused_shapes() {
    let (store, f) = net();
    let mut g = Graph::inference();
    let img = g.constant(Tensor::uniform(&[3, 256, 512], 0.0, 1.0, 1));
    let (p, feat) = f.forward(&mut g, &store, img).unwrap();
    assert_eq!(g.shape(p.s4), &[16, 64, 128]);
    assert_eq!(g.shape(p.s8), &[24, 32, 64]);
    assert_eq!(g.shape(p.s16), &[32, 16, 32]);
    assert_eq!(g.shape(feat), &[32, 64, 128]);
    assert_eq!(g.shape(feat)[0] % 16, 0);
    assert_eq!(feature_net::context_feature(feat), feat);
}

#[test]
fn zero_image_is_finite_and_runs_are_identical() {
    let (store, f) = net();
    let run = |img: &Tensor<f32>| {
        let mut g = Graph::inference();
        let v = g.constant(img.clone());
        let (_, feat) = f.forward(&mut g, &store, v).unwrap();
        g.value(feat).clone()
    };
    assert!(run(&Tensor::zeros(&[3, 32, 64])).all_finite());
    let img = Tensor::uniform(&[3, 32, 64], 0.0, 1.0, 2);
    assert_eq!(run(&img), run(&img));
}

#[test]
fn siamese_branches_share_weights() {
    let (store, f) = net();
    let mut g = Graph::new();
    let img = Tensor::uniform(&[3, 32, 48], 0.0, 1.0, 3);
    let (a, b) = (g.constant(img.clone()), g.constant(img));
    let (_, fa) = f.forward(&mut g, &store, a).unwrap();
    let (_, fb) = f.forward(&mut g, &store, b).unwrap();
    assert_eq!(g.value(fa), g.value(fb));
}

#[test]
fn indivisible_sizes_are_rejected() {
    let (store, f) = net();
    let mut g = Graph::inference();
    let img = g.constant(Tensor::zeros(&[3, 40, 64]));
    match f.encode(&mut g, &store, img) {
        Err(Error::Shape(m)) => assert!(m.contains("divisible by 16"), "{m}"),
        other => panic!("unexpected {other:?}"),
    }
}

/// Crops columns `[start, start + w)` of a `3×H×W` image.
fn crop(img: &Tensor<f32>, start: usize, w: usize) -> Tensor<f32> {
    let mut g = Graph::inference();
    let v = g.constant(img.clone());
    let c = ops::slice(&mut g, v, 2, start, w).unwrap();
    g.value(c).clone()
}

fn interior_shift_error(a: &Tensor<f32>, b: &Tensor<f32>, shift: usize, margin: usize) -> f32 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut worst = 0.0f32;
    for ch in 0..c {
        for y in 0..h {
            for x in margin..w - margin {
                worst = worst.max((b.at(&[ch, y, x]) - a.at(&[ch, y, x - shift])).abs());
            }
        }
    }
    worst
}

#[test]
fn horizontal_translation_covariance() {
    let (store, f) = net();
    let wide = Tensor::uniform(&[3, 64, 288], 0.0, 1.0, 4);
    let w = 256;
    let features = |img: Tensor<f32>| {
        let mut g = Graph::inference();
        let v = g.constant(img);
        let (p, feat) = f.forward(&mut g, &store, v).unwrap();
        (g.value(p.s4).clone(), g.value(feat).clone())
    };
    let (s4_a, f_a) = features(crop(&wide, 32, w));
    // a 4 px shift moves the quarter-resolution encoder output by one column
    let (s4_b, _) = features(crop(&wide, 28, w));
    assert!(interior_shift_error(&s4_a, &s4_b, 1, 8) < 1e-4);
    // the fused feature also mixes 1/16 information, so it needs a 16 px shift
    let (_, f_c) = features(crop(&wide, 16, w));
    assert!(interior_shift_error(&f_a, &f_c, 4, 24) < 1e-4);
}
