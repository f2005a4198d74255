//! Finite-difference oracles for every differentiable op. Analytic backward
//! passes must agree with central differences at 64-bit to 1e−6 relative
//! error (with the checker's small-gradient floor). Full networks are
//! checked at a smooth parameter point to 1e−4.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::rand_tensor;
use rnvkit_core::nn::ops;

const TOL: f64 = 1e-6;
const NET_TOL: f64 = 1e-4;

#[test]
fn conv2d_gradients_match_finite_differences() {
    let rep = common::check_conv2d();
    assert!(rep.max_rel_err < TOL, "conv2d: {rep:?}");
}

#[test]
fn conv2d_strided_gradients_match() {
    let rep = common::check_conv2d_strided();
    assert!(rep.max_rel_err < TOL, "strided conv2d: {rep:?}");
}

#[test]
fn depthwise_conv_gradients_match() {
    let rep = common::check_depthwise();
    assert!(rep.max_rel_err < TOL, "depthwise: {rep:?}");
}

#[test]
fn se_block_gradients_match() {
    let rep = common::check_se_block();
    assert!(rep.max_rel_err < TOL, "se block: {rep:?}");
}

#[test]
fn maxpool_gradients_match() {
    let rep = common::check_maxpool();
    assert!(rep.max_rel_err < TOL, "maxpool: {rep:?}");
}

#[test]
fn upsample_gradients_match() {
    let rep = common::check_upsample();
    assert!(rep.max_rel_err < TOL, "upsample: {rep:?}");
}

#[test]
fn activation_gradients_match() {
    let relu = common::check_relu();
    assert!(relu.max_rel_err < TOL, "relu: {relu:?}");
    let sig = common::check_sigmoid();
    assert!(sig.max_rel_err < TOL, "sigmoid: {sig:?}");
}

#[test]
fn concat_gradients_match() {
    let rep = common::check_concat();
    assert!(rep.max_rel_err < TOL, "concat: {rep:?}");
}

#[test]
fn vri_net_full_gradient_check() {
    let rep = common::check_vri_net();
    assert!(rep.max_rel_err < NET_TOL, "vri net: {rep:?}");
}

#[test]
fn rnv_net_full_gradient_check() {
    let rep = common::check_rnv_net();
    assert!(rep.max_rel_err < NET_TOL, "rnv net: {rep:?}");
}

#[test]
fn forward_f32_f64_agreement() {
    // The same small conv/se/pool chain evaluated in both precisions agrees
    // to 1e-4 relative on random inputs.
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let x = rand_tensor(&[1, 4, 8, 8], &mut rng);
    let w = rand_tensor(&[8, 4, 3, 3], &mut rng);
    let b = rand_tensor(&[8], &mut rng);
    let w1 = rand_tensor(&[2, 8], &mut rng);
    let w2 = rand_tensor(&[8, 2], &mut rng);

    let y64 = {
        let c = ops::conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        let a = ops::relu(&c);
        let (s, _) = ops::se_forward(&a, &w1, &w2).unwrap();
        let (p, _) = ops::maxpool2_forward(&s).unwrap();
        ops::sigmoid(&p)
    };
    let y32 = {
        let x = x.cast::<f32>();
        let w = w.cast::<f32>();
        let b = b.cast::<f32>();
        let w1 = w1.cast::<f32>();
        let w2 = w2.cast::<f32>();
        let c = ops::conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        let a = ops::relu(&c);
        let (s, _) = ops::se_forward(&a, &w1, &w2).unwrap();
        let (p, _) = ops::maxpool2_forward(&s).unwrap();
        ops::sigmoid(&p)
    };
    for (&a, &b) in y64.data().iter().zip(y32.data()) {
        let b = b as f64;
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        assert!(rel < 1e-4, "{a} vs {b}");
    }
}
