//! Finite-difference gradient oracles shared by the per-op gradient suite
//! and the acceptance suite. Each check builds its own inputs from a fixed
//! seed and returns the checker report; callers assert on `max_rel_err`.
#![allow(dead_code)] // the two test targets use different subsets

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rnvkit_core::nn::gradcheck::{
    grad_check, grad_check_model, sample_indices, GradCheckReport,
};
use rnvkit_core::nn::ops;
use rnvkit_core::nn::Tensor;

pub const STEP: f64 = 1e-5;

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Fixed random projection so the scalar loss sees every output element.
pub fn proj(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    rand_tensor(shape, rng)
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn picks_for(tensors: &[&Tensor<f64>], per_tensor: usize) -> Vec<(usize, usize)> {
    let mut picks = Vec::new();
    for (pi, t) in tensors.iter().enumerate() {
        for ei in sample_indices(t.len(), per_tensor) {
            picks.push((pi, ei));
        }
    }
    picks
}

/// Move a full network to a kink-free point in parameter space.
///
/// Rectifier nets are only piecewise smooth: a unit sitting exactly at zero
/// (dead ReLU) or a tied pooling window puts the loss on a kink, where
/// central differences straddle two linear pieces and disagree with the
/// one-sided analytic gradient by O(1). With positive inputs, making every
/// weight positive keeps every pre-activation strictly positive, so the
/// whole net is smooth around the check point and every parameter still
/// participates in the loss. Weights are damped so activations stay O(1)
/// through the depth and the head stays out of sigmoid saturation.
pub fn positivize(params: &mut [&mut Tensor<f64>], weight_scale: f64, bias: f64) {
    for t in params.iter_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v = bias;
            }
        } else {
            for v in t.data_mut() {
                *v = v.abs() * weight_scale + 1e-3;
            }
        }
    }
}

pub fn rand_tensor_pos(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.2..1.0)).collect()).unwrap()
}

// ============================================================
// Per-op checks
// ============================================================

pub fn check_conv2d() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut x = rand_tensor(&[1, 2, 5, 5], &mut rng);
    let mut w = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let mut b = rand_tensor(&[3], &mut rng);
    let r = proj(&[1, 3, 5, 5], &mut rng);

    let y = ops::conv2d_forward(&x, &w, &b, 1, 1).unwrap();
    let (gx, gw, gb) = ops::conv2d_backward(&x, &w, &r, 1, 1).unwrap();
    assert_eq!(y.shape(), r.shape());

    let mut params = [&mut x, &mut w, &mut b];
    let analytic = [gx, gw, gb];
    let picks = picks_for(&[&params[0].clone(), &params[1].clone(), &params[2].clone()], 20);
    grad_check(&mut params, &analytic, &picks, STEP, |ps| {
        dot(&ops::conv2d_forward(ps[0], ps[1], ps[2], 1, 1).unwrap(), &r)
    })
}

pub fn check_conv2d_strided() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut x = rand_tensor(&[1, 2, 6, 6], &mut rng);
    let mut w = rand_tensor(&[2, 2, 3, 3], &mut rng);
    let mut b = rand_tensor(&[2], &mut rng);
    let y = ops::conv2d_forward(&x, &w, &b, 2, 1).unwrap();
    let r = proj(y.shape(), &mut rng);
    let (gx, gw, gb) = ops::conv2d_backward(&x, &w, &r, 2, 1).unwrap();

    let mut params = [&mut x, &mut w, &mut b];
    let analytic = [gx, gw, gb];
    let picks = picks_for(&[&params[0].clone(), &params[1].clone(), &params[2].clone()], 15);
    grad_check(&mut params, &analytic, &picks, STEP, |ps| {
        dot(&ops::conv2d_forward(ps[0], ps[1], ps[2], 2, 1).unwrap(), &r)
    })
}

pub fn check_depthwise() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut x = rand_tensor(&[1, 3, 5, 5], &mut rng);
    let mut w = rand_tensor(&[3, 1, 3, 3], &mut rng);
    let r = proj(&[1, 3, 5, 5], &mut rng);
    let (gx, gw) = ops::depthwise_conv2d_backward(&x, &w, &r, 1).unwrap();

    let mut params = [&mut x, &mut w];
    let analytic = [gx, gw];
    let picks = picks_for(&[&params[0].clone(), &params[1].clone()], 20);
    grad_check(&mut params, &analytic, &picks, STEP, |ps| {
        dot(&ops::depthwise_conv2d_forward(ps[0], ps[1], 1).unwrap(), &r)
    })
}

pub fn check_se_block() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut x = rand_tensor(&[1, 8, 4, 4], &mut rng);
    let mut w1 = rand_tensor(&[2, 8], &mut rng);
    let mut w2 = rand_tensor(&[8, 2], &mut rng);
    let r = proj(&[1, 8, 4, 4], &mut rng);
    let (_, cache) = ops::se_forward(&x, &w1, &w2).unwrap();
    let (gx, gw1, gw2) = ops::se_backward(&x, &w1, &w2, &cache, &r).unwrap();

    let mut params = [&mut x, &mut w1, &mut w2];
    let analytic = [gx, gw1, gw2];
    let picks = picks_for(&[&params[0].clone(), &params[1].clone(), &params[2].clone()], 25);
    grad_check(&mut params, &analytic, &picks, STEP, |ps| {
        dot(&ops::se_forward(ps[0], ps[1], ps[2]).unwrap().0, &r)
    })
}

pub fn check_maxpool() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    // Well-separated values keep finite differences away from tie flips.
    let n = 2 * 4 * 4;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.37).collect();
    // deterministic shuffle
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    let mut x = Tensor::from_vec(&[1, 2, 4, 4], vals).unwrap();
    let r = proj(&[1, 2, 2, 2], &mut rng);
    let (_, arg) = ops::maxpool2_forward(&x).unwrap();
    let gx = ops::maxpool2_backward(&arg, &r, &[1, 2, 4, 4]).unwrap();

    let mut params = [&mut x];
    let analytic = [gx];
    let picks = picks_for(&[&params[0].clone()], 32);
    grad_check(&mut params, &analytic, &picks, STEP, |ps| {
        dot(&ops::maxpool2_forward(ps[0]).unwrap().0, &r)
    })
}

pub fn check_upsample() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut x = rand_tensor(&[1, 2, 3, 3], &mut rng);
    let r = proj(&[1, 2, 6, 6], &mut rng);
    let gx = ops::upsample2_backward(&r).unwrap();

    let mut params = [&mut x];
    let analytic = [gx];
    let picks = picks_for(&[&params[0].clone()], 18);
    grad_check(&mut params, &analytic, &picks, STEP, |ps| {
        dot(&ops::upsample2_forward(ps[0]).unwrap(), &r)
    })
}

pub fn check_relu() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut x = rand_tensor(&[1, 1, 4, 8], &mut rng);
    let r = proj(&[1, 1, 4, 8], &mut rng);
    let y = ops::relu(&x);
    let gx = ops::relu_backward(&y, &r);

    let mut params = [&mut x];
    let analytic = [gx];
    let picks = picks_for(&[&params[0].clone()], 32);
    grad_check(&mut params, &analytic, &picks, STEP, |ps| {
        dot(&ops::relu(ps[0]), &r)
    })
}

pub fn check_sigmoid() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut x = rand_tensor(&[1, 1, 4, 8], &mut rng);
    let r = proj(&[1, 1, 4, 8], &mut rng);
    let s = ops::sigmoid(&x);
    let gx = ops::sigmoid_backward(&s, &r);

    let mut params = [&mut x];
    let analytic = [gx];
    let picks = picks_for(&[&params[0].clone()], 32);
    grad_check(&mut params, &analytic, &picks, STEP, |ps| {
        dot(&ops::sigmoid(ps[0]), &r)
    })
}

pub fn check_concat() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let mut a = rand_tensor(&[1, 2, 3, 3], &mut rng);
    let mut b = rand_tensor(&[1, 3, 3, 3], &mut rng);
    let r = proj(&[1, 5, 3, 3], &mut rng);
    let parts = ops::split_channels(&r, &[2, 3]).unwrap();

    let mut params = [&mut a, &mut b];
    let analytic = [parts[0].clone(), parts[1].clone()];
    let picks = picks_for(&[&params[0].clone(), &params[1].clone()], 15);
    grad_check(&mut params, &analytic, &picks, STEP, |ps| {
        dot(&ops::concat_channels(&[ps[0], ps[1]]).unwrap(), &r)
    })
}

/// Every differentiable op, name + report.
pub fn op_checks() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("conv2d", check_conv2d()),
        ("conv2d_strided", check_conv2d_strided()),
        ("depthwise_conv2d", check_depthwise()),
        ("se_block", check_se_block()),
        ("maxpool2", check_maxpool()),
        ("upsample2", check_upsample()),
        ("relu", check_relu()),
        ("sigmoid", check_sigmoid()),
        ("concat_split", check_concat()),
    ]
}

// ============================================================
// Full-network checks (tiny configs, smooth point)
// ============================================================

pub fn check_vri_net() -> GradCheckReport {
    use std::cell::RefCell;

    use rnvkit_core::vri::{loss_s, VriNet, VriNetConfig};

    let cfg = VriNetConfig {
        stages: 2,
        base_channels: 2,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let mut net = VriNet::<f64>::new(&cfg, &mut rng).unwrap();
    positivize(&mut net.params_mut(), 0.25, 0.05);
    let x = rand_tensor_pos(&[1, 6, 8, 8], &mut rng);
    let y = Tensor::from_vec(
        &[1, 1, 8, 8],
        (0..64).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();

    let (prob, cache) = net.forward_cached(&x).unwrap();
    let (_, dloss, _) = loss_s(&prob, &y, 0.5).unwrap();
    let grads = net.backward(&cache, &dloss).unwrap();
    let analytic: Vec<Tensor<f64>> = grads.params().iter().map(|(_, t)| (*t).clone()).collect();

    // Sample a handful of elements from every parameter tensor.
    let mut picks = Vec::new();
    for (pi, (_, t)) in net.params().iter().enumerate() {
        for ei in sample_indices(t.len(), 4) {
            picks.push((pi, ei));
        }
    }
    let n_picks = picks.len();

    let cell = RefCell::new(net);
    let rep = grad_check_model(
        &picks,
        &analytic,
        STEP,
        |pi, ei| cell.borrow_mut().params_mut()[pi].data()[ei],
        |pi, ei, v| cell.borrow_mut().params_mut()[pi].data_mut()[ei] = v,
        || {
            let p = cell.borrow().forward(&x).unwrap();
            loss_s(&p, &y, 0.5).unwrap().0
        },
    );
    assert_eq!(rep.n_checked, n_picks);
    rep
}

pub fn check_rnv_net() -> GradCheckReport {
    use std::cell::RefCell;

    use rnvkit_core::rnv::{loss_d, RnvNet, RnvNetConfig};

    let cfg = RnvNetConfig {
        stages: 2,
        base_channels: 4,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut net = RnvNet::<f64>::new(&cfg, &mut rng).unwrap();
    positivize(&mut net.params_mut(), 0.25, 0.05);
    let xo = rand_tensor_pos(&[1, 2, 8, 8], &mut rng);
    let xa = rand_tensor_pos(&[1, 3, 8, 8], &mut rng);
    let y = Tensor::from_vec(
        &[1, 1, 8, 8],
        (0..64).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();

    let (prob, cache) = net.forward_cached(&xo, &xa).unwrap();
    let (_, dloss) = loss_d(&prob, &y, 0.4, 0.6).unwrap();
    let grads = net.backward(&cache, &dloss).unwrap();
    let analytic: Vec<Tensor<f64>> = grads.params().iter().map(|(_, t)| (*t).clone()).collect();

    let mut picks = Vec::new();
    for (pi, (_, t)) in net.params().iter().enumerate() {
        for ei in sample_indices(t.len(), 4) {
            picks.push((pi, ei));
        }
    }
    let n_picks = picks.len();

    let cell = RefCell::new(net);
    let rep = grad_check_model(
        &picks,
        &analytic,
        STEP,
        |pi, ei| cell.borrow_mut().params_mut()[pi].data()[ei],
        |pi, ei, v| cell.borrow_mut().params_mut()[pi].data_mut()[ei] = v,
        || {
            let p = cell.borrow().forward(&xo, &xa).unwrap();
            loss_d(&p, &y, 0.4, 0.6).unwrap().0
        },
    );
    assert_eq!(rep.n_checked, n_picks);
    rep
}
