//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use treereg::nn::{Mlp, OutputHead, ParamVector};
use treereg::regularizer::{penalty, penalty_grad, Regularizer, RegularizerKind, Surrogate, SurrogateConfig, SurrogateSet};
use treereg::Matrix;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Projection onto the simplex by enumerating every support set.
pub fn simplex_projection_oracle(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let tau = (idx.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / idx.len() as f64;
        let mut p = vec![0.0; n];
        let mut feasible = true;
        for &i in &idx {
            p[i] = z[i] - tau;
            if p[i] < 0.0 {
                feasible = false;
            }
        }
        if !feasible {
            continue;
        }
        let d: f64 = p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, p));
        }
    }
    best.unwrap().1
}

/// Small network with every parameter drawn from U(-1, 1), so no unit sits on the
/// ReLU kink.
pub fn random_model(rng: &mut ChaCha8Rng, head: OutputHead) -> Mlp {
    let depth = rng.random_range(1..=3);
    let mut sizes = vec![rng.random_range(1..=4)];
    for _ in 0..depth - 1 {
        sizes.push(rng.random_range(2..=6));
    }
    sizes.push(if head == OutputHead::Identity && rng.random_bool(0.5) { 1 } else { rng.random_range(1..=3) });
    let model = Mlp::new(&sizes, head, rng.random()).unwrap();
    let params = (0..model.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    model.with_params(ParamVector::new(params)).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, cols: usize, binary: bool) -> Matrix {
    let data = (0..n * cols)
        .map(|_| if binary { f64::from(rng.random_bool(0.5)) } else { rng.random_range(-2.0..2.0) })
        .collect();
    Matrix::from_vec(n, cols, data).unwrap()
}

/// Worst relative error between `backward` and central differences of `loss`.
pub fn param_gradient_error(model: &Mlp, x: &Matrix, y: &Matrix) -> f64 {
    let grad = model.backward(x, y, None).unwrap();
    let mut worst = 0.0f64;
    for i in 0..model.num_params() {
        let mut plus = model.params().clone();
        plus[i] += FD_STEP;
        let mut minus = model.params().clone();
        minus[i] -= FD_STEP;
        let lp = model.with_params(plus).unwrap().loss(x, y).unwrap();
        let lm = model.with_params(minus).unwrap().loss(x, y).unwrap();
        worst = worst.max(rel_err(grad[i], (lp - lm) / (2.0 * FD_STEP)));
    }
    worst
}

/// Worst relative error between `grad_wrt_input` and central differences.
pub fn input_gradient_error(model: &Mlp, x: &[f64]) -> f64 {
    let g = model.grad_wrt_input(x).unwrap();
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        let mut p = x.to_vec();
        p[j] += FD_STEP;
        let mut m = x.to_vec();
        m[j] -= FD_STEP;
        let fd = (model.forward_scalar(&p).unwrap() - model.forward_scalar(&m).unwrap()) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(g[j], fd));
    }
    worst
}

/// Surrogates with a large output bias so every estimate stays clear of the clamp.
pub fn positive_surrogates(dim: usize, n: usize, seed: u64) -> SurrogateSet {
    let surrogates = (0..n)
        .map(|r| {
            let mut net = Mlp::new(&[dim, 6, 1], OutputHead::Identity, seed + r as u64).unwrap();
            let last = net.num_params() - 1;
            net.params_mut()[last] = 4.0 + r as f64 * 0.7;
            Some(Surrogate::from_net(net).unwrap())
        })
        .collect();
    SurrogateSet::from_surrogates(surrogates, SurrogateConfig::default())
}

/// Worst relative error between `penalty_grad` and central differences of the
/// penalty with its region weights frozen at `theta`.
pub fn penalty_gradient_error(kind: RegularizerKind, set: &SurrogateSet, theta: &ParamVector) -> f64 {
    let (_, grad) = penalty_grad(&Regularizer::new(kind, 1.0), Some(set), theta).unwrap();
    let est = set.estimates(theta).unwrap();
    let (_, weights) = penalty(kind, &est, 1.0).unwrap();
    let objective = |t: &ParamVector| -> f64 {
        let e = set.estimates(t).unwrap();
        weights.iter().zip(&e).map(|(w, v)| w * v.max(0.0)).sum()
    };
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let mut p = theta.clone();
        p[i] += FD_STEP;
        let mut m = theta.clone();
        m[i] -= FD_STEP;
        let fd = (objective(&p) - objective(&m)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grad[i], fd));
    }
    worst
}
