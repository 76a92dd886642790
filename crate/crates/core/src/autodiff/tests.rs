use std::sync::Arc;

use super::*;

fn lcg(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), lcg(seed, n))
}

/// Central-difference gradient of `f` at `x`.
fn fd_grad(f: &dyn Fn(&Var) -> Var, x: &Tensor, eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let fp = f(&Var::constant(Tensor::new(x.shape().to_vec(), plus))).item();
        let fm = f(&Var::constant(Tensor::new(x.shape().to_vec(), minus))).item();
        out.push((fp - fm) / (2.0 * eps));
    }
    out
}

fn check_grad(name: &str, f: &dyn Fn(&Var) -> Var, x: Tensor) {
    let leaf = Var::leaf(x.clone());
    let y = f(&leaf);
    let g = grad(&y, &[&leaf], false).remove(0);
    let fd = fd_grad(f, &x, 1e-6);
    for (i, (a, b)) in g.value().data().iter().zip(&fd).enumerate() {
        assert!(
            (a - b).abs() <= 1e-6 * (1.0 + b.abs()),
            "{name}: grad[{i}] analytic {a} vs numeric {b}"
        );
    }
}

#[test]
fn first_order_gradients_match_finite_differences() {
    let w = Var::constant(rand_tensor(7, &[3, 4]));
    check_grad("matmul", &|x| x.matmul(&w).square().sum(), rand_tensor(1, &[2, 3]));
    check_grad("matmul_ta", &|x| x.matmul_t(&w, true, false).sigmoid().sum(), rand_tensor(2, &[3, 2]));
    check_grad("matmul_tb", &|x| w.matmul_t(x, false, true).exp().sum(), rand_tensor(3, &[5, 4]));
    check_grad(
        "broadcast_mul",
        &|x| x.mul(&Var::constant(rand_tensor(9, &[2, 1, 3]))).swish().sum(),
        rand_tensor(4, &[2, 4, 3]),
    );
    check_grad(
        "broadcast_lhs",
        &|x| Var::constant(rand_tensor(10, &[2, 4, 3])).mul(x).elu().sum(),
        rand_tensor(5, &[4, 1]),
    );
    check_grad("elu", &|x| x.scale(3.0).elu().square().sum(), rand_tensor(6, &[10]));
    check_grad("powf", &|x| x.square().add_scalar(0.5).powf(-0.5).sum(), rand_tensor(8, &[6]));
    check_grad(
        "unfold",
        &|x| x.unfold(5, 2, 2).sigmoid().sum(),
        rand_tensor(11, &[2, 9, 3]),
    );
    check_grad(
        "gather_scatter",
        &|x| {
            let idx = Arc::new(vec![0, 2, 2, 1]);
            x.gather_rows(idx.clone()).square().scatter_add_rows(idx, 3).exp().sum()
        },
        rand_tensor(12, &[3, 2]),
    );
    check_grad(
        "narrow_concat_permute",
        &|x| {
            let a = x.narrow(1, 1, 2);
            let b = x.permute(&[1, 0]).reshape(&[2, 3]);
            Var::concat(&[a.square(), b.sigmoid()], 1).sum_axis_keep(0).square().sum()
        },
        rand_tensor(13, &[2, 3]),
    );
    let mask = Arc::new(vec![true, false, true, false, false, true]);
    check_grad(
        "select",
        &|x| Var::select(mask.clone(), &x.square(), &x.exp()).sum(),
        rand_tensor(14, &[6]),
    );
}

#[test]
fn second_order_matches_finite_differences_of_gradient() {
    // g(x) = d/dx f(x); check d/dx [v . g(x)] against FD of v . g
    let w = Var::constant(rand_tensor(21, &[4, 4]));
    let f = |x: &Var| x.matmul(&w).swish().reshape(&[1, 5, 4]).unfold(3, 1, 1).elu().square().sum();
    let v = rand_tensor(22, &[1, 5, 4]);
    let vdotg = |x: &Var| {
        let leaf = if x.requires_grad() { x.clone() } else { Var::leaf(x.value().clone()) };
        let g = grad(&f(&leaf.reshape(&[5, 4])).mul(&Var::scalar(1.0)), &[&leaf], true).remove(0);
        g.mul(&Var::constant(v.clone())).sum()
    };
    let x0 = rand_tensor(23, &[1, 5, 4]);
    let leaf = Var::leaf(x0.clone());
    let hv = grad(&vdotg(&leaf), &[&leaf], false).remove(0);
    let fd = fd_grad(&|x| vdotg(x), &x0, 1e-5);
    for (a, b) in hv.value().data().iter().zip(&fd) {
        assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "hvp {a} vs {b}");
    }
}

#[test]
fn gradient_through_gradient_step_reaches_parameters() {
    // x1 = x0 - a * d/dx (theta * x^2 / 2) = x0 (1 - a theta); loss = x1^2
    let theta = Var::leaf(Tensor::scalar(0.7));
    let x0 = Var::leaf(Tensor::scalar(1.5));
    let e = theta.mul(&x0.square()).scale(0.5);
    let gx = grad(&e, &[&x0], true).remove(0);
    let x1 = x0.sub(&gx.scale(0.3));
    let loss = x1.square();
    let dtheta = grad(&loss, &[&theta], false).remove(0).item();
    // d/dtheta (x0 (1 - a theta))^2 = 2 x0^2 (1 - a theta)(-a)
    let expected = 2.0 * 1.5 * 1.5 * (1.0 - 0.3 * 0.7) * -0.3;
    assert!((dtheta - expected).abs() < 1e-12);
}

#[test]
fn unrelated_inputs_get_zero_gradient() {
    let a = Var::leaf(Tensor::scalar(2.0));
    let b = Var::leaf(Tensor::full(&[3], 1.0));
    let y = a.square();
    let g = grad(&y, &[&a, &b], false);
    assert_eq!(g[0].item(), 4.0);
    assert_eq!(g[1].value().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn no_grad_guard_builds_no_graph() {
    let a = Var::leaf(Tensor::scalar(2.0));
    let y = {
        let _g = NoGradGuard::new();
        a.square()
    };
    assert!(!y.requires_grad());
    assert!(a.square().requires_grad());
}
