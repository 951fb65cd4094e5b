#![allow(dead_code)]

use l0sparse::autodiff::{Graph, Var};
use l0sparse::Tensor;

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64, m: f64, fm: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1) + rec(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    rec(f, a, fa, b, fb, m, fm, whole, tol, 50)
}

/// Builds a scalar loss from leaf values; used for finite-difference checks.
pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

/// Analytic gradients of `build` at `inputs`, one tensor per input.
pub fn analytic_grads(inputs: &[Tensor], build: &Builder) -> Vec<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    vars.iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect()
}

pub fn loss_at(inputs: &[Tensor], build: &Builder) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.value(loss).item()
}

/// Central differences with step `h` for every coordinate of every input.
pub fn numeric_grads(inputs: &[Tensor], build: &Builder, h: f64) -> Vec<Tensor> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            grad.data_mut()[j] = (loss_at(&plus, build) - loss_at(&minus, build)) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Largest relative mismatch; differences below `abs_floor` count as agreement.
pub fn max_grad_error(a: &[Tensor], b: &[Tensor], abs_floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.data().iter().zip(y.data()) {
            let diff = (p - q).abs();
            if diff > abs_floor {
                worst = worst.max(diff / p.abs().max(q.abs()));
            }
        }
    }
    worst
}
