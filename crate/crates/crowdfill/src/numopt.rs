//! Dense limited-memory quasi-Newton minimizer.
//!
//! One BFGS core serves three callers: the direct trajectory optimizer
//! (projection onto the speed-feasible set after every line search), the GP
//! hyperparameter fit (box bounds in log-space), and unconstrained oracle
//! checks in tests. Problems here are tiny (a handful to a few hundred
//! coordinates), so every line-search trial evaluates value and gradient
//! together through a single closure.

use crate::{Error, Result};
use std::collections::VecDeque;

#[derive(Clone, Copy, Debug)]
pub struct MinimizeParams {
    /// Number of curvature pairs kept for the two-loop recursion.
    pub memory: usize,
    /// Accepted-step budget.
    pub max_iters: usize,
    /// Convergence threshold on the projected-gradient infinity norm.
    pub grad_tol: f64,
    /// Stop when an accepted step moves no coordinate by more than this.
    pub step_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Backtracking shrink factor, in (0, 1).
    pub shrink: f64,
    /// Trials per line search before declaring failure.
    pub max_backtracks: usize,
}

impl Default for MinimizeParams {
    fn default() -> Self {
        MinimizeParams {
            memory: 8,
            max_iters: 300,
            grad_tol: 1e-8,
            step_tol: 1e-14,
            armijo: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
        }
    }
}

impl MinimizeParams {
    fn validate(&self) -> Result<()> {
        if self.memory == 0 || self.max_backtracks == 0 {
            return Err(Error::invalid("minimize: memory and max_backtracks must be positive"));
        }
        if !(self.grad_tol.is_finite() && self.grad_tol >= 0.0)
            || !(self.step_tol.is_finite() && self.step_tol >= 0.0)
        {
            return Err(Error::invalid("minimize: tolerances must be finite and non-negative"));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) || !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::invalid("minimize: armijo and shrink must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Projected-gradient infinity norm fell below grad_tol.
    GradTol,
    /// An accepted step moved nothing beyond step_tol.
    StepTol,
    /// Accepted-step budget exhausted.
    MaxIters,
    /// No trial satisfied the sufficient-decrease test; the result holds the
    /// best iterate seen.
    LineSearchFailed,
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    /// Projected-gradient infinity norm at the returned point.
    pub grad_norm: f64,
    /// Accepted steps taken.
    pub iters: usize,
    pub reason: StopReason,
    /// Objective at the start plus after each accepted step; non-increasing.
    pub values: Vec<f64>,
}

impl Minimum {
    pub fn converged(&self) -> bool {
        self.reason == StopReason::GradTol
    }
}

enum Proj<'a> {
    Free,
    Box { lo: &'a [f64], hi: &'a [f64] },
    Custom(&'a mut dyn FnMut(&mut [f64]) -> bool),
}

impl Proj<'_> {
    /// Returns whether the point moved.
    fn apply(&mut self, x: &mut [f64]) -> bool {
        match self {
            Proj::Free => false,
            Proj::Box { lo, hi } => {
                let mut moved = false;
                for (xi, (&l, &h)) in x.iter_mut().zip(lo.iter().zip(hi.iter())) {
                    let c = xi.clamp(l, h);
                    if c != *xi {
                        *xi = c;
                        moved = true;
                    }
                }
                moved
            }
            Proj::Custom(f) => f(x),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Infinity norm of P(x - g) - x, the projected-gradient step. Identity
/// projection reduces it to the plain gradient norm.
fn criterion(x: &[f64], g: &[f64], proj: &mut Proj) -> f64 {
    let mut step: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi - gi).collect();
    proj.apply(&mut step);
    step.iter().zip(x).fold(0.0, |m, (s, xi)| m.max((s - xi).abs()))
}

fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

fn run<F>(x0: &[f64], params: &MinimizeParams, mut proj: Proj, mut eval: F) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    params.validate()?;
    if x0.is_empty() {
        return Err(Error::invalid("minimize: empty starting point"));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("minimize: starting point must be finite"));
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    proj.apply(&mut x);
    let mut g = vec![0.0; n];
    let mut fx = eval(&x, &mut g);
    if !fx.is_finite() {
        return Err(Error::numerical("minimize: objective not finite at the starting point"));
    }
    let mut values = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iters = 0;

    let finish = |x: Vec<f64>, fx: f64, gnorm: f64, iters: usize, reason: StopReason, values: Vec<f64>| Minimum {
        x,
        value: fx,
        grad_norm: gnorm,
        iters,
        reason,
        values,
    };

    loop {
        let gnorm = criterion(&x, &g, &mut proj);
        if gnorm <= params.grad_tol {
            return Ok(finish(x, fx, gnorm, iters, StopReason::GradTol, values));
        }
        if iters >= params.max_iters {
            return Ok(finish(x, fx, gnorm, iters, StopReason::MaxIters, values));
        }

        let mut d = two_loop(&g, &pairs);
        // A direction that is not descent means stale curvature; restart.
        if dot(&d, &g) >= 0.0 {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
        }

        let mut accepted = None;
        for attempt in 0..2 {
            let mut t = if pairs.is_empty() {
                (1.0 / inf_norm(&d).max(1.0)).min(1.0)
            } else {
                1.0
            };
            let mut g_new = vec![0.0; n];
            for _ in 0..params.max_backtracks {
                let mut cand: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
                proj.apply(&mut cand);
                let slope = dot(&g, &cand) - dot(&g, &x);
                if slope < 0.0 {
                    let f_new = eval(&cand, &mut g_new);
                    if f_new.is_finite() && f_new <= fx + params.armijo * slope {
                        accepted = Some((cand, f_new, g_new));
                        break;
                    }
                }
                t *= params.shrink;
            }
            if accepted.is_some() || pairs.is_empty() || attempt == 1 {
                break;
            }
            // Retry once along steepest descent before giving up.
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            return Ok(finish(x, fx, gnorm, iters, StopReason::LineSearchFailed, values));
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        // Only positive-curvature pairs keep the implicit Hessian SPD.
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == params.memory {
                pairs.pop_front();
            }
            pairs.push_back((s.clone(), y, 1.0 / sy));
        }
        let step_inf = inf_norm(&s);
        x = x_new;
        fx = f_new;
        g = g_new;
        iters += 1;
        values.push(fx);
        if step_inf <= params.step_tol {
            let gnorm = criterion(&x, &g, &mut proj);
            return Ok(finish(x, fx, gnorm, iters, StopReason::StepTol, values));
        }
    }
}

/// Unconstrained minimization. `eval` writes the gradient into its second
/// argument and returns the objective value.
pub fn minimize<F>(x0: &[f64], params: &MinimizeParams, eval: F) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    run(x0, params, Proj::Free, eval)
}

/// Minimization over the box [lo, hi]; iterates and line-search trials are
/// clamped, convergence uses the projected gradient.
pub fn minimize_box<F>(
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    params: &MinimizeParams,
    eval: F,
) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    if lo.len() != x0.len() || hi.len() != x0.len() {
        return Err(Error::invalid("minimize: bound lengths must match the point"));
    }
    for (&l, &h) in lo.iter().zip(hi) {
        if !(l.is_finite() && h.is_finite() && l <= h) {
            return Err(Error::invalid("minimize: bounds must be finite with lo <= hi"));
        }
    }
    run(x0, params, Proj::Box { lo, hi }, eval)
}

/// Minimization with an arbitrary projection applied to every line-search
/// trial. The projection must be idempotent and return whether it moved the
/// point; the returned iterate always satisfies it.
pub fn minimize_projected<F, P>(
    x0: &[f64],
    params: &MinimizeParams,
    project: &mut P,
    eval: F,
) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    P: FnMut(&mut [f64]) -> bool,
{
    run(x0, params, Proj::Custom(project), eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::fd_gradient;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn solves_quadratic_bowl() {
        // f = 1/2 x'Ax - b'x with A = diag(1, 4, 9) plus a coupling term.
        let a = [[2.0, 0.5, 0.0], [0.5, 4.0, 0.5], [0.0, 0.5, 9.0]];
        let b = [1.0, -2.0, 3.0];
        let eval = |x: &[f64], g: &mut [f64]| {
            let mut f = 0.0;
            for i in 0..3 {
                let axi: f64 = (0..3).map(|j| a[i][j] * x[j]).sum();
                f += 0.5 * x[i] * axi - b[i] * x[i];
                g[i] = axi - b[i];
            }
            f
        };
        let m = minimize(&[0.0; 3], &MinimizeParams::default(), eval).unwrap();
        assert!(m.converged(), "{:?}", m.reason);
        let solved = nalgebra::Matrix3::from_fn(|i, j| a[i][j])
            .lu()
            .solve(&nalgebra::Vector3::from_row_slice(&b))
            .unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(m.x[i], solved[i], epsilon = 1e-7);
        }
        assert!(m.values.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn solves_rosenbrock() {
        let eval = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let params = MinimizeParams { max_iters: 1000, ..MinimizeParams::default() };
        let m = minimize(&[-1.2, 1.0], &params, eval).unwrap();
        assert!(m.converged(), "{:?}", m.reason);
        assert_abs_diff_eq!(m.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(m.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_gradient_start_takes_no_steps() {
        let eval = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * x[0];
            x[0] * x[0]
        };
        let m = minimize(&[0.0], &MinimizeParams::default(), eval).unwrap();
        assert_eq!(m.iters, 0);
        assert!(m.converged());
        assert_eq!(m.values, vec![0.0]);
    }

    #[test]
    fn box_bound_becomes_active() {
        let eval = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 2.0);
            (x[0] - 2.0).powi(2)
        };
        let m = minimize_box(&[-0.5], &[-1.0], &[1.0], &MinimizeParams::default(), eval).unwrap();
        assert!(m.converged(), "{:?}", m.reason);
        assert_abs_diff_eq!(m.x[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn custom_projection_lands_on_disc_boundary() {
        let mut project = |x: &mut [f64]| {
            let n = (x[0] * x[0] + x[1] * x[1]).sqrt();
            if n > 1.0 {
                x[0] /= n;
                x[1] /= n;
                true
            } else {
                false
            }
        };
        let eval = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 3.0);
            g[1] = 2.0 * x[1];
            (x[0] - 3.0).powi(2) + x[1] * x[1]
        };
        let m =
            minimize_projected(&[0.2, 0.5], &MinimizeParams::default(), &mut project, eval).unwrap();
        assert!(m.converged(), "{:?}", m.reason);
        assert_abs_diff_eq!(m.x[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(m.x[1], 0.0, epsilon = 1e-7);
    }

    #[test]
    fn nan_wall_returns_best_iterate_with_flag() {
        // Finite at the start, NaN everywhere else: no trial can be accepted.
        let eval = |x: &[f64], g: &mut [f64]| {
            g[0] = 1.0;
            if x[0] == 0.0 {
                0.0
            } else {
                f64::NAN
            }
        };
        let m = minimize(&[0.0], &MinimizeParams::default(), eval).unwrap();
        assert_eq!(m.reason, StopReason::LineSearchFailed);
        assert_eq!(m.x, vec![0.0]);
        assert_eq!(m.value, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let eval = |_: &[f64], _: &mut [f64]| 0.0;
        assert!(minimize(&[], &MinimizeParams::default(), eval).is_err());
        assert!(minimize(&[f64::NAN], &MinimizeParams::default(), eval).is_err());
        assert!(minimize_box(&[0.0], &[1.0], &[-1.0], &MinimizeParams::default(), eval).is_err());
        assert!(minimize_box(&[0.0], &[0.0, 0.0], &[1.0], &MinimizeParams::default(), eval).is_err());
        let bad = MinimizeParams { shrink: 1.5, ..MinimizeParams::default() };
        assert!(minimize(&[0.0], &bad, eval).is_err());
    }

    /// Synthetic convex quartic-plus-quadratic objective with a known
    /// analytic gradient, used by the property tests.
    fn convex_eval(c: &[f64]) -> impl Fn(&[f64], &mut [f64]) -> f64 + '_ {
        move |x: &[f64], g: &mut [f64]| {
            let mut f = 0.0;
            for i in 0..x.len() {
                let d = x[i] - c[i];
                let w = 1.0 + i as f64;
                f += w * d * d + 0.1 * d.powi(4);
                g[i] = 2.0 * w * d + 0.4 * d.powi(3);
            }
            f
        }
    }

    proptest! {
        #[test]
        fn converges_on_random_convex_problems(
            c in proptest::collection::vec(-5.0f64..5.0, 1..6),
            x0 in proptest::collection::vec(-5.0f64..5.0, 1..6),
        ) {
            let n = c.len().min(x0.len());
            let (c, x0) = (&c[..n], &x0[..n]);
            let m = minimize(x0, &MinimizeParams::default(), convex_eval(c)).unwrap();
            prop_assert!(m.converged());
            for i in 0..n {
                prop_assert!((m.x[i] - c[i]).abs() < 1e-6);
            }
            prop_assert!(m.values.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn analytic_gradient_matches_finite_differences(
            c in proptest::collection::vec(-2.0f64..2.0, 2..4),
            x in proptest::collection::vec(-2.0f64..2.0, 2..4),
        ) {
            let n = c.len().min(x.len());
            let (c, x) = (&c[..n], &x[..n]);
            let eval = convex_eval(c);
            let mut g = vec![0.0; n];
            eval(x, &mut g);
            let fd = fd_gradient(|p| { let mut t = vec![0.0; n]; eval(p, &mut t) }, x, 1e-6);
            for i in 0..n {
                prop_assert!((g[i] - fd[i]).abs() < 1e-5, "component {i}: {} vs {}", g[i], fd[i]);
            }
        }
    }
}
