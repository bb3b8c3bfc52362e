//! Direct quasi-Newton minimization of the frozen per-agent energy.
//!
//! Observed frames are pinned to their measurements; the free variables are
//! the coordinates of masked frames. The smooth part (kinetic plus prior in
//! position form) is minimized with the shared BFGS core, and the max-speed
//! constraint is enforced by projecting every line-search trial onto the
//! speed-feasible set with a clamp sweep.

use crate::energy::{total_energy_frozen, EnergyParams, PriorTargets};
use crate::numopt::{minimize_projected, MinimizeParams, StopReason};
use crate::traj::Trajectory;
use crate::{Error, Result, Vec2};

#[derive(Debug, Clone)]
pub struct DirectConfig {
    /// Accepted-step budget for the quasi-Newton loop.
    pub max_iters: usize,
    /// Convergence threshold on the gradient infinity norm of the
    /// weight-normalized energy (the energy divided by its dominant
    /// quadratic weight, so the threshold is meter-scaled).
    pub grad_tol: f64,
}

impl Default for DirectConfig {
    fn default() -> DirectConfig {
        DirectConfig { max_iters: 500, grad_tol: 1e-6 }
    }
}

impl DirectConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.grad_tol.is_finite() || self.grad_tol <= 0.0 {
            return Err(Error::invalid(format!(
                "direct grad_tol must be positive, got {}",
                self.grad_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DirectSolution {
    pub traj: Trajectory,
    /// Full frozen energy at the returned point (tracker + kinetic + prior).
    pub energy: f64,
    pub feasible: bool,
    pub iters: usize,
    pub converged: bool,
    /// Set when no line-search trial satisfied sufficient decrease; the
    /// trajectory then holds the best iterate seen.
    pub line_search_failed: bool,
    /// Objective at the start plus after each accepted step.
    pub energy_trace: Vec<f64>,
}

// Clamped steps land at limit times this factor; the headroom absorbs the
// rounding of later neighbor moves so a clamped step re-checks as feasible.
const CLAMP_HEADROOM: f64 = 1.0 - 1e-12;

// Clamp sweep onto the speed-feasible set. Frames marked fixed never move;
// a step between two fixed frames is data and is left alone. Runs sweeps
// until a full pass changes no point, so the map is idempotent.
fn clamp_speeds(points: &mut [Vec2], fixed: &[bool], limit: f64) -> bool {
    let write = |points: &mut [Vec2], t: usize, p: Vec2| -> bool {
        if points[t] == p {
            false
        } else {
            points[t] = p;
            true
        }
    };
    // Pinned chains converge geometrically but can need a few hundred
    // sweeps when a trial overshoots by an order of magnitude.
    let mut moved = false;
    for _ in 0..1000 {
        let mut changed = false;
        for t in 1..points.len() {
            let d = points[t] - points[t - 1];
            let len = d.norm();
            if len <= limit {
                continue;
            }
            let scale = CLAMP_HEADROOM * limit / len;
            match (fixed[t - 1], fixed[t]) {
                (true, true) => {}
                (true, false) => {
                    changed |= write(points, t, points[t - 1] + d * scale);
                }
                (false, true) => {
                    changed |= write(points, t - 1, points[t] - d * scale);
                }
                (false, false) => {
                    let mid = (points[t - 1] + points[t]) * 0.5;
                    let half = d * (0.5 * scale);
                    changed |= write(points, t - 1, mid - half);
                    changed |= write(points, t, mid + half);
                }
            }
        }
        if !changed {
            break;
        }
        moved = true;
    }
    moved
}

// Wildly infeasible line-search trials can outrun the clamp sweeps. Any free
// segment still violating gets replaced by the chord between its anchors (a
// feasible point whenever the anchors themselves are mutually reachable);
// one-sided segments are clamped outward from their single anchor. The map
// depends only on the anchors, so reapplying it changes nothing.
fn force_feasible(points: &mut [Vec2], fixed: &[bool], limit: f64) -> bool {
    let n = points.len();
    let violated = |points: &[Vec2], t: usize| (points[t] - points[t - 1]).norm() > limit;
    let mut moved = false;
    let mut i = 0;
    while i < n {
        if fixed[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && !fixed[i] {
            i += 1;
        }
        let end = i; // free run is start..end
        let has_violation = (start.max(1)..(end + 1).min(n)).any(|t| violated(points, t));
        if !has_violation {
            continue;
        }
        let left = start.checked_sub(1);
        let right = if end < n { Some(end) } else { None };
        match (left, right) {
            (Some(a), Some(b)) => {
                let span = points[b] - points[a];
                let steps = (b - a) as f64;
                if span.norm() <= steps * limit * CLAMP_HEADROOM {
                    for t in start..end {
                        let p = points[a] + span * ((t - a) as f64 / steps);
                        if p != points[t] {
                            points[t] = p;
                            moved = true;
                        }
                    }
                }
            }
            (Some(a), None) => {
                for t in a + 1..end {
                    let d = points[t] - points[t - 1];
                    let len = d.norm();
                    if len > limit {
                        points[t] = points[t - 1] + d * (CLAMP_HEADROOM * limit / len);
                        moved = true;
                    }
                }
            }
            (None, Some(b)) => {
                for t in (start..b).rev() {
                    let d = points[t] - points[t + 1];
                    let len = d.norm();
                    if len > limit {
                        points[t] = points[t + 1] + d * (CLAMP_HEADROOM * limit / len);
                        moved = true;
                    }
                }
            }
            (None, None) => {
                for t in 1..end {
                    let d = points[t] - points[t - 1];
                    let len = d.norm();
                    if len > limit {
                        points[t] = points[t - 1] + d * (CLAMP_HEADROOM * limit / len);
                        moved = true;
                    }
                }
            }
        }
    }
    moved
}

/// Minimize the frozen energy over the masked frames of `init`, holding
/// observed frames at the observations.
pub fn direct_solve(
    init: &Trajectory,
    obs: &Trajectory,
    targets: &PriorTargets,
    params: &EnergyParams,
    config: &DirectConfig,
) -> Result<DirectSolution> {
    params.validate()?;
    config.validate()?;
    if init.len() != obs.len() {
        return Err(Error::invalid(format!(
            "init has {} frames but observations have {}",
            init.len(),
            obs.len()
        )));
    }
    let t_len = init.len();
    if t_len < 2 {
        return Err(Error::invalid("direct solve needs at least two frames"));
    }
    if targets.expected_len() != t_len {
        return Err(Error::invalid(format!(
            "targets cover {} frames but trajectory has {}",
            targets.expected_len(),
            t_len
        )));
    }
    for t in 0..t_len {
        for p in [init.points[t], obs.points[t]] {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::invalid(format!("non-finite input point at frame {t}")));
            }
        }
    }

    let fixed: Vec<bool> = (0..t_len).map(|t| obs.u(t) == 1.0).collect();
    let free: Vec<usize> = (0..t_len).filter(|&t| !fixed[t]).collect();
    let limit = params.c_mv * params.dt;

    let base: Vec<Vec2> = (0..t_len)
        .map(|t| if fixed[t] { obs.points[t] } else { init.points[t] })
        .collect();

    let finish = |points: Vec<Vec2>, iters, converged, lsf, trace: Vec<f64>| -> Result<DirectSolution> {
        let traj = Trajectory { points, mask: obs.mask.clone() };
        let total = total_energy_frozen(&traj, obs, targets, params)?;
        Ok(DirectSolution {
            traj,
            energy: total.value,
            feasible: total.feasible,
            iters,
            converged,
            line_search_failed: lsf,
            energy_trace: trace,
        })
    };

    if free.is_empty() {
        return finish(base, 0, true, false, Vec::new());
    }

    let x0: Vec<f64> = free.iter().flat_map(|&t| [base[t].x, base[t].y]).collect();

    let scatter = |x: &[f64], points: &mut Vec<Vec2>| {
        for (i, &t) in free.iter().enumerate() {
            points[t] = Vec2::new(x[2 * i], x[2 * i + 1]);
        }
    };

    let mut proj_points = base.clone();
    let mut project = |x: &mut [f64]| -> bool {
        scatter(x, &mut proj_points);
        let mut swept = clamp_speeds(&mut proj_points, &fixed, limit);
        swept |= force_feasible(&mut proj_points, &fixed, limit);
        if !swept {
            return false;
        }
        let mut moved = false;
        for (i, &t) in free.iter().enumerate() {
            let p = proj_points[t];
            if p.x != x[2 * i] || p.y != x[2 * i + 1] {
                moved = true;
            }
            x[2 * i] = p.x;
            x[2 * i + 1] = p.y;
        }
        moved
    };

    // Steps between two fixed frames are constant; restricting the sums to
    // steps touching a free frame keeps the objective equal to the smooth
    // energy up to that constant, which the minimizer never sees.
    let active: Vec<usize> =
        (0..t_len - 1).filter(|&k| !fixed[k] || !fixed[k + 1]).collect();
    let slot: Vec<Option<usize>> = {
        let mut s = vec![None; t_len];
        for (i, &t) in free.iter().enumerate() {
            s[t] = Some(i);
        }
        s
    };

    // The objective is normalized by the dominant quadratic weight so the
    // raw gradient step x - g stays on the meter scale. Without this, paper
    // weights throw x - g hundreds of meters outside the speed-feasible set,
    // where the clamp sweep folds it back onto x and the projected-gradient
    // criterion reads zero at the starting point.
    let weight_scale = {
        let mut w_max: f64 = params.c_kn;
        for terms in &targets.steps {
            for term in terms {
                w_max = w_max.max(term.lambda.x).max(term.lambda.y);
            }
        }
        2.0 * (params.c_kn + w_max)
    };

    let smooth_grad = |x: &[f64], points: &mut Vec<Vec2>, g: &mut [f64]| -> f64 {
        for (i, &t) in free.iter().enumerate() {
            points[t] = Vec2::new(x[2 * i], x[2 * i + 1]);
        }
        g.fill(0.0);
        let mut energy = 0.0;
        for &k in &active {
            let d = points[k + 1] - points[k];
            for c in 0..2 {
                let mut grad_d = 2.0 * params.c_kn * d[c];
                energy += params.c_kn * d[c] * d[c];
                for term in &targets.steps[k] {
                    let r = d[c] - params.dt * term.f[c];
                    energy += term.lambda[c] * r * r;
                    grad_d += 2.0 * term.lambda[c] * r;
                }
                if let Some(i) = slot[k + 1] {
                    g[2 * i + c] += grad_d / weight_scale;
                }
                if let Some(i) = slot[k] {
                    g[2 * i + c] -= grad_d / weight_scale;
                }
            }
        }
        energy / weight_scale
    };

    let mut eval_points = base.clone();
    let eval = |x: &[f64], g: &mut [f64]| -> f64 { smooth_grad(x, &mut eval_points, g) };

    // The inner loop pushes three decades past the claimed tolerance; the
    // extra accepted steps are cheap at this scale and leave the returned
    // point well inside the claim.
    let mparams = MinimizeParams {
        max_iters: config.max_iters,
        grad_tol: (config.grad_tol * 1e-3).max(f64::EPSILON),
        ..MinimizeParams::default()
    };
    let minimum = minimize_projected(&x0, &mparams, &mut project, eval)?;

    // The clamp sweep is not the Euclidean projection: a gradient large
    // enough to throw x - g far outside the feasible set can sweep back to
    // x itself, faking a zero projected gradient. Convergence is therefore
    // claimed only from the plain gradient, which also certifies that the
    // speed cap is inactive at the solution, making it an unconstrained
    // stationary point of a convex energy.
    let mut check_points = base.clone();
    let mut g_final = vec![0.0; minimum.x.len()];
    smooth_grad(&minimum.x, &mut check_points, &mut g_final);
    let plain_grad = g_final.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let converged = plain_grad <= config.grad_tol;

    let mut points = base;
    scatter(&minimum.x, &mut points);
    let trace = minimum.values.iter().map(|v| v * weight_scale).collect();
    finish(
        points,
        minimum.iters,
        converged,
        minimum.reason == StopReason::LineSearchFailed,
        trace,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{e_maxvel, StepTerm};
    use crate::opt::mpa::{mpa_solve, MpaConfig};
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn masked_problem(
        seed: u64,
        t_len: usize,
        masked: std::ops::Range<usize>,
        lambda_range: std::ops::Range<f64>,
    ) -> (Trajectory, Trajectory, PriorTargets) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = vec![Vec2::new(0.0, 0.0)];
        for _ in 1..t_len {
            let step = Vec2::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
            points.push(points.last().unwrap() + step);
        }
        let mut obs = Trajectory::fully_observed(points);
        for t in masked {
            obs.mask[t] = false;
        }
        let init = crate::traj::linear_init(&obs).unwrap();
        let steps = (0..t_len - 1)
            .map(|_| {
                vec![StepTerm {
                    f: Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
                    lambda: Vec2::new(
                        rng.random_range(lambda_range.clone()),
                        rng.random_range(lambda_range.clone()),
                    ),
                }]
            })
            .collect();
        (init, obs, PriorTargets { steps })
    }

    // Stationarity of the quadratic (cap inactive) has a closed form: solve
    // the per-component tridiagonal system over the free frames directly.
    fn dense_minimizer(
        obs: &Trajectory,
        targets: &PriorTargets,
        params: &EnergyParams,
    ) -> Vec<Vec2> {
        let t_len = obs.len();
        let free: Vec<usize> = (0..t_len).filter(|&t| obs.u(t) == 0.0).collect();
        let slot: Vec<Option<usize>> = {
            let mut s = vec![None; t_len];
            for (i, &t) in free.iter().enumerate() {
                s[t] = Some(i);
            }
            s
        };
        let n = free.len();
        let mut out: Vec<Vec2> = obs.points.clone();
        for c in 0..2 {
            let mut a = DMatrix::<f64>::zeros(n, n);
            let mut b = DVector::<f64>::zeros(n);
            for k in 0..t_len - 1 {
                let term = targets.combined(k);
                let w = params.c_kn + term.lambda[c];
                let target = term.lambda[c] * params.dt * term.f[c];
                // Step energy per component: w d^2 - 2 target d + const.
                let pair = [(slot[k], -1.0), (slot[k + 1], 1.0)];
                for (si, sgn_i) in pair {
                    let Some(i) = si else { continue };
                    b[i] += sgn_i * target;
                    for (sj, sgn_j) in pair {
                        match sj {
                            Some(j) => a[(i, j)] += w * sgn_i * sgn_j,
                            None => {
                                let t_fixed = if sgn_j < 0.0 { k } else { k + 1 };
                                b[i] -= w * sgn_i * sgn_j * obs.points[t_fixed][c];
                            }
                        }
                    }
                }
            }
            let sol = a.lu().solve(&b).expect("free-frame system is SPD");
            for (i, &t) in free.iter().enumerate() {
                out[t][c] = sol[i];
            }
        }
        out
    }

    #[test]
    fn matches_dense_linear_solve_on_quadratic_instances() {
        let params = EnergyParams::default();
        for seed in 0..5u64 {
            let (init, obs, targets) = masked_problem(seed, 9, 2..7, 0.5..20.0);
            let sol = direct_solve(&init, &obs, &targets, &params, &DirectConfig::default())
                .unwrap();
            assert!(sol.converged, "seed {seed} did not converge");
            let expect = dense_minimizer(&obs, &targets, &params);
            for t in 0..9 {
                let gap = (sol.traj.points[t] - expect[t]).norm();
                assert!(gap < 1e-6, "seed {seed} frame {t}: gap {gap}");
            }
        }
    }

    #[test]
    fn starting_at_the_minimizer_takes_no_steps() {
        let params = EnergyParams::default();
        let (_, obs, targets) = masked_problem(3, 9, 2..7, 0.5..20.0);
        let expect = dense_minimizer(&obs, &targets, &params);
        let at_min = Trajectory { points: expect, mask: obs.mask.clone() };
        let sol =
            direct_solve(&at_min, &obs, &targets, &params, &DirectConfig::default()).unwrap();
        assert_eq!(sol.iters, 0);
        assert!(sol.converged);
    }

    #[test]
    fn energy_trace_never_increases() {
        let params = EnergyParams::default();
        for seed in 10..20u64 {
            let (init, obs, targets) = masked_problem(seed, 12, 3..9, 0.5..30.0);
            let sol = direct_solve(&init, &obs, &targets, &params, &DirectConfig::default())
                .unwrap();
            assert!(
                sol.energy_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12),
                "seed {seed}: {:?}",
                sol.energy_trace
            );
        }
    }

    #[test]
    fn observed_frames_are_bit_identical_to_observations() {
        let params = EnergyParams::default();
        let (init, obs, targets) = masked_problem(7, 10, 4..7, 0.5..20.0);
        let sol =
            direct_solve(&init, &obs, &targets, &params, &DirectConfig::default()).unwrap();
        for t in 0..10 {
            if obs.u(t) == 1.0 {
                assert_eq!(sol.traj.points[t], obs.points[t]);
            }
        }
    }

    #[test]
    fn projection_keeps_runaway_priors_speed_feasible() {
        // Both endpoints sit at the origin; the prior demands a huge
        // excursion out and back, so the interior wants steps far beyond the
        // cap and the projection must hold the line.
        let params = EnergyParams::default();
        let t_len = 9;
        let mut obs = Trajectory::fully_observed(vec![Vec2::zeros(); t_len]);
        for t in 1..t_len - 1 {
            obs.mask[t] = false;
        }
        let init = crate::traj::linear_init(&obs).unwrap();
        let out = StepTerm { f: Vec2::new(40.0, 0.0), lambda: Vec2::new(108.0, 108.0) };
        let back = StepTerm { f: Vec2::new(-40.0, 0.0), lambda: Vec2::new(108.0, 108.0) };
        let steps = (0..t_len - 1)
            .map(|k| vec![if k < (t_len - 1) / 2 { out } else { back }])
            .collect();
        let targets = PriorTargets { steps };
        let sol =
            direct_solve(&init, &obs, &targets, &params, &DirectConfig::default()).unwrap();
        let report = e_maxvel(&sol.traj, params.c_mv, params.dt);
        assert!(report.feasible, "violations at {:?}", report.violations);
        // The prior pushes hard enough that some step sits on the cap.
        let limit = params.c_mv * params.dt;
        let max_step = (1..t_len)
            .map(|t| (sol.traj.points[t] - sol.traj.points[t - 1]).norm())
            .fold(0.0f64, f64::max);
        assert!(max_step > 0.95 * limit, "max step {max_step} never approached the cap");
    }

    #[test]
    fn agrees_with_message_passing_on_a_convex_instance() {
        // Only the endpoints are observed, so both solvers optimize the same
        // energy: message passing anchors the endpoints, and interior tracker
        // terms vanish with u = 0.
        let params = EnergyParams::default();
        let (init, obs, targets) = masked_problem(21, 8, 1..7, 2.0..15.0);
        let direct =
            direct_solve(&init, &obs, &targets, &params, &DirectConfig::default()).unwrap();
        let mpa_config = MpaConfig { max_iters: 4000, tol: 1e-10, ..MpaConfig::default() };
        let mpa = mpa_solve(&init, &obs, &targets, &params, &mpa_config).unwrap();
        for t in 0..8 {
            let gap = (direct.traj.points[t] - mpa.traj.points[t]).norm();
            assert!(gap < 1e-3, "frame {t}: direct vs mpa gap {gap}");
        }
    }

    #[test]
    fn budget_exhaustion_returns_best_iterate() {
        let params = EnergyParams::default();
        let (init, obs, targets) = masked_problem(5, 12, 3..9, 0.5..30.0);
        let config = DirectConfig { max_iters: 1, ..DirectConfig::default() };
        let sol = direct_solve(&init, &obs, &targets, &params, &config).unwrap();
        assert!(!sol.converged);
        assert!(sol.iters <= 1);
        assert!(sol.traj.points.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
        let full = direct_solve(&init, &obs, &targets, &params, &DirectConfig::default())
            .unwrap();
        assert!(full.energy <= sol.energy + 1e-12);
    }

    #[test]
    fn no_free_frames_returns_the_observations() {
        let params = EnergyParams::default();
        let (_, mut obs, targets) = masked_problem(2, 6, 0..0, 1.0..5.0);
        obs.mask = vec![true; 6];
        let init = obs.clone();
        let sol =
            direct_solve(&init, &obs, &targets, &params, &DirectConfig::default()).unwrap();
        assert_eq!(sol.iters, 0);
        assert!(sol.converged);
        for t in 0..6 {
            assert_eq!(sol.traj.points[t], obs.points[t]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let params = EnergyParams::default();
        let (init, obs, targets) = masked_problem(1, 8, 3..5, 1.0..5.0);
        let short = Trajectory::fully_observed(vec![Vec2::zeros(); 7]);
        assert!(direct_solve(&short, &obs, &targets, &params, &DirectConfig::default()).is_err());
        let mut nan = init.clone();
        nan.points[4].x = f64::NAN;
        assert!(direct_solve(&nan, &obs, &targets, &params, &DirectConfig::default()).is_err());
        let bad = DirectConfig { grad_tol: 0.0, ..DirectConfig::default() };
        assert!(direct_solve(&init, &obs, &targets, &params, &bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn solutions_are_feasible_and_stationary(seed in 0u64..5000) {
            let params = EnergyParams::default();
            let (init, obs, targets) = masked_problem(seed, 10, 3..8, 0.5..25.0);
            let sol = direct_solve(&init, &obs, &targets, &params, &DirectConfig::default())
                .unwrap();
            let report = e_maxvel(&sol.traj, params.c_mv, params.dt);
            prop_assert!(report.feasible);
            let limit = params.c_mv * params.dt;
            let cap_active = (1..10).any(|t| {
                ((sol.traj.points[t] - sol.traj.points[t - 1]).norm() - limit).abs() < 1e-9
            });
            if !cap_active {
                prop_assert!(sol.converged, "inactive cap but no convergence");
            }
        }
    }
}
