//! Message-passing (consensus ADMM) minimization of the per-agent energy.
//!
//! The factor graph has one equality node per trajectory variable and one
//! minimizer node per energy term per involved step. Every minimizer solves
//! its local objective plus the (rho/2)-scaled proximity penalty in closed
//! form; the equality node averages the incoming estimates. With fixed rho
//! this is standard scaled-form consensus ADMM. First and last frames are
//! hard-anchored; interior observed frames are held by their tracker nodes.

use crate::energy::{total_energy_frozen, EnergyParams, PriorTargets};
use crate::traj::Trajectory;
use crate::{Error, Result, Vec2};

/// Tracker node: argmin of `u ||x - o||^2 + (rho/2) ||x - n||^2`.
pub fn mpa_min_tracker(n: Vec2, o: Vec2, u: f64, rho: f64) -> Vec2 {
    debug_assert!(rho > 0.0);
    (o * (2.0 * u) + n * rho) / (2.0 * u + rho)
}

/// Kinetic node: joint argmin of
/// `c_kn ||x_cur - x_prev||^2 + (rho/2)(||x_prev - n_prev||^2 + ||x_cur - n_cur||^2)`.
pub fn mpa_min_kinetic(n_prev: Vec2, n_cur: Vec2, c_kn: f64, rho: f64) -> (Vec2, Vec2) {
    mpa_min_prior(n_prev, n_cur, Vec2::zeros(), Vec2::new(c_kn, c_kn), rho)
}

/// Prior node: joint argmin of
/// `sum_c lambda_c ((x_cur - x_prev - f_disp)_c)^2 + (rho/2)(...)` with the
/// same proximity penalty. `f_disp` is the target displacement dt*f, held
/// constant within the inner iteration. Setting the stationarity conditions
/// to zero shows the pair sum is preserved (x_prev + x_cur = n_prev + n_cur)
/// and the difference relaxes toward f_disp, giving per component:
/// `x_cur = ((2w + rho) n_cur + 2w n_prev + 2w g) / (4w + rho)` and the
/// mirrored expression with -g for x_prev.
pub fn mpa_min_prior(
    n_prev: Vec2,
    n_cur: Vec2,
    f_disp: Vec2,
    lambda: Vec2,
    rho: f64,
) -> (Vec2, Vec2) {
    debug_assert!(rho > 0.0);
    let mut prev = Vec2::zeros();
    let mut cur = Vec2::zeros();
    for c in 0..2 {
        let w = lambda[c];
        debug_assert!(w >= 0.0);
        let denom = 4.0 * w + rho;
        cur[c] = ((2.0 * w + rho) * n_cur[c] + 2.0 * w * n_prev[c] + 2.0 * w * f_disp[c]) / denom;
        prev[c] = ((2.0 * w + rho) * n_prev[c] + 2.0 * w * n_cur[c] - 2.0 * w * f_disp[c]) / denom;
    }
    (prev, cur)
}

/// Max-velocity node: KKT projection of the equal-weight proximity problem
/// onto `||x_cur - x_prev|| <= c_mv * dt`. In midpoint/difference variables
/// the objective separates, so the optimum keeps the midpoint and shrinks
/// the difference onto the ball.
pub fn mpa_min_maxvel(n_prev: Vec2, n_cur: Vec2, c_mv: f64, dt: f64, rho: f64) -> (Vec2, Vec2) {
    debug_assert!(rho > 0.0);
    let limit = c_mv * dt;
    let d = n_cur - n_prev;
    let len = d.norm();
    if len <= limit {
        return (n_prev, n_cur);
    }
    let mid = (n_prev + n_cur) * 0.5;
    let half = d * (0.5 * limit / len);
    (mid - half, mid + half)
}

/// Minimum-separation node for the baseline pairwise mode: projection onto
/// `||x_b - x_a|| >= min_dist`, the mirror image of the max-velocity node.
/// Coincident messages leave the push direction undefined; the x axis is
/// used so the update stays deterministic.
pub fn mpa_min_minsep(n_a: Vec2, n_b: Vec2, min_dist: f64, rho: f64) -> (Vec2, Vec2) {
    debug_assert!(rho > 0.0);
    let d = n_b - n_a;
    let len = d.norm();
    if len >= min_dist {
        return (n_a, n_b);
    }
    let mid = (n_a + n_b) * 0.5;
    let dir = if len > 0.0 { d / len } else { Vec2::new(1.0, 0.0) };
    let half = dir * (0.5 * min_dist);
    (mid - half, mid + half)
}

#[derive(Debug, Clone)]
pub struct MpaConfig {
    pub max_iters: usize,
    /// Convergence threshold on the largest message change.
    pub tol: f64,
    /// Minimum inter-agent separation for the joint solver's baseline
    /// pairwise mode; None disables pairwise nodes.
    pub pairwise_min_dist: Option<f64>,
}

impl Default for MpaConfig {
    fn default() -> MpaConfig {
        MpaConfig { max_iters: 500, tol: 1e-6, pairwise_min_dist: None }
    }
}

impl MpaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("mpa max_iters must be at least 1"));
        }
        if !self.tol.is_finite() || self.tol <= 0.0 {
            return Err(Error::invalid(format!("mpa tol must be positive, got {}", self.tol)));
        }
        if let Some(d) = self.pairwise_min_dist {
            if !d.is_finite() || d <= 0.0 {
                return Err(Error::invalid(format!(
                    "pairwise_min_dist must be positive, got {d}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MpaSolution {
    pub traj: Trajectory,
    pub iters: usize,
    pub converged: bool,
    /// Frozen-target total energy of the consensus iterate, entry 0 at the
    /// initial point and one entry per completed iteration.
    pub energy_trace: Vec<f64>,
}

enum Node {
    Tracker { v: usize, o: Vec2, u: f64 },
    // Quadratic pair node covering kinetic (lambda = c_kn, f_disp = 0) and
    // prior (lambda per component, f_disp = dt * f) terms.
    PairQuad { va: usize, vb: usize, lambda: Vec2, f_disp: Vec2 },
    MaxStep { va: usize, vb: usize },
    MinSep { va: usize, vb: usize, dist: f64 },
}

impl Node {
    fn vars(&self) -> (usize, Option<usize>) {
        match *self {
            Node::Tracker { v, .. } => (v, None),
            Node::PairQuad { va, vb, .. }
            | Node::MaxStep { va, vb, .. }
            | Node::MinSep { va, vb, .. } => (va, Some(vb)),
        }
    }
}

struct Engine {
    nodes: Vec<Node>,
    // Per node: up to two edge slots (second unused for tracker nodes).
    duals: Vec<[Vec2; 2]>,
    locals: Vec<[Vec2; 2]>,
    prev_msgs: Vec<[Vec2; 2]>,
    z: Vec<Vec2>,
    anchored: Vec<Option<Vec2>>,
    // Incidence counts for the averaging step.
    degree: Vec<f64>,
    rho: f64,
    c_mv: f64,
    dt: f64,
}

impl Engine {
    fn new(
        nodes: Vec<Node>,
        z0: Vec<Vec2>,
        anchored: Vec<Option<Vec2>>,
        params: &EnergyParams,
    ) -> Engine {
        let mut degree = vec![0.0; z0.len()];
        for node in &nodes {
            let (a, b) = node.vars();
            degree[a] += 1.0;
            if let Some(b) = b {
                degree[b] += 1.0;
            }
        }
        let n = nodes.len();
        let mut z = z0;
        for (v, anchor) in anchored.iter().enumerate() {
            if let Some(p) = anchor {
                z[v] = *p;
            }
        }
        Engine {
            nodes,
            duals: vec![[Vec2::zeros(); 2]; n],
            locals: vec![[Vec2::zeros(); 2]; n],
            prev_msgs: vec![[Vec2::zeros(); 2]; n],
            z,
            anchored,
            degree,
            rho: params.rho,
            c_mv: params.c_mv,
            dt: params.dt,
        }
    }

    /// One ADMM sweep: local proxes, consensus averaging, dual ascent.
    /// Returns the largest message change.
    fn step(&mut self, first: bool) -> Result<f64> {
        let rho = self.rho;
        let mut sums = vec![Vec2::zeros(); self.z.len()];
        let mut msg_change = 0.0f64;
        for (k, node) in self.nodes.iter().enumerate() {
            let (va, vb) = node.vars();
            let na = self.z[va] - self.duals[k][0];
            let nb = vb.map(|v| self.z[v] - self.duals[k][1]);
            if !first {
                msg_change = msg_change.max((na - self.prev_msgs[k][0]).abs().max());
                if let Some(nb) = nb {
                    msg_change = msg_change.max((nb - self.prev_msgs[k][1]).abs().max());
                }
            }
            self.prev_msgs[k][0] = na;
            if let Some(nb) = nb {
                self.prev_msgs[k][1] = nb;
            }
            let (xa, xb) = match *node {
                Node::Tracker { o, u, .. } => (mpa_min_tracker(na, o, u, rho), None),
                Node::PairQuad { lambda, f_disp, .. } => {
                    let (a, b) = mpa_min_prior(na, nb.unwrap(), f_disp, lambda, rho);
                    (a, Some(b))
                }
                Node::MaxStep { .. } => {
                    let (a, b) = mpa_min_maxvel(na, nb.unwrap(), self.c_mv, self.dt, rho);
                    (a, Some(b))
                }
                Node::MinSep { va, vb, dist } => {
                    // The separation set is nonconvex and the exact pair
                    // projection flips direction under dual drift, stalling
                    // the sweep at a coincident fixed point. Linearizing
                    // around the previous consensus iterate turns the node
                    // into a halfspace projection along a stable direction.
                    let gap = self.z[vb] - self.z[va];
                    let len = gap.norm();
                    let dir = if len > 1e-12 { gap / len } else { Vec2::new(1.0, 0.0) };
                    let nb = nb.unwrap();
                    let s = (nb - na).dot(&dir);
                    if s >= dist {
                        (na, Some(nb))
                    } else {
                        let shift = dir * (0.5 * (dist - s));
                        (na - shift, Some(nb + shift))
                    }
                }
            };
            if !xa.x.is_finite() || !xa.y.is_finite() {
                return Err(Error::numerical("mpa minimizer estimate diverged"));
            }
            self.locals[k][0] = xa;
            sums[va] += xa + self.duals[k][0];
            if let (Some(vb), Some(xb)) = (vb, xb) {
                if !xb.x.is_finite() || !xb.y.is_finite() {
                    return Err(Error::numerical("mpa minimizer estimate diverged"));
                }
                self.locals[k][1] = xb;
                sums[vb] += xb + self.duals[k][1];
            }
        }
        for v in 0..self.z.len() {
            self.z[v] = match self.anchored[v] {
                Some(p) => p,
                None => sums[v] / self.degree[v].max(1.0),
            };
            if !self.z[v].x.is_finite() || !self.z[v].y.is_finite() {
                return Err(Error::numerical("mpa consensus iterate diverged"));
            }
        }
        for (k, node) in self.nodes.iter().enumerate() {
            let (va, vb) = node.vars();
            self.duals[k][0] += self.locals[k][0] - self.z[va];
            if let Some(vb) = vb {
                self.duals[k][1] += self.locals[k][1] - self.z[vb];
            }
        }
        Ok(msg_change)
    }
}

fn validate_problem(
    init: &Trajectory,
    obs: &Trajectory,
    targets: &PriorTargets,
    params: &EnergyParams,
    config: &MpaConfig,
) -> Result<()> {
    params.validate()?;
    config.validate()?;
    if init.len() != obs.len() {
        return Err(Error::invalid(format!(
            "init has {} frames but observations have {}",
            init.len(),
            obs.len()
        )));
    }
    if init.len() < 2 {
        return Err(Error::invalid("mpa needs at least two frames"));
    }
    if targets.expected_len() != init.len() {
        return Err(Error::invalid(format!(
            "targets cover {} frames but trajectory has {}",
            targets.expected_len(),
            init.len()
        )));
    }
    for t in 0..init.len() {
        for p in [init.points[t], obs.points[t]] {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(Error::invalid(format!("non-finite input point at frame {t}")));
            }
        }
    }
    Ok(())
}

fn agent_nodes(obs: &Trajectory, targets: &PriorTargets, params: &EnergyParams, base: usize) -> Vec<Node> {
    let t_len = obs.len();
    let mut nodes = Vec::with_capacity(4 * t_len);
    for t in 0..t_len {
        nodes.push(Node::Tracker { v: base + t, o: obs.points[t], u: obs.u(t) });
    }
    for t in 1..t_len {
        nodes.push(Node::PairQuad {
            va: base + t - 1,
            vb: base + t,
            lambda: Vec2::new(params.c_kn, params.c_kn),
            f_disp: Vec2::zeros(),
        });
        let term = targets.combined(t - 1);
        nodes.push(Node::PairQuad {
            va: base + t - 1,
            vb: base + t,
            lambda: term.lambda,
            f_disp: term.f * params.dt,
        });
        nodes.push(Node::MaxStep { va: base + t - 1, vb: base + t });
    }
    nodes
}

/// Clamp residual speed violations on interior frames. Anchored endpoints
/// are never moved; converged maxvel nodes leave at most epsilon-scale
/// excess for this to absorb.
fn feasibility_sweep(points: &mut [Vec2], c_mv: f64, dt: f64) {
    let limit = c_mv * dt;
    for t in 1..points.len().saturating_sub(1) {
        let d = points[t] - points[t - 1];
        let len = d.norm();
        if len > limit {
            points[t] = points[t - 1] + d * (limit / len);
        }
    }
}

/// Minimize one agent's energy against frozen prior targets. Frames with
/// u_t = 1 stay anchored at their measurements throughout the sweep.
pub fn mpa_solve(
    init: &Trajectory,
    obs: &Trajectory,
    targets: &PriorTargets,
    params: &EnergyParams,
    config: &MpaConfig,
) -> Result<MpaSolution> {
    validate_problem(init, obs, targets, params, config)?;
    let t_len = init.len();
    // Observed frames are constants of the problem: the graph only relaxes
    // masked frames, and endpoints stay pinned even on degenerate masks.
    let mut anchored: Vec<Option<Vec2>> =
        (0..t_len).map(|t| (obs.u(t) == 1.0).then(|| obs.points[t])).collect();
    anchored[0] = Some(obs.points[0]);
    anchored[t_len - 1] = Some(obs.points[t_len - 1]);
    let nodes = agent_nodes(obs, targets, params, 0);
    let mut engine = Engine::new(nodes, init.points.clone(), anchored, params);

    let snapshot = |z: &[Vec2]| Trajectory { points: z.to_vec(), mask: obs.mask.clone() };
    let mut energy_trace =
        vec![total_energy_frozen(&snapshot(&engine.z), obs, targets, params)?.value];
    let mut converged = false;
    let mut iters = 0;
    for it in 0..config.max_iters {
        let change = engine.step(it == 0)?;
        iters = it + 1;
        energy_trace.push(total_energy_frozen(&snapshot(&engine.z), obs, targets, params)?.value);
        if it > 0 && change < config.tol {
            converged = true;
            break;
        }
    }
    let mut points = engine.z;
    feasibility_sweep(&mut points, params.c_mv, params.dt);
    Ok(MpaSolution {
        traj: Trajectory { points, mask: obs.mask.clone() },
        iters,
        converged,
        energy_trace,
    })
}

#[derive(Debug, Clone)]
pub struct MpaJointSolution {
    pub trajs: Vec<Trajectory>,
    pub iters: usize,
    pub converged: bool,
}

/// Joint solve over all agents. Without pairwise nodes this is exactly the
/// per-agent solve run in one graph; with `pairwise_min_dist` set it adds a
/// minimum-separation node per agent pair per frame, the baseline coupling
/// the data-driven priors are meant to replace.
pub fn mpa_solve_joint(
    inits: &[Trajectory],
    obss: &[Trajectory],
    targets: &[PriorTargets],
    params: &EnergyParams,
    config: &MpaConfig,
) -> Result<MpaJointSolution> {
    if inits.len() != obss.len() || inits.len() != targets.len() {
        return Err(Error::invalid("mpa joint solve needs equal-length agent lists"));
    }
    if inits.is_empty() {
        return Err(Error::invalid("mpa joint solve needs at least one agent"));
    }
    let t_len = inits[0].len();
    for (i, init) in inits.iter().enumerate() {
        validate_problem(init, &obss[i], &targets[i], params, config)?;
        if init.len() != t_len {
            return Err(Error::invalid("all agents must share the frame count"));
        }
    }
    let n_agents = inits.len();
    let mut nodes = Vec::new();
    let mut z0 = Vec::with_capacity(n_agents * t_len);
    let mut anchored = vec![None; n_agents * t_len];
    for (i, init) in inits.iter().enumerate() {
        nodes.extend(agent_nodes(&obss[i], &targets[i], params, i * t_len));
        z0.extend_from_slice(&init.points);
        // Pairwise mode must be free to trade observation fit against
        // separation, so only the endpoints stay pinned there; the decoupled
        // graph anchors every observed frame like the per-agent solve.
        if config.pairwise_min_dist.is_none() {
            for t in 0..t_len {
                if obss[i].u(t) == 1.0 {
                    anchored[i * t_len + t] = Some(obss[i].points[t]);
                }
            }
        }
        anchored[i * t_len] = Some(obss[i].points[0]);
        anchored[i * t_len + t_len - 1] = Some(obss[i].points[t_len - 1]);
    }
    if let Some(dist) = config.pairwise_min_dist {
        for i in 0..n_agents {
            for j in (i + 1)..n_agents {
                for t in 0..t_len {
                    nodes.push(Node::MinSep { va: i * t_len + t, vb: j * t_len + t, dist });
                }
            }
        }
    }
    let mut engine = Engine::new(nodes, z0, anchored, params);
    let mut converged = false;
    let mut iters = 0;
    for it in 0..config.max_iters {
        let change = engine.step(it == 0)?;
        iters = it + 1;
        if it > 0 && change < config.tol {
            converged = true;
            break;
        }
    }
    let trajs = (0..n_agents)
        .map(|i| {
            let mut points = engine.z[i * t_len..(i + 1) * t_len].to_vec();
            feasibility_sweep(&mut points, params.c_mv, params.dt);
            Trajectory { points, mask: obss[i].mask.clone() }
        })
        .collect();
    Ok(MpaJointSolution { trajs, iters, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::StepTerm;
    use crate::numopt::{minimize_projected, MinimizeParams};
    use crate::testutil::{golden_section_min, quadratic_argmin};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tracker_passes_message_through_when_unobserved() {
        let n = Vec2::new(3.5, -1.25);
        assert_eq!(mpa_min_tracker(n, Vec2::new(9.0, 9.0), 0.0, 1.0), n);
    }

    #[test]
    fn tracker_approaches_observation_as_rho_vanishes() {
        let o = Vec2::new(2.0, -4.0);
        let x = mpa_min_tracker(Vec2::zeros(), o, 1.0, 1e-12);
        assert!((x - o).norm() < 1e-11);
    }

    #[test]
    fn tracker_matches_1d_oracle_on_worked_numbers() {
        let x = mpa_min_tracker(Vec2::zeros(), Vec2::new(1.0, 0.0), 1.0, 2.0);
        assert_eq!(x, Vec2::new(0.5, 0.0));
        let oracle = golden_section_min(
            |v| (v - 1.0) * (v - 1.0) + 1.0 * v * v,
            -10.0,
            10.0,
            200,
        );
        assert!((x.x - oracle).abs() < 1e-8);
    }

    #[test]
    fn kinetic_keeps_consistent_messages_fixed() {
        let n = Vec2::new(1.5, 2.5);
        let (a, b) = mpa_min_kinetic(n, n, 1.0, 1.0);
        assert_eq!(a, n);
        assert_eq!(b, n);
    }

    #[test]
    fn kinetic_releases_to_messages_without_weight() {
        let np = Vec2::new(-1.0, 0.5);
        let nc = Vec2::new(4.0, -2.0);
        let (a, b) = mpa_min_kinetic(np, nc, 1e-15, 1.0);
        assert!((a - np).norm() < 1e-12);
        assert!((b - nc).norm() < 1e-12);
    }

    fn pair_objective(
        x: &[f64],
        n_prev: Vec2,
        n_cur: Vec2,
        lambda: Vec2,
        f_disp: Vec2,
        rho: f64,
    ) -> f64 {
        let xp = Vec2::new(x[0], x[1]);
        let xc = Vec2::new(x[2], x[3]);
        let mut e = 0.0;
        for c in 0..2 {
            let r = xc[c] - xp[c] - f_disp[c];
            e += lambda[c] * r * r;
        }
        e + 0.5 * rho * ((xp - n_prev).norm_squared() + (xc - n_cur).norm_squared())
    }

    #[test]
    fn kinetic_worked_numbers_match_numeric_minimizer() {
        let np = Vec2::zeros();
        let nc = Vec2::new(4.0, 0.0);
        let (a, b) = mpa_min_kinetic(np, nc, 1.0, 2.0);
        let sol = quadratic_argmin(
            |x| pair_objective(x, np, nc, Vec2::new(1.0, 1.0), Vec2::zeros(), 2.0),
            4,
        );
        assert!((a - Vec2::new(sol[0], sol[1])).norm() < 1e-8);
        assert!((b - Vec2::new(sol[2], sol[3])).norm() < 1e-8);
    }

    #[test]
    fn prior_with_zero_target_keeps_consistent_messages() {
        let n = Vec2::new(0.75, -3.0);
        let (a, b) = mpa_min_prior(n, n, Vec2::zeros(), Vec2::new(108.0, 108.0), 1.0);
        assert_eq!(a, n);
        assert_eq!(b, n);
    }

    #[test]
    fn prior_worked_numbers_match_4d_oracle() {
        let lambda = Vec2::new(108.0, 108.0);
        let f = Vec2::new(1.0, 0.0);
        let (a, b) = mpa_min_prior(Vec2::zeros(), Vec2::zeros(), f, lambda, 1.0);
        let sol = quadratic_argmin(
            |x| pair_objective(x, Vec2::zeros(), Vec2::zeros(), lambda, f, 1.0),
            4,
        );
        assert!((a - Vec2::new(sol[0], sol[1])).norm() < 1e-6);
        assert!((b - Vec2::new(sol[2], sol[3])).norm() < 1e-6);
        // The pair sum is preserved, so the points sit symmetrically.
        assert!((a + b).norm() < 1e-12);
    }

    #[test]
    fn prior_stationarity_residuals_vanish_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..100 {
            let np = Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let nc = Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let f = Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let lambda =
                Vec2::new(rng.random_range(0.1..200.0), rng.random_range(0.1..200.0));
            let rho = rng.random_range(0.1..10.0);
            let (xp, xc) = mpa_min_prior(np, nc, f, lambda, rho);
            for c in 0..2 {
                let w = lambda[c];
                // Derivatives of the local objective at the returned pair.
                let d_cur = 2.0 * w * (xc[c] - xp[c] - f[c]) + rho * (xc[c] - nc[c]);
                let d_prev = -2.0 * w * (xc[c] - xp[c] - f[c]) + rho * (xp[c] - np[c]);
                assert!(d_cur.abs() < 1e-9, "cur residual {d_cur}");
                assert!(d_prev.abs() < 1e-9, "prev residual {d_prev}");
            }
        }
    }

    #[test]
    fn maxvel_leaves_feasible_pairs_untouched() {
        let np = Vec2::new(1.0, 1.0);
        let nc = Vec2::new(1.0 + 2.5 * 2.0, 1.0);
        // Boundary separation exactly c_mv * dt.
        let (a, b) = mpa_min_maxvel(np, nc, 2.5, 2.0, 1.0);
        assert_eq!(a, np);
        assert_eq!(b, nc);
        let (a, b) = mpa_min_maxvel(np, np, 2.6, 1.5, 1.0);
        assert_eq!(a, np);
        assert_eq!(b, np);
    }

    #[test]
    fn maxvel_shrinks_to_the_limit_preserving_the_midpoint() {
        let c_mv = 2.6;
        let dt = 1.5;
        let limit = c_mv * dt;
        let np = Vec2::zeros();
        let nc = Vec2::new(2.0 * limit, 0.0);
        let (a, b) = mpa_min_maxvel(np, nc, c_mv, dt, 1.0);
        assert!(((b - a).norm() - limit).abs() < 1e-12);
        assert!(((a + b) * 0.5 - Vec2::new(limit, 0.0)).norm() < 1e-12);

        // Independent check: projected quasi-Newton on the proximity
        // objective with the step-length ball as the feasible set.
        let params = MinimizeParams::default();
        let mut project = |x: &mut [f64]| {
            let xp = Vec2::new(x[0], x[1]);
            let xc = Vec2::new(x[2], x[3]);
            let d = xc - xp;
            let len = d.norm();
            if len <= limit {
                return false;
            }
            let mid = (xp + xc) * 0.5;
            let half = d * (0.5 * limit / len);
            let (p, c) = (mid - half, mid + half);
            x.copy_from_slice(&[p.x, p.y, c.x, c.y]);
            true
        };
        let start = [0.0, 0.0, limit, 0.0];
        let min = minimize_projected(&start, &params, &mut project, |x, g| {
            let xp = Vec2::new(x[0], x[1]);
            let xc = Vec2::new(x[2], x[3]);
            let gp = xp - np;
            let gc = xc - nc;
            g.copy_from_slice(&[gp.x, gp.y, gc.x, gc.y]);
            0.5 * ((xp - np).norm_squared() + (xc - nc).norm_squared())
        })
        .unwrap();
        assert!((a - Vec2::new(min.x[0], min.x[1])).norm() < 1e-6);
        assert!((b - Vec2::new(min.x[2], min.x[3])).norm() < 1e-6);
    }

    #[test]
    fn minsep_pushes_close_pairs_apart_symmetrically() {
        let na = Vec2::new(1.0, 0.0);
        let nb = Vec2::new(1.2, 0.0);
        let (a, b) = mpa_min_minsep(na, nb, 0.6, 1.0);
        assert!(((b - a).norm() - 0.6).abs() < 1e-12);
        assert!(((a + b) * 0.5 - Vec2::new(1.1, 0.0)).norm() < 1e-12);
        // Far pairs are untouched; coincident pairs split deterministically.
        let far = mpa_min_minsep(Vec2::zeros(), Vec2::new(2.0, 0.0), 0.6, 1.0);
        assert_eq!(far, (Vec2::zeros(), Vec2::new(2.0, 0.0)));
        let (ca, cb) = mpa_min_minsep(na, na, 0.6, 1.0);
        assert!(((cb - ca).norm() - 0.6).abs() < 1e-12);
    }

    fn straight_problem(t_len: usize, v: Vec2, dt: f64) -> (Trajectory, PriorTargets) {
        let points: Vec<Vec2> = (0..t_len).map(|t| v * (dt * t as f64)).collect();
        let targets = PriorTargets {
            steps: vec![vec![StepTerm { f: v, lambda: Vec2::new(20.0, 20.0) }]; t_len - 1],
        };
        (Trajectory::fully_observed(points), targets)
    }

    #[test]
    fn solve_keeps_a_self_consistent_problem_in_place() {
        let params = EnergyParams::default();
        let (obs, targets) = straight_problem(10, Vec2::new(1.0, 0.3), params.dt);
        let sol =
            mpa_solve(&obs, &obs, &targets, &params, &MpaConfig::default()).unwrap();
        assert!(sol.converged);
        for t in 0..obs.len() {
            assert!(
                (sol.traj.points[t] - obs.points[t]).norm() < 1e-3,
                "frame {t} drifted"
            );
        }
    }

    #[test]
    fn solve_fills_a_masked_straight_line_collinearly() {
        let params = EnergyParams::default();
        let v = Vec2::new(1.2, 0.0);
        let (mut obs, targets) = straight_problem(12, v, params.dt);
        for t in 3..9 {
            obs.mask[t] = false;
            obs.points[t] = Vec2::zeros(); // masked coordinates carry no signal
        }
        let init = crate::traj::linear_init(&obs).unwrap();
        let sol = mpa_solve(&init, &obs, &targets, &params, &MpaConfig::default()).unwrap();
        assert!(sol.converged);
        for t in 0..obs.len() {
            let expected = v * (params.dt * t as f64);
            assert!(
                (sol.traj.points[t] - expected).norm() < 1e-3,
                "frame {t}: {:?} vs {:?}",
                sol.traj.points[t],
                expected
            );
        }
        // Hard anchors are exact.
        assert_eq!(sol.traj.points[0], obs.points[0]);
        assert_eq!(sol.traj.points[11], obs.points[11]);
    }

    fn random_problem(seed: u64) -> (Trajectory, Trajectory, PriorTargets, EnergyParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EnergyParams::default();
        let t_len = 12;
        let mut points = vec![Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))];
        for _ in 1..t_len {
            let step = Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let last = *points.last().unwrap();
            points.push(last + step);
        }
        let mut obs = Trajectory::fully_observed(points);
        for t in 4..8 {
            obs.mask[t] = false;
        }
        let steps = (0..t_len - 1)
            .map(|_| {
                vec![StepTerm {
                    f: Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                    lambda: Vec2::new(rng.random_range(0.5..30.0), rng.random_range(0.5..30.0)),
                }]
            })
            .collect();
        let init = crate::traj::linear_init(&obs).unwrap();
        (init, obs, PriorTargets { steps }, params)
    }

    #[test]
    fn solve_reaches_the_direct_minimum_on_random_problems() {
        // ADMM sweeps are not monotone, so the trace is only pinned at its
        // ends: the final energy must not exceed the initial one and must
        // match the independent quasi-Newton minimizer of the same problem.
        use crate::opt::direct::{direct_solve, DirectConfig};
        for seed in 0..20 {
            let (init, obs, targets, params) = random_problem(seed);
            let config = MpaConfig { max_iters: 2000, ..MpaConfig::default() };
            let sol = mpa_solve(&init, &obs, &targets, &params, &config).unwrap();
            let first = sol.energy_trace[0];
            let last = *sol.energy_trace.last().unwrap();
            assert!(last <= first + 1e-9, "seed {seed}: {last} above initial {first}");
            let dcfg = DirectConfig { max_iters: 2000, ..DirectConfig::default() };
            let direct = direct_solve(&init, &obs, &targets, &params, &dcfg).unwrap();
            let scale = 1.0 + direct.energy.abs();
            assert!(
                (last - direct.energy).abs() <= 1e-4 * scale,
                "seed {seed}: mpa energy {last} vs direct {}",
                direct.energy
            );
        }
    }

    #[test]
    fn solve_keeps_observed_frames_near_observations() {
        // Anchoring is only meaningful when the prior roughly agrees with
        // the measurements; targets here are the true step velocities plus
        // small noise, so the tracker bound below is attainable.
        for seed in 0..10 {
            let (init, obs, _, params) = random_problem(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11C);
            let steps = (1..obs.len())
                .map(|t| {
                    let v = (obs.points[t] - obs.points[t - 1]) / params.dt;
                    let jitter =
                        Vec2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
                    // Paper-scale weights: the prior dominates the kinetic
                    // shrink, so observed frames stay near the measurements.
                    vec![StepTerm { f: v + jitter, lambda: Vec2::new(108.0, 108.0) }]
                })
                .collect();
            let targets = PriorTargets { steps };
            let sol = mpa_solve(&init, &obs, &targets, &params, &MpaConfig::default()).unwrap();
            for t in 0..obs.len() {
                if obs.u(t) == 1.0 {
                    let gap = (sol.traj.points[t] - obs.points[t]).norm();
                    assert!(gap < 0.25, "seed {seed} frame {t} gap {gap}");
                }
            }
        }
    }

    #[test]
    fn solve_output_is_speed_feasible_on_interior_frames() {
        for seed in 0..10 {
            let (init, obs, targets, params) = random_problem(seed);
            let sol = mpa_solve(&init, &obs, &targets, &params, &MpaConfig::default()).unwrap();
            let limit = params.c_mv * params.dt + 1e-9;
            for t in 1..sol.traj.len() - 1 {
                let step = (sol.traj.points[t] - sol.traj.points[t - 1]).norm();
                assert!(step <= limit, "seed {seed} step {t} length {step}");
            }
        }
    }

    #[test]
    fn solve_rejects_nonfinite_and_mismatched_inputs() {
        let params = EnergyParams::default();
        let (obs, targets) = straight_problem(6, Vec2::new(1.0, 0.0), params.dt);
        let mut bad = obs.clone();
        bad.points[2].x = f64::NAN;
        assert!(mpa_solve(&bad, &obs, &targets, &params, &MpaConfig::default()).is_err());

        let short = Trajectory::fully_observed(vec![Vec2::zeros(); 5]);
        assert!(mpa_solve(&short, &obs, &targets, &params, &MpaConfig::default()).is_err());
    }

    #[test]
    fn joint_pairwise_mode_separates_crossing_agents() {
        let params = EnergyParams::default();
        let t_len = 9;
        let va = Vec2::new(1.0, 0.5);
        let vb = Vec2::new(1.0, -0.5);
        let mk = |start: Vec2, v: Vec2| {
            Trajectory::fully_observed(
                (0..t_len).map(|t| start + v * (params.dt * t as f64)).collect(),
            )
        };
        // Straight lines crossing at the middle frame.
        let obs_a = mk(Vec2::new(0.0, -3.0), va);
        let obs_b = mk(Vec2::new(0.0, 3.0), vb);
        let targets = |v: Vec2| PriorTargets {
            steps: vec![vec![StepTerm { f: v, lambda: Vec2::new(5.0, 5.0) }]; t_len - 1],
        };
        let min_dist = |trajs: &[Trajectory]| {
            (0..t_len)
                .map(|t| (trajs[0].points[t] - trajs[1].points[t]).norm())
                .fold(f64::INFINITY, f64::min)
        };

        let plain = mpa_solve_joint(
            &[obs_a.clone(), obs_b.clone()],
            &[obs_a.clone(), obs_b.clone()],
            &[targets(va), targets(vb)],
            &params,
            &MpaConfig::default(),
        )
        .unwrap();
        let coupled = mpa_solve_joint(
            &[obs_a.clone(), obs_b.clone()],
            &[obs_a, obs_b],
            &[targets(va), targets(vb)],
            &params,
            &MpaConfig {
                pairwise_min_dist: Some(1.2),
                max_iters: 4000,
                ..MpaConfig::default()
            },
        )
        .unwrap();
        let before = min_dist(&plain.trajs);
        let after = min_dist(&coupled.trajs);
        assert!(before < 0.1, "uncoupled agents should nearly collide, got {before}");
        assert!(
            after > 0.5,
            "pairwise nodes should push agents apart, got {after} (converged: {}, iters {})",
            coupled.converged,
            coupled.iters
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn closed_forms_match_numeric_minimizers(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let np = Vec2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let nc = Vec2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let rho = rng.random_range(0.2..8.0);

            let o = Vec2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let u = if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { 0.0 };
            let x = mpa_min_tracker(np, o, u, rho);
            let sol = quadratic_argmin(
                |v| {
                    let p = Vec2::new(v[0], v[1]);
                    u * (p - o).norm_squared() + 0.5 * rho * (p - np).norm_squared()
                },
                2,
            );
            prop_assert!((x - Vec2::new(sol[0], sol[1])).norm() < 1e-6);

            let lambda = Vec2::new(rng.random_range(0.1..150.0), rng.random_range(0.1..150.0));
            let f = Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let (a, b) = mpa_min_prior(np, nc, f, lambda, rho);
            let sol = quadratic_argmin(|x| pair_objective(x, np, nc, lambda, f, rho), 4);
            prop_assert!((a - Vec2::new(sol[0], sol[1])).norm() < 1e-6);
            prop_assert!((b - Vec2::new(sol[2], sol[3])).norm() < 1e-6);

            let c_kn = rng.random_range(0.1..5.0);
            let (a, b) = mpa_min_kinetic(np, nc, c_kn, rho);
            let sol = quadratic_argmin(
                |x| pair_objective(x, np, nc, Vec2::new(c_kn, c_kn), Vec2::zeros(), rho),
                4,
            );
            prop_assert!((a - Vec2::new(sol[0], sol[1])).norm() < 1e-6);
            prop_assert!((b - Vec2::new(sol[2], sol[3])).norm() < 1e-6);
        }
    }
}
