//! Social-force ground-truth simulator.
//!
//! Agents are driven toward their goals by a relaxation force and pushed
//! apart by exponential repulsion from other agents and obstacles, the
//! classic circular-specification pedestrian model. Integration runs at a
//! fine internal step; emitted frames subsample it so that consecutive
//! frames are `sim_step * frame_subsample` seconds apart.

use crate::geom::Rect;
use crate::scenario::Scenario;
use crate::traj::Trajectory;
use crate::{Error, Result, Vec2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SocialForceParams {
    /// Preferred walking speed, m/s.
    pub desired_speed: f64,
    /// Relaxation time toward the desired velocity, s.
    pub relaxation_time: f64,
    /// Agent-agent repulsion strength A, m/s^2.
    pub agent_strength: f64,
    /// Agent-agent repulsion range B, m.
    pub agent_range: f64,
    /// Agent-obstacle repulsion strength, m/s^2.
    pub obstacle_strength: f64,
    /// Agent-obstacle repulsion range, m.
    pub obstacle_range: f64,
    /// Internal integration step, s.
    pub sim_step: f64,
    /// Emit every n-th internal step as a frame.
    pub frame_subsample: usize,
    /// Agents freeze once within this distance of their goal, m.
    pub goal_tolerance: f64,
    /// Hard speed saturation as a multiple of desired_speed.
    pub speed_cap_factor: f64,
    /// Radius of the uniform disk jitter applied to start positions, m.
    pub start_jitter: f64,
}

impl Default for SocialForceParams {
    fn default() -> Self {
        SocialForceParams {
            desired_speed: 1.3,
            relaxation_time: 0.5,
            agent_strength: 2.0,
            agent_range: 0.3,
            obstacle_strength: 4.0,
            obstacle_range: 0.2,
            sim_step: 0.05,
            frame_subsample: 30,
            goal_tolerance: 0.5,
            speed_cap_factor: 1.5,
            start_jitter: 0.5,
        }
    }
}

impl SocialForceParams {
    /// Seconds between emitted frames.
    pub fn frame_dt(&self) -> f64 {
        self.sim_step * self.frame_subsample as f64
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("desired_speed", self.desired_speed),
            ("relaxation_time", self.relaxation_time),
            ("agent_strength", self.agent_strength),
            ("agent_range", self.agent_range),
            ("obstacle_strength", self.obstacle_strength),
            ("obstacle_range", self.obstacle_range),
            ("sim_step", self.sim_step),
            ("goal_tolerance", self.goal_tolerance),
            ("speed_cap_factor", self.speed_cap_factor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("sim params: {name} must be finite and positive")));
            }
        }
        if !(self.start_jitter.is_finite() && self.start_jitter >= 0.0) {
            return Err(Error::invalid("sim params: start_jitter must be finite and non-negative"));
        }
        if self.frame_subsample == 0 {
            return Err(Error::invalid("sim params: frame_subsample must be at least 1"));
        }
        Ok(())
    }
}

struct AgentState {
    pos: Vec2,
    vel: Vec2,
    goal: Vec2,
    radius: f64,
    frozen: bool,
}

fn jittered_starts(
    scenario: &Scenario,
    params: &SocialForceParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec2>> {
    let mut placed: Vec<(Vec2, f64)> = Vec::new();
    for (i, spec) in scenario.agents.iter().enumerate() {
        let ok = |p: Vec2, placed: &[(Vec2, f64)]| {
            p.x >= spec.radius
                && p.x <= scenario.width - spec.radius
                && p.y >= spec.radius
                && p.y <= scenario.height - spec.radius
                && scenario.obstacles.iter().all(|r| r.distance(p) >= spec.radius)
                && placed.iter().all(|&(q, r)| (p - q).norm() >= spec.radius + r)
        };
        let mut chosen = None;
        for _ in 0..100 {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let rad = params.start_jitter * rng.random_range(0.0f64..1.0).sqrt();
            let cand = spec.start + Vec2::new(ang.cos(), ang.sin()) * rad;
            if ok(cand, &placed) {
                chosen = Some(cand);
                break;
            }
        }
        // Fall back to the roster position, which scenario validation
        // guarantees clear of obstacles and other roster starts.
        let p = match chosen {
            Some(p) => p,
            None if ok(spec.start, &placed) => spec.start,
            None => {
                return Err(Error::invalid(format!(
                    "simulate: agent {i} cannot be placed without overlap"
                )))
            }
        };
        placed.push((p, spec.radius));
    }
    Ok(placed.into_iter().map(|(p, _)| p).collect())
}

fn obstacle_force(pos: Vec2, radius: f64, rect: &Rect, params: &SocialForceParams) -> Vec2 {
    let cp = rect.closest_point(pos);
    let d = pos - cp;
    let dist = d.norm();
    if dist <= 1e-9 {
        // Degenerate contact; repulsion direction is undefined.
        return Vec2::zeros();
    }
    d / dist * (params.obstacle_strength * ((radius - dist) / params.obstacle_range).exp())
}

/// Run the simulator. The result has one fully observed trajectory per
/// roster agent, each `scenario.frames` frames long. Initial positions get a
/// deterministic seed-driven jitter; placements that cannot be made
/// overlap-free are rejected.
pub fn simulate(
    scenario: &Scenario,
    params: &SocialForceParams,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    scenario.validate()?;
    params.validate()?;
    if scenario.agents.is_empty() {
        return Err(Error::invalid("simulate: scenario has no agents"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = jittered_starts(scenario, params, &mut rng)?;
    let mut agents: Vec<AgentState> = scenario
        .agents
        .iter()
        .zip(starts)
        .map(|(spec, pos)| AgentState {
            pos,
            vel: Vec2::zeros(),
            goal: spec.goal,
            radius: spec.radius,
            frozen: false,
        })
        .collect();

    let speed_cap = params.desired_speed * params.speed_cap_factor;
    let total_steps = (scenario.frames - 1) * params.frame_subsample;
    let mut frames: Vec<Vec<Vec2>> = vec![agents.iter().map(|a| a.pos).collect()];
    let mut forces = vec![Vec2::zeros(); agents.len()];
    for step in 1..=total_steps {
        for a in agents.iter_mut() {
            if !a.frozen && (a.pos - a.goal).norm() <= params.goal_tolerance {
                a.frozen = true;
                a.vel = Vec2::zeros();
            }
        }
        // Forces read the synchronous pre-step state.
        for (i, a) in agents.iter().enumerate() {
            if a.frozen {
                forces[i] = Vec2::zeros();
                continue;
            }
            let to_goal = a.goal - a.pos;
            let dist_goal = to_goal.norm();
            let desired_vel =
                if dist_goal > 0.0 { to_goal / dist_goal * params.desired_speed } else { Vec2::zeros() };
            let mut f = (desired_vel - a.vel) / params.relaxation_time;
            for (j, b) in agents.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = a.pos - b.pos;
                let dist = d.norm();
                if dist > 0.0 {
                    f += d / dist
                        * (params.agent_strength
                            * ((a.radius + b.radius - dist) / params.agent_range).exp());
                }
            }
            for rect in &scenario.obstacles {
                f += obstacle_force(a.pos, a.radius, rect, params);
            }
            forces[i] = f;
        }
        for (a, &f) in agents.iter_mut().zip(&forces) {
            if a.frozen {
                continue;
            }
            a.vel += f * params.sim_step;
            let speed = a.vel.norm();
            if speed > speed_cap {
                a.vel *= speed_cap / speed;
            }
            a.pos += a.vel * params.sim_step;
            // The world boundary is solid.
            a.pos.x = a.pos.x.clamp(a.radius, scenario.width - a.radius);
            a.pos.y = a.pos.y.clamp(a.radius, scenario.height - a.radius);
        }
        if step % params.frame_subsample == 0 {
            frames.push(agents.iter().map(|a| a.pos).collect());
        }
    }

    Ok((0..agents.len())
        .map(|i| Trajectory::fully_observed(frames.iter().map(|f| f[i]).collect()))
        .collect())
}
