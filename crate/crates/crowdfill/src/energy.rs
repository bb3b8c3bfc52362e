//! Unary energy terms and the per-agent objective.
//!
//! Every term is a plain evaluation over immutable inputs. The prior term
//! exists in two algebraically equal forms: the position form
//! `lambda * ||x_t - x_{t-1} - dt*f||^2` used by the optimizers, and the
//! velocity form `(1/sigma^2) * ||v_t - f||^2`; both are implemented and
//! cross-checked in tests. Max-velocity is a feasibility report, not an
//! infinite energy, so optimizers can project instead of overflow.

use serde::{Deserialize, Serialize};

use crate::gp::GpFlowModel;
use crate::nn::{build_observation, MlpPrior, ObsParams};
use crate::scenario::Scenario;
use crate::traj::Trajectory;
use crate::{Error, Result, Vec2};

/// Which data-driven prior supplies the velocity targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorKind {
    #[serde(rename = "gp")]
    Gp,
    #[serde(rename = "nn")]
    Nn,
    #[serde(rename = "lincomb")]
    LinComb,
    #[serde(rename = "gp-fed-nn")]
    GpFedNn,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::Gp => "gp",
            PriorKind::Nn => "nn",
            PriorKind::LinComb => "lincomb",
            PriorKind::GpFedNn => "gp-fed-nn",
        }
    }

    pub fn parse(text: &str) -> Result<PriorKind> {
        match text {
            "gp" => Ok(PriorKind::Gp),
            "nn" => Ok(PriorKind::Nn),
            "lincomb" => Ok(PriorKind::LinComb),
            "gp-fed-nn" => Ok(PriorKind::GpFedNn),
            other => Err(Error::invalid(format!(
                "unknown prior kind {other:?}; expected gp, nn, lincomb, or gp-fed-nn"
            ))),
        }
    }

    /// True when the kind evaluates the NN regressor.
    pub fn uses_nn(self) -> bool {
        matches!(self, PriorKind::Nn | PriorKind::LinComb | PriorKind::GpFedNn)
    }

    /// True when the kind queries the GP flow field.
    pub fn uses_gp(self) -> bool {
        matches!(self, PriorKind::Gp | PriorKind::LinComb | PriorKind::GpFedNn)
    }
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Weights shared by every energy term and both optimizers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyParams {
    /// Kinetic weight.
    pub c_kn: f64,
    /// Maximum speed in m/s.
    pub c_mv: f64,
    /// Frame interval in seconds.
    pub dt: f64,
    /// ADMM penalty weight.
    pub rho: f64,
    /// Standard deviation of the NN regressor's residuals.
    pub sigma_nn: f64,
}

impl Default for EnergyParams {
    fn default() -> EnergyParams {
        EnergyParams {
            c_kn: 1.0,
            c_mv: 2.6,
            dt: 1.5,
            rho: 1.0,
            // Chosen so lambda() is 108.0 at the default dt.
            sigma_nn: 1.0 / 243.0_f64.sqrt(),
        }
    }
}

impl EnergyParams {
    /// Position-form NN prior weight, 1/(sigma_nn^2 dt^2).
    pub fn lambda(&self) -> f64 {
        1.0 / (self.sigma_nn * self.sigma_nn * self.dt * self.dt)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("c_kn", self.c_kn),
            ("c_mv", self.c_mv),
            ("dt", self.dt),
            ("rho", self.rho),
            ("sigma_nn", self.sigma_nn),
        ];
        for (name, value) in fields {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::invalid(format!(
                    "energy parameter {name} must be finite and positive, got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// One quadratic term on the step ending at frame t: per-component weight
/// `lambda` on `(x_t - x_{t-1} - dt*f)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTerm {
    /// Target velocity for the step, m/s.
    pub f: Vec2,
    /// Per-component position-form weight.
    pub lambda: Vec2,
}

/// Frozen per-step prior targets for one agent. `steps[k]` holds the terms
/// for the step from frame k to frame k+1; LinComb steps carry two terms.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTargets {
    pub steps: Vec<Vec<StepTerm>>,
}

impl PriorTargets {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Trajectory length these targets are sized for.
    pub fn expected_len(&self) -> usize {
        self.steps.len() + 1
    }

    /// Merge a step's terms into one equivalent quadratic (constant offset
    /// dropped): weights add, targets combine precision-weighted.
    pub fn combined(&self, k: usize) -> StepTerm {
        let mut lambda = Vec2::zeros();
        let mut weighted = Vec2::zeros();
        for term in &self.steps[k] {
            for c in 0..2 {
                lambda[c] += term.lambda[c];
                weighted[c] += term.lambda[c] * term.f[c];
            }
        }
        let mut f = Vec2::zeros();
        for c in 0..2 {
            if lambda[c] > 0.0 {
                f[c] = weighted[c] / lambda[c];
            }
        }
        StepTerm { f, lambda }
    }

    fn check_len(&self, traj: &Trajectory) -> Result<()> {
        if traj.len() != self.expected_len() {
            return Err(Error::invalid(format!(
                "trajectory has {} frames but targets expect {}",
                traj.len(),
                self.expected_len()
            )));
        }
        Ok(())
    }

    /// Composed position form: sum of `lambda_c (dx_c - dt f_c)^2`.
    pub fn energy_position(&self, traj: &Trajectory, dt: f64) -> Result<f64> {
        self.check_len(traj)?;
        let mut total = 0.0;
        for (k, terms) in self.steps.iter().enumerate() {
            let dx = traj.points[k + 1] - traj.points[k];
            for term in terms {
                for c in 0..2 {
                    let r = dx[c] - dt * term.f[c];
                    total += term.lambda[c] * r * r;
                }
            }
        }
        Ok(total)
    }

    /// Velocity form: sum of `(lambda_c dt^2) (v_c - f_c)^2` with v = dx/dt.
    pub fn energy_velocity(&self, traj: &Trajectory, dt: f64) -> Result<f64> {
        self.check_len(traj)?;
        let mut total = 0.0;
        for (k, terms) in self.steps.iter().enumerate() {
            let v = (traj.points[k + 1] - traj.points[k]) / dt;
            for term in terms {
                for c in 0..2 {
                    let r = v[c] - term.f[c];
                    total += term.lambda[c] * dt * dt * r * r;
                }
            }
        }
        Ok(total)
    }
}

/// The fitted prior models an evaluation may draw on.
#[derive(Clone, Copy)]
pub struct PriorModels<'a> {
    pub gp: Option<&'a GpFlowModel>,
    pub nn: Option<&'a MlpPrior>,
}

/// Previous-round multi-agent state the proxy rule reads: `frames[t][i]` is
/// agent i's position at frame t in the last outer iterate.
pub struct WorldView<'a> {
    pub scenario: &'a Scenario,
    pub frames: &'a [Vec<Vec2>],
    pub agent: usize,
    pub obs: ObsParams,
}

impl WorldView<'_> {
    fn validate(&self, params: &EnergyParams) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::invalid("world needs at least two frames"));
        }
        if self.agent >= self.scenario.agents.len() {
            return Err(Error::invalid(format!(
                "agent {} out of range for scenario with {} agents",
                self.agent,
                self.scenario.agents.len()
            )));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if self.agent >= frame.len() {
                return Err(Error::invalid(format!(
                    "frame {t} holds {} agents, agent {} missing",
                    frame.len(),
                    self.agent
                )));
            }
        }
        if (self.obs.dt - params.dt).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "observation dt {} disagrees with energy dt {}",
                self.obs.dt, params.dt
            )));
        }
        Ok(())
    }
}

/// Build the frozen per-step targets for one agent from the previous-round
/// world state. GP queries use the step's start point at time (t-1)*dt; NN
/// observations are built at the step's start frame with neighbor velocities
/// from the frame before it (frame 0 reuses itself, so initial velocities
/// are zero).
pub fn prior_targets(
    kind: PriorKind,
    models: PriorModels<'_>,
    params: &EnergyParams,
    world: &WorldView<'_>,
) -> Result<PriorTargets> {
    params.validate()?;
    world.validate(params)?;
    let gp = match (kind.uses_gp(), models.gp) {
        (true, None) => {
            return Err(Error::invalid(format!(
                "prior kind {kind} requires a fitted GP model"
            )))
        }
        (_, gp) => gp,
    };
    let nn = match (kind.uses_nn(), models.nn) {
        (true, None) => {
            return Err(Error::invalid(format!(
                "prior kind {kind} requires a trained NN model"
            )))
        }
        (_, nn) => nn,
    };
    let goal = world.scenario.agents[world.agent].goal;
    let lambda_nn = params.lambda();
    let mut steps = Vec::with_capacity(world.frames.len() - 1);
    for t in 1..world.frames.len() {
        let start = world.frames[t - 1][world.agent];
        let time = (t - 1) as f64 * params.dt;
        let mut terms = Vec::with_capacity(2);
        if matches!(kind, PriorKind::Gp | PriorKind::LinComb) {
            let pred = gp.unwrap().predict([start.x, start.y, time]);
            let mut lambda = Vec2::zeros();
            for c in 0..2 {
                lambda[c] = 1.0 / (pred.std[c] * pred.std[c] * params.dt * params.dt);
            }
            terms.push(StepTerm { f: pred.mean, lambda });
        }
        if kind.uses_nn() {
            let feed = if kind == PriorKind::GpFedNn { gp } else { None };
            let prev = t.saturating_sub(2);
            let obs = build_observation(
                world.agent,
                &world.frames[t - 1],
                &world.frames[prev],
                time,
                world.scenario,
                goal,
                feed,
                &world.obs,
            )?;
            let velocity = (world.frames[t - 1][world.agent] - world.frames[prev][world.agent])
                / params.dt;
            let f = nn.unwrap().forward(&obs, velocity)?;
            terms.push(StepTerm { f, lambda: Vec2::new(lambda_nn, lambda_nn) });
        }
        steps.push(terms);
    }
    Ok(PriorTargets { steps })
}

/// Tracker term: sum of u_t ||x_t - o_t||^2 with u taken from `obs`.
pub fn e_tracker(traj: &Trajectory, obs: &Trajectory) -> Result<f64> {
    if traj.len() != obs.len() {
        return Err(Error::invalid(format!(
            "trajectory has {} frames but observations have {}",
            traj.len(),
            obs.len()
        )));
    }
    let mut total = 0.0;
    for t in 0..traj.len() {
        let r = traj.points[t] - obs.points[t];
        total += obs.u(t) * r.norm_squared();
    }
    Ok(total)
}

/// Kinetic term: C_kn times the sum of squared step lengths.
pub fn e_kinetic(traj: &Trajectory, c_kn: f64) -> f64 {
    let mut total = 0.0;
    for k in 1..traj.len() {
        total += (traj.points[k] - traj.points[k - 1]).norm_squared();
    }
    c_kn * total
}

/// Max-velocity feasibility. `violations` lists the frames t whose step
/// from t-1 exceeds the limit; the boundary itself is feasible.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxvelReport {
    pub feasible: bool,
    pub violations: Vec<usize>,
}

pub fn e_maxvel(traj: &Trajectory, c_mv: f64, dt: f64) -> MaxvelReport {
    let limit = c_mv * dt;
    let mut violations = Vec::new();
    for t in 1..traj.len() {
        if (traj.points[t] - traj.points[t - 1]).norm() > limit {
            violations.push(t);
        }
    }
    MaxvelReport { feasible: violations.is_empty(), violations }
}

/// Prior term in the composed position form, with targets built fresh from
/// the world state.
pub fn e_prior(
    traj: &Trajectory,
    kind: PriorKind,
    models: PriorModels<'_>,
    params: &EnergyParams,
    world: &WorldView<'_>,
) -> Result<f64> {
    let targets = prior_targets(kind, models, params, world)?;
    targets.energy_position(traj, params.dt)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TotalEnergy {
    pub value: f64,
    pub feasible: bool,
}

/// Per-agent objective: tracker + kinetic + prior, with feasibility from the
/// max-velocity report. Totals add independently across agents; there are no
/// pairwise terms.
pub fn total_energy(
    traj: &Trajectory,
    obs: &Trajectory,
    kind: PriorKind,
    models: PriorModels<'_>,
    params: &EnergyParams,
    world: &WorldView<'_>,
) -> Result<TotalEnergy> {
    let targets = prior_targets(kind, models, params, world)?;
    total_energy_frozen(traj, obs, &targets, params)
}

/// Same objective against already-built targets; the optimizers' descent
/// audits hold targets fixed while the trajectory moves.
pub fn total_energy_frozen(
    traj: &Trajectory,
    obs: &Trajectory,
    targets: &PriorTargets,
    params: &EnergyParams,
) -> Result<TotalEnergy> {
    params.validate()?;
    let value = e_tracker(traj, obs)?
        + e_kinetic(traj, params.c_kn)
        + targets.energy_position(traj, params.dt)?;
    let feasible = e_maxvel(traj, params.c_mv, params.dt).feasible;
    Ok(TotalEnergy { value, feasible })
}
