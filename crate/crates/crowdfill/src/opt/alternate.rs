//! Outer alternation between target building and per-agent solves.
//!
//! Each round freezes the prior targets from the previous round's full
//! multi-agent state, then reconstructs every agent independently against
//! those targets. NN observations see the updated neighbor positions, so
//! coupling flows through the data-driven prior rather than through joint
//! optimization. GP flow queries are frozen at the initial proxy state: the
//! field is a function of space-time fitted offline, and re-querying it
//! along moving iterates lets the reconstruction chase its own tail.
//!
//! An agent whose targets come back bitwise identical to the previous
//! round's keeps its trajectory without re-solving; a pure GP run therefore
//! settles after the first round.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{
    prior_targets, total_energy_frozen, EnergyParams, PriorKind, PriorModels, PriorTargets,
    WorldView,
};
use crate::nn::ObsParams;
use crate::opt::direct::{direct_solve, DirectConfig};
use crate::opt::mpa::{mpa_solve, MpaConfig};
use crate::opt::uks::{uks_solve, UksConfig};
use crate::scenario::Scenario;
use crate::traj::{linear_init, Trajectory};
use crate::{Error, Result, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Mpa,
    Uks,
    Direct,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Mpa => "mpa",
            OptimizerKind::Uks => "uks",
            OptimizerKind::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<OptimizerKind> {
        match s {
            "mpa" => Ok(OptimizerKind::Mpa),
            "uks" => Ok(OptimizerKind::Uks),
            "direct" => Ok(OptimizerKind::Direct),
            other => Err(Error::parse(format!(
                "unknown optimizer '{other}' (expected mpa, uks, or direct)"
            ))),
        }
    }

    pub fn all() -> [OptimizerKind; 3] {
        [OptimizerKind::Mpa, OptimizerKind::Uks, OptimizerKind::Direct]
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct AlternateConfig {
    /// Outer-round budget.
    pub rounds: usize,
    /// Stop once no point moved more than this between rounds, meters.
    pub tol: f64,
    pub optimizer: OptimizerKind,
    pub mpa: MpaConfig,
    pub uks: UksConfig,
    pub direct: DirectConfig,
}

impl Default for AlternateConfig {
    fn default() -> AlternateConfig {
        AlternateConfig {
            rounds: 5,
            tol: 1e-3,
            optimizer: OptimizerKind::Mpa,
            mpa: MpaConfig::default(),
            uks: UksConfig::default(),
            direct: DirectConfig::default(),
        }
    }
}

impl AlternateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("alternate rounds must be at least 1"));
        }
        if !self.tol.is_finite() || self.tol < 0.0 {
            return Err(Error::invalid(format!(
                "alternate tol must be finite and non-negative, got {}",
                self.tol
            )));
        }
        self.mpa.validate()?;
        self.uks.validate()?;
        self.direct.validate()
    }
}

/// One round's bookkeeping: energies are summed over agents under that
/// round's frozen targets.
#[derive(Debug, Clone)]
pub struct RoundAudit {
    /// Largest point displacement any agent saw this round, meters.
    pub max_change: f64,
    /// Frozen energy of the round's starting state.
    pub energy_before: f64,
    /// Frozen energy of the round's solutions.
    pub energy_after: f64,
    /// Agents skipped because their targets did not change.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct AlternateSolution {
    pub trajs: Vec<Trajectory>,
    /// Rounds actually executed.
    pub rounds: usize,
    pub audits: Vec<RoundAudit>,
}

fn frames_of(trajs: &[Trajectory], t_len: usize) -> Vec<Vec<Vec2>> {
    (0..t_len).map(|t| trajs.iter().map(|traj| traj.points[t]).collect()).collect()
}

struct AgentRound {
    traj: Trajectory,
    targets: PriorTargets,
    skipped: bool,
    energy_before: f64,
    energy_after: f64,
    change: f64,
}

/// Reconstruct every agent in the scenario from its observations.
pub fn alternate_optimize(
    scenario: &Scenario,
    observations: &[Trajectory],
    prior: PriorKind,
    models: PriorModels<'_>,
    params: &EnergyParams,
    obs_params: &ObsParams,
    config: &AlternateConfig,
) -> Result<AlternateSolution> {
    params.validate()?;
    config.validate()?;
    let n_agents = scenario.agents.len();
    if observations.len() != n_agents {
        return Err(Error::invalid(format!(
            "{} observation tracks for {} agents",
            observations.len(),
            n_agents
        )));
    }
    if n_agents == 0 {
        return Ok(AlternateSolution { trajs: Vec::new(), rounds: 0, audits: Vec::new() });
    }
    let t_len = scenario.frames;
    for (i, obs) in observations.iter().enumerate() {
        if obs.len() != t_len {
            return Err(Error::invalid(format!(
                "agent {i} has {} frames but the scenario runs {t_len}",
                obs.len()
            )));
        }
    }

    let mut current: Vec<Trajectory> =
        observations.iter().map(linear_init).collect::<Result<_>>()?;

    // GP flow queries stay pinned to the initial proxy state.
    let frozen_gp: Option<Vec<PriorTargets>> = if prior.uses_gp() && prior != PriorKind::GpFedNn
    {
        let frames = frames_of(&current, t_len);
        let per_agent = (0..n_agents)
            .into_par_iter()
            .map(|agent| {
                let world =
                    WorldView { scenario, frames: &frames, agent, obs: *obs_params };
                prior_targets(PriorKind::Gp, models, params, &world)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(per_agent)
    } else {
        None
    };

    let mut prev_targets: Vec<Option<PriorTargets>> = vec![None; n_agents];
    let mut audits: Vec<RoundAudit> = Vec::new();
    let mut rounds = 0;

    for _ in 0..config.rounds {
        rounds += 1;
        let frames = frames_of(&current, t_len);
        let round: Vec<AgentRound> = (0..n_agents)
            .into_par_iter()
            .map(|agent| -> Result<AgentRound> {
                let world =
                    WorldView { scenario, frames: &frames, agent, obs: *obs_params };
                let targets = match prior {
                    PriorKind::Gp => frozen_gp.as_ref().unwrap()[agent].clone(),
                    PriorKind::Nn | PriorKind::GpFedNn => {
                        prior_targets(prior, models, params, &world)?
                    }
                    PriorKind::LinComb => {
                        let nn = prior_targets(PriorKind::Nn, models, params, &world)?;
                        let gp = &frozen_gp.as_ref().unwrap()[agent];
                        let steps = gp
                            .steps
                            .iter()
                            .zip(&nn.steps)
                            .map(|(g, n)| g.iter().chain(n).copied().collect())
                            .collect();
                        PriorTargets { steps }
                    }
                };
                let init = &current[agent];
                let obs = &observations[agent];
                let energy_before =
                    total_energy_frozen(init, obs, &targets, params)?.value;
                let skipped = prev_targets[agent].as_ref() == Some(&targets);
                let traj = if skipped {
                    init.clone()
                } else {
                    match config.optimizer {
                        OptimizerKind::Mpa => {
                            mpa_solve(init, obs, &targets, params, &config.mpa)?.traj
                        }
                        OptimizerKind::Uks => {
                            uks_solve(init, obs, &targets, params, &config.uks)?.traj
                        }
                        OptimizerKind::Direct => {
                            direct_solve(init, obs, &targets, params, &config.direct)?.traj
                        }
                    }
                };
                let energy_after = total_energy_frozen(&traj, obs, &targets, params)?.value;
                let change = (0..t_len)
                    .map(|t| (traj.points[t] - init.points[t]).norm())
                    .fold(0.0f64, f64::max);
                Ok(AgentRound { traj, targets, skipped, energy_before, energy_after, change })
            })
            .collect::<Result<Vec<_>>>()?;

        let max_change = round.iter().map(|r| r.change).fold(0.0f64, f64::max);
        audits.push(RoundAudit {
            max_change,
            energy_before: round.iter().map(|r| r.energy_before).sum(),
            energy_after: round.iter().map(|r| r.energy_after).sum(),
            skipped: round.iter().filter(|r| r.skipped).count(),
        });
        for (agent, r) in round.into_iter().enumerate() {
            current[agent] = r.traj;
            prev_targets[agent] = Some(r.targets);
        }
        if max_change < config.tol {
            break;
        }
    }

    Ok(AlternateSolution { trajs: current, rounds, audits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{GpConfig, GpFlowModel};
    use crate::nn::{MlpConfig, MlpPrior};
    use crate::scenario::AgentSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture_scenario(frames: usize) -> Scenario {
        Scenario {
            name: "alternate-fixture".into(),
            width: 40.0,
            height: 20.0,
            frames,
            scan_range: 10.0,
            obstacles: vec![],
            agents: vec![
                AgentSpec {
                    radius: 0.3,
                    start: Vec2::new(2.0, 10.0),
                    goal: Vec2::new(38.0, 10.0),
                },
                AgentSpec {
                    radius: 0.3,
                    start: Vec2::new(38.0, 9.0),
                    goal: Vec2::new(2.0, 9.0),
                },
            ],
        }
    }

    // Ground truth marches each agent toward its goal at constant velocity.
    fn truth_tracks(scenario: &Scenario, dt: f64, speed: f64) -> Vec<Trajectory> {
        scenario
            .agents
            .iter()
            .map(|a| {
                let dir = (a.goal - a.start).normalize();
                let points = (0..scenario.frames)
                    .map(|t| a.start + dir * (speed * dt * t as f64))
                    .collect();
                Trajectory::fully_observed(points)
            })
            .collect()
    }

    // Arc-shaped truth: a straight chord across a masked gap then has kinked
    // velocities at the mask boundaries, so NN inputs vary along the track
    // and the per-round optimum is not the chord itself.
    fn arc_tracks(scenario: &Scenario, dt: f64) -> Vec<Trajectory> {
        scenario
            .agents
            .iter()
            .map(|a| {
                let dir = (a.goal - a.start).normalize();
                let perp = Vec2::new(-dir.y, dir.x);
                let points = (0..scenario.frames)
                    .map(|t| {
                        let s = t as f64 / (scenario.frames - 1) as f64;
                        a.start
                            + dir * (dt * t as f64)
                            + perp * (2.0 * (std::f64::consts::PI * s).sin())
                    })
                    .collect();
                Trajectory::fully_observed(points)
            })
            .collect()
    }

    fn mask_middles(tracks: &[Trajectory], range: std::ops::Range<usize>) -> Vec<Trajectory> {
        tracks
            .iter()
            .map(|t| {
                let mut obs = t.clone();
                for i in range.clone() {
                    obs.mask[i] = false;
                }
                obs
            })
            .collect()
    }

    // A uniform field with uniform weights keeps the straight-line init
    // optimal (the chord solves the pinned chain exactly), so the flow bends
    // with position to give the solver something to do.
    fn rightward_gp() -> GpFlowModel {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let points: Vec<[f64; 3]> = (0..24)
            .map(|_| {
                [
                    rng.random_range(0.0..40.0),
                    rng.random_range(0.0..20.0),
                    rng.random_range(0.0..20.0),
                ]
            })
            .collect();
        let targets: Vec<[f64; 2]> =
            points.iter().map(|p| [1.0, 0.4 * (p[0] / 40.0 - 0.5)]).collect();
        let config =
            GpConfig { optimizer_restarts: 2, optimizer_iters: 30, ..GpConfig::default() };
        GpFlowModel::fit(&points, &targets, &config).unwrap()
    }

    // A raw random net saturates its output clamp, which would make the
    // targets constant; shrunken weights keep outputs small and varied.
    fn toy_nn(seed: u64) -> MlpPrior {
        let config = MlpConfig {
            branch_depth: 1,
            dv_width: 8,
            dist_width: 8,
            vmap_width: 8,
            trunk_width: 8,
            trunk_depth: 1,
            ..MlpConfig::default()
        };
        let mut nn = MlpPrior::new(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
        let small: Vec<f64> =
            (0..nn.param_count()).map(|_| rng.random_range(-0.2..0.2)).collect();
        nn.set_params(&small).unwrap();
        nn
    }

    #[test]
    fn pure_gp_settles_after_the_first_round() {
        let scenario = fixture_scenario(12);
        let params = EnergyParams::default();
        let truth = truth_tracks(&scenario, params.dt, 1.0);
        let observations = mask_middles(&truth, 4..9);
        let gp = rightward_gp();
        let models = PriorModels { gp: Some(&gp), nn: None };
        for optimizer in OptimizerKind::all() {
            // tol = 0 forces every round to run so the inert tail is visible.
            let config = AlternateConfig { tol: 0.0, optimizer, ..AlternateConfig::default() };
            let sol = alternate_optimize(
                &scenario,
                &observations,
                PriorKind::Gp,
                models,
                &params,
                &ObsParams::default(),
                &config,
            )
            .unwrap();
            assert_eq!(sol.rounds, 5);
            for (i, audit) in sol.audits.iter().enumerate().skip(1) {
                assert!(
                    audit.max_change < 1e-9,
                    "{optimizer}: round {i} still moved {}",
                    audit.max_change
                );
                assert_eq!(audit.skipped, 2, "{optimizer}: round {i} re-solved");
            }
        }
    }

    #[test]
    fn default_tolerance_stops_a_pure_gp_run_early() {
        let scenario = fixture_scenario(12);
        let params = EnergyParams::default();
        let truth = truth_tracks(&scenario, params.dt, 1.0);
        let observations = mask_middles(&truth, 4..9);
        let gp = rightward_gp();
        // The direct solver reaches its per-round optimum in one round, so
        // the frozen targets make round two a no-op and the loop stops.
        let config = AlternateConfig {
            optimizer: OptimizerKind::Direct,
            ..AlternateConfig::default()
        };
        let sol = alternate_optimize(
            &scenario,
            &observations,
            PriorKind::Gp,
            PriorModels { gp: Some(&gp), nn: None },
            &params,
            &ObsParams::default(),
            &config,
        )
        .unwrap();
        assert_eq!(sol.rounds, 2);
        assert!(sol.audits[1].max_change < 1e-9);
        assert_eq!(sol.audits[1].skipped, 2);
    }

    #[test]
    fn nn_rounds_rebuild_observations_from_the_new_state() {
        let scenario = fixture_scenario(12);
        let params = EnergyParams::default();
        let truth = arc_tracks(&scenario, params.dt);
        let observations = mask_middles(&truth, 3..9);
        let nn = toy_nn(4);
        let config = AlternateConfig {
            tol: 0.0,
            optimizer: OptimizerKind::Direct,
            ..AlternateConfig::default()
        };
        let sol = alternate_optimize(
            &scenario,
            &observations,
            PriorKind::Nn,
            PriorModels { gp: None, nn: Some(&nn) },
            &params,
            &ObsParams::default(),
            &config,
        )
        .unwrap();
        assert_eq!(sol.rounds, 5);
        // Round two genuinely re-solves: the state moved, so targets moved.
        assert_eq!(sol.audits[1].skipped, 0);
        assert!(sol.audits[1].max_change > 0.0);
        for (agent, traj) in sol.trajs.iter().enumerate() {
            for t in 0..12 {
                assert!(traj.points[t].x.is_finite() && traj.points[t].y.is_finite());
                if observations[agent].u(t) == 1.0 {
                    assert_eq!(traj.points[t], observations[agent].points[t]);
                }
            }
        }
    }

    #[test]
    fn direct_rounds_never_raise_the_frozen_energy() {
        let scenario = fixture_scenario(12);
        let params = EnergyParams::default();
        let truth = arc_tracks(&scenario, params.dt);
        let observations = mask_middles(&truth, 3..9);
        let nn = toy_nn(6);
        let gp = rightward_gp();
        let config = AlternateConfig {
            tol: 0.0,
            optimizer: OptimizerKind::Direct,
            ..AlternateConfig::default()
        };
        let sol = alternate_optimize(
            &scenario,
            &observations,
            PriorKind::LinComb,
            PriorModels { gp: Some(&gp), nn: Some(&nn) },
            &params,
            &ObsParams::default(),
            &config,
        )
        .unwrap();
        for (i, audit) in sol.audits.iter().enumerate() {
            assert!(
                audit.energy_after <= audit.energy_before + 1e-9,
                "round {i}: {} -> {}",
                audit.energy_before,
                audit.energy_after
            );
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let scenario = fixture_scenario(10);
        let params = EnergyParams::default();
        let truth = arc_tracks(&scenario, params.dt);
        let observations = mask_middles(&truth, 3..7);
        let nn = toy_nn(2);
        let gp = rightward_gp();
        let models = PriorModels { gp: Some(&gp), nn: Some(&nn) };
        let config = AlternateConfig::default();
        let run = || {
            alternate_optimize(
                &scenario,
                &observations,
                PriorKind::LinComb,
                models,
                &params,
                &ObsParams::default(),
                &config,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.rounds, b.rounds);
        for (ta, tb) in a.trajs.iter().zip(&b.trajs) {
            for t in 0..10 {
                assert_eq!(ta.points[t], tb.points[t]);
            }
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let scenario = fixture_scenario(10);
        let params = EnergyParams::default();
        let truth = truth_tracks(&scenario, params.dt, 1.0);
        let observations = mask_middles(&truth, 3..7);
        let gp = rightward_gp();
        let models = PriorModels { gp: Some(&gp), nn: None };
        let config = AlternateConfig::default();
        let obs_params = ObsParams::default();

        let one_track = &observations[..1];
        assert!(alternate_optimize(
            &scenario, one_track, PriorKind::Gp, models, &params, &obs_params, &config
        )
        .is_err());

        let mut short = observations.clone();
        short[1].points.pop();
        short[1].mask.pop();
        assert!(alternate_optimize(
            &scenario, &short, PriorKind::Gp, models, &params, &obs_params, &config
        )
        .is_err());

        // NN prior without a model.
        assert!(alternate_optimize(
            &scenario, &observations, PriorKind::Nn, models, &params, &obs_params, &config
        )
        .is_err());

        let bad = AlternateConfig { rounds: 0, ..AlternateConfig::default() };
        assert!(alternate_optimize(
            &scenario, &observations, PriorKind::Gp, models, &params, &obs_params, &bad
        )
        .is_err());
    }
}
