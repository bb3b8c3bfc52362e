//! Experiment harness behind the `crowdfill` binary: dataset generation,
//! prior training, the evaluation grid and report tables.
//!
//! Outputs under the config's `out_dir`:
//!
//! ```text
//! datasets/{scenario}-d{density}-s{seed}.csv   one simulated run each
//! models/{scenario}.gp.json                    per-scenario flow field
//! models/nn.bin, models/nn-gp-fed.bin          pooled regressors, as needed
//! results.csv                                  one row per grid cell
//! timing.csv                                   mean optimize wall clock
//! ranks.csv                                    average ranks over scenarios
//! aggregate.json                               everything above, structured
//! report/fig-*.csv                             plot tables, one per figure
//! ```
//!
//! Every output except the wall-clock columns is byte-deterministic in the
//! config: `results.csv` with its last column stripped, `ranks.csv` and the
//! figure tables compare equal across reruns. Timing lives in `timing.csv`
//! and the last `results.csv` column only.

use crate::config::ExperimentConfig;
use crate::dataset::{read_dataset, write_dataset, DatasetMeta};
use crate::energy::{EnergyParams, PriorKind, PriorModels};
use crate::geom::count_collisions;
use crate::gp::{GpConfig, GpFlowModel};
use crate::metrics::{rank_methods, relative_dtw, EvalReport};
use crate::nn::{build_observation, MlpConfig, MlpPrior, ObsParams, Sample, TrainConfig};
use crate::opt::alternate::{alternate_optimize, AlternateConfig, OptimizerKind};
use crate::opt::mpa::MpaConfig;
use crate::scenario::Scenario;
use crate::sim::{simulate, SocialForceParams};
use crate::traj::{linear_init, mask_segment, split_train_test, Trajectory};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

/// Agent share used to fit priors; the held-out share never enters training.
const TRAIN_RATIO: (usize, usize) = (7, 3);
/// Pooled NN sample budget. Keeps desk-scale training in seconds; the cap is
/// applied by a seeded uniform subsample.
const MAX_NN_SAMPLES: usize = 9000;
/// Share of the sample budget drawn from interpolation-corrupted contexts
/// instead of ground-truth ones; see `build_samples`.
const AUG_SHARE: f64 = 0.4;
/// Salt on the dataset seed so the training masks never coincide with the
/// evaluation masks drawn in `evaluate_cell`.
const AUG_MASK_SALT: u64 = 0x5EED_A0B1_C2D3_E4F5;
/// Sweep budget per optimize call at evaluation time. The per-agent graphs
/// tighten slowly near doorways, and the sweeps must reach the same minima
/// the line-search solver finds for the optimizer comparison to be fair.
const MPA_EVAL_ITERS: usize = 1500;

const GP_FIT_SEED: u64 = 11;
const NN_INIT_SEED: u64 = 12;
const NN_TRAIN_SEED: u64 = 13;
const NN_FED_INIT_SEED: u64 = 14;
const NN_FED_TRAIN_SEED: u64 = 15;
const NN_SAMPLE_SEED: u64 = 16;

/// Bounds on the recorded residual spread accepted as an energy weight. A
/// degenerate fit must not turn into an unbounded or vanishing lambda.
const SIGMA_NN_FLOOR: f64 = 1e-3;
const SIGMA_NN_CEIL: f64 = 10.0;

fn desk_gp_config() -> GpConfig {
    GpConfig { max_points: 512, optimizer_restarts: 2, optimizer_iters: 80, seed: GP_FIT_SEED }
}

/// Shrunk network for desk-scale runs; the full-size default layout trains
/// for hours and needs the paper's 800k-sample corpus to pay off.
fn desk_mlp_config(gp_branch: bool) -> MlpConfig {
    MlpConfig {
        gp_branch,
        branch_depth: 2,
        dv_width: 24,
        dist_width: 32,
        vmap_width: 32,
        gp_width: 16,
        trunk_width: 64,
        trunk_depth: 2,
        clamp: 2.6,
    }
}

fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig { lr: 1e-3, batch: 64, dropout: 0.1, max_epochs: 90, patience: 10, seed }
}

fn datasets_dir(out: &Path) -> PathBuf {
    out.join("datasets")
}

fn models_dir(out: &Path) -> PathBuf {
    out.join("models")
}

fn report_dir(out: &Path) -> PathBuf {
    out.join("report")
}

fn dataset_path(out: &Path, scenario: &str, density: usize, seed: u64) -> PathBuf {
    datasets_dir(out).join(format!("{scenario}-d{density}-s{seed}.csv"))
}

fn gp_model_path(out: &Path, scenario: &str) -> PathBuf {
    models_dir(out).join(format!("{scenario}.gp.json"))
}

fn nn_model_path(out: &Path, gp_fed: bool) -> PathBuf {
    models_dir(out).join(if gp_fed { "nn-gp-fed.bin" } else { "nn.bin" })
}

/// Per-agent masking seed. Decorrelates block positions across agents within
/// one run without touching the dataset seed.
fn mask_seed(seed: u64, agent: usize) -> u64 {
    seed ^ (agent as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_scenarios(config: &ExperimentConfig) -> Result<Vec<Scenario>> {
    let mut scenarios = Vec::with_capacity(config.scenarios.len());
    for entry in &config.scenarios {
        let scenario = Scenario::load(Path::new(entry))?;
        scenarios.push(scenario);
    }
    for i in 0..scenarios.len() {
        for j in i + 1..scenarios.len() {
            if scenarios[i].name == scenarios[j].name {
                return Err(Error::invalid(format!(
                    "config: two scenario files share the name {}",
                    scenarios[i].name
                )));
            }
        }
    }
    Ok(scenarios)
}

/// Agent counts evaluated for a scenario; the first entry is also the count
/// priors are trained at.
fn densities_for(config: &ExperimentConfig, scenario: &Scenario) -> Vec<usize> {
    if config.densities.is_empty() {
        vec![scenario.agents.len()]
    } else {
        config.densities.clone()
    }
}

/// The roster actually simulated for (scenario, density, seed). Evaluation
/// rebuilds it with the same arguments, so the two always agree.
fn scenario_at_density(scenario: &Scenario, density: usize, seed: u64) -> Result<Scenario> {
    if density == scenario.agents.len() {
        Ok(scenario.clone())
    } else {
        scenario.with_density(density, seed)
    }
}

#[derive(Debug)]
pub struct GenerateSummary {
    pub files: Vec<PathBuf>,
}

/// Simulate every (scenario, density, seed) run and write the dataset files.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<GenerateSummary> {
    config.validate()?;
    let scenarios = load_scenarios(config)?;
    let out = Path::new(&config.out_dir);
    ensure_dir(&datasets_dir(out))?;
    let sf = SocialForceParams::default();
    let mut files = Vec::new();
    for scenario in &scenarios {
        for &density in &densities_for(config, scenario) {
            for &seed in &config.seeds {
                let scn = scenario_at_density(scenario, density, seed)?;
                let trajs = simulate(&scn, &sf, seed)?;
                let meta = DatasetMeta {
                    scenario: scenario.name.clone(),
                    dt: sf.frame_dt(),
                    seed,
                    density,
                };
                let path = dataset_path(out, &scenario.name, density, seed);
                write_dataset(&path, &meta, &trajs)?;
                files.push(path);
            }
        }
    }
    Ok(GenerateSummary { files })
}

/// One training run: the roster it was simulated on, its trajectories and
/// the indices of the agents the priors may learn from.
struct TrainRun {
    meta: DatasetMeta,
    scn: Scenario,
    trajs: Vec<Trajectory>,
    train_agents: Vec<usize>,
}

fn load_train_runs(
    config: &ExperimentConfig,
    scenario: &Scenario,
    out: &Path,
) -> Result<Vec<TrainRun>> {
    let density = densities_for(config, scenario)[0];
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let path = dataset_path(out, &scenario.name, density, seed);
        if !path.exists() {
            return Err(Error::invalid(format!(
                "dataset {} missing; run the generate command first",
                path.display()
            )));
        }
        let (meta, trajs) = read_dataset(&path)?;
        let scn = scenario_at_density(scenario, density, seed)?;
        if scn.agents.len() != trajs.len() {
            return Err(Error::invalid(format!(
                "dataset {} has {} agents but the scenario roster has {}",
                path.display(),
                trajs.len(),
                scn.agents.len()
            )));
        }
        let (train_agents, _) = split_train_test(trajs.len(), TRAIN_RATIO, seed)?;
        runs.push(TrainRun { meta, scn, trajs, train_agents });
    }
    Ok(runs)
}

fn fit_scenario_gp(runs: &[TrainRun]) -> Result<GpFlowModel> {
    let mut points = Vec::new();
    let mut velocities = Vec::new();
    for run in runs {
        let dt = run.meta.dt;
        for &agent in &run.train_agents {
            let track = &run.trajs[agent].points;
            for s in 0..track.len() - 1 {
                let p = track[s];
                let v = (track[s + 1] - p) / dt;
                points.push([p.x, p.y, s as f64 * dt]);
                velocities.push([v.x, v.y]);
            }
        }
    }
    GpFlowModel::fit(&points, &velocities, &desk_gp_config())
}

/// Coordinates of one candidate NN sample: (run, agent, frame, whether the
/// context comes from the corrupted copy of the run).
type SampleKey = (usize, usize, usize, bool);

fn sample_candidates(runs_by_scenario: &[Vec<TrainRun>]) -> Vec<(usize, SampleKey)> {
    let mut keys = Vec::new();
    for (si, runs) in runs_by_scenario.iter().enumerate() {
        for (ri, run) in runs.iter().enumerate() {
            let len = run.trajs[0].len();
            for &agent in &run.train_agents {
                for s in 0..len - 1 {
                    keys.push((si, (ri, agent, s, false)));
                }
            }
        }
    }
    keys
}

/// The run as the optimizers first see it: one hidden block per agent,
/// filled by linear interpolation. Mask seeds are salted so these never
/// reproduce an evaluation mask.
fn corrupted_state(run: &TrainRun, fraction: f64) -> Result<Vec<Trajectory>> {
    run.trajs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let masked = mask_segment(t, fraction, mask_seed(run.meta.seed ^ AUG_MASK_SALT, i))?;
            linear_init(&masked)
        })
        .collect()
}

/// Candidate frames whose context the corruption actually touched: the
/// frame itself or the one behind it falls in the agent's hidden block.
fn corrupted_candidates(
    runs_by_scenario: &[Vec<TrainRun>],
    states: &[Vec<Vec<Trajectory>>],
) -> Vec<(usize, SampleKey)> {
    let mut keys = Vec::new();
    for (si, runs) in runs_by_scenario.iter().enumerate() {
        for (ri, run) in runs.iter().enumerate() {
            let len = run.trajs[0].len();
            for &agent in &run.train_agents {
                let mask = &states[si][ri][agent].mask;
                for s in 0..len - 1 {
                    if !mask[s] || !mask[s.saturating_sub(1)] {
                        keys.push((si, (ri, agent, s, true)));
                    }
                }
            }
        }
    }
    keys
}

/// Build pooled training samples, mirroring the observation convention the
/// energy uses at inference time: the observation at frame s looks back to
/// frame s-1 (saturating at the start) and regresses the velocity of the
/// step leaving s.
///
/// Two pools feed the budget. Most samples read their context off the true
/// tracks. The rest read it off a masked-and-interpolated copy of the run,
/// labeled with the pull back onto the true path, because that corrupted
/// context is exactly what the regressor is queried with during the first
/// reconstruction rounds; trained on clean contexts only, it extrapolates
/// there with unearned confidence.
fn build_samples(
    runs_by_scenario: &[Vec<TrainRun>],
    gp_models: Option<&HashMap<String, GpFlowModel>>,
    mask_fraction: f64,
) -> Result<Vec<Sample>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let states: Vec<Vec<Vec<Trajectory>>> = runs_by_scenario
        .iter()
        .map(|runs| runs.iter().map(|run| corrupted_state(run, mask_fraction)).collect())
        .collect::<Result<_>>()?;
    let mut clean = sample_candidates(runs_by_scenario);
    if clean.is_empty() {
        return Err(Error::invalid("training: no samples; datasets are too short"));
    }
    let mut corrupted = corrupted_candidates(runs_by_scenario, &states);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(NN_SAMPLE_SEED);
    clean.shuffle(&mut rng);
    corrupted.shuffle(&mut rng);
    corrupted.truncate((MAX_NN_SAMPLES as f64 * AUG_SHARE) as usize);
    clean.truncate(MAX_NN_SAMPLES - corrupted.len());
    let mut keys = clean;
    keys.append(&mut corrupted);
    // Reshuffled so the validation split drawn inside training sees the
    // same blend of contexts the training half does.
    keys.shuffle(&mut rng);
    let mut samples = Vec::with_capacity(keys.len());
    for (si, (ri, agent, s, corrupted)) in keys {
        let run = &runs_by_scenario[si][ri];
        let tracks = if corrupted { &states[si][ri] } else { &run.trajs };
        let dt = run.meta.dt;
        let obs_params = ObsParams { dt, ..Default::default() };
        let gp = gp_models.map(|m| &m[&run.meta.scenario]);
        let prev = s.saturating_sub(1);
        let positions: Vec<_> = tracks.iter().map(|t| t.points[s]).collect();
        let prev_positions: Vec<_> = tracks.iter().map(|t| t.points[prev]).collect();
        let obs = build_observation(
            agent,
            &positions,
            &prev_positions,
            s as f64 * dt,
            &run.scn,
            run.scn.agents[agent].goal,
            gp,
            &obs_params,
        )?;
        let velocity = (positions[agent] - prev_positions[agent]) / dt;
        // On true contexts this is the observed step velocity. On corrupted
        // ones it points from the interpolated position to the next true
        // one, capped at the output clamp so the label stays reachable.
        let mut target = (run.trajs[agent].points[s + 1] - positions[agent]) / dt;
        if corrupted {
            let cap = 2.0 * obs_params.desired_speed;
            let norm = target.norm();
            if norm > cap {
                target *= cap / norm;
            }
        }
        samples.push(Sample { obs, velocity, target });
    }
    Ok(samples)
}

#[derive(Debug)]
pub struct NnTrainOutcome {
    pub path: PathBuf,
    pub sigma_nn: f64,
    pub val_mse: f64,
    pub epochs_run: usize,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub gp_files: Vec<PathBuf>,
    pub nn: Vec<NnTrainOutcome>,
}

/// Fit one GP flow model per scenario and the pooled NN variants the
/// config's priors call for.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainSummary> {
    config.validate()?;
    let scenarios = load_scenarios(config)?;
    let out = Path::new(&config.out_dir);
    ensure_dir(&models_dir(out))?;

    let needs_gp = config.priors.iter().any(|p| p.uses_gp());
    let needs_plain = config
        .priors
        .iter()
        .any(|p| matches!(p, PriorKind::Nn | PriorKind::LinComb));
    let needs_fed = config.priors.contains(&PriorKind::GpFedNn);

    let runs_by_scenario: Vec<Vec<TrainRun>> = scenarios
        .iter()
        .map(|scenario| load_train_runs(config, scenario, out))
        .collect::<Result<_>>()?;

    let mut gp_files = Vec::new();
    let mut gp_models = HashMap::new();
    if needs_gp {
        let fitted: Vec<(String, Result<GpFlowModel>)> = scenarios
            .par_iter()
            .zip(&runs_by_scenario)
            .map(|(scenario, runs)| (scenario.name.clone(), fit_scenario_gp(runs)))
            .collect();
        for (name, model) in fitted {
            let model = model?;
            let path = gp_model_path(out, &name);
            model.save(&path)?;
            gp_files.push(path);
            gp_models.insert(name, model);
        }
    }

    let mut nn = Vec::new();
    if needs_plain {
        let samples = build_samples(&runs_by_scenario, None, config.mask_fraction)?;
        let mut model = MlpPrior::new(&desk_mlp_config(false), NN_INIT_SEED)?;
        let report = model.train(&samples, &desk_train_config(NN_TRAIN_SEED))?;
        let path = nn_model_path(out, false);
        model.save(&path)?;
        nn.push(NnTrainOutcome {
            path,
            sigma_nn: report.sigma_nn,
            val_mse: report.best_val_mse,
            epochs_run: report.epochs_run,
        });
    }
    if needs_fed {
        let samples = build_samples(&runs_by_scenario, Some(&gp_models), config.mask_fraction)?;
        let mut model = MlpPrior::new(&desk_mlp_config(true), NN_FED_INIT_SEED)?;
        let report = model.train(&samples, &desk_train_config(NN_FED_TRAIN_SEED))?;
        let path = nn_model_path(out, true);
        model.save(&path)?;
        nn.push(NnTrainOutcome {
            path,
            sigma_nn: report.sigma_nn,
            val_mse: report.best_val_mse,
            epochs_run: report.epochs_run,
        });
    }
    Ok(TrainSummary { gp_files, nn })
}

/// Everything one grid cell records. `metrics` is absent when the cell
/// failed; `status` then carries the reason.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellRecord {
    pub scenario: String,
    pub density: usize,
    pub seed: u64,
    pub prior: PriorKind,
    pub optimizer: OptimizerKind,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<CellMetrics>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellMetrics {
    pub agents: usize,
    pub rounds: usize,
    /// Per-agent mean relative DTW of the reconstruction, percent.
    pub rel_dtw_pct: f64,
    /// Same metric for the untouched linear interpolation baseline.
    pub rel_dtw_linear_pct: f64,
    pub rel_dtw_per_agent_pct: Vec<f64>,
    pub agent_agent_collisions: u64,
    pub agent_obstacle_collisions: u64,
    pub wallclock_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankedMethod {
    pub prior: PriorKind,
    pub optimizer: OptimizerKind,
    pub average_rank: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankTable {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub methods: Vec<RankedMethod>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingRow {
    pub scenario: String,
    pub density: usize,
    pub prior: PriorKind,
    pub optimizer: OptimizerKind,
    pub seeds_counted: usize,
    pub mean_wallclock_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub cells: Vec<CellRecord>,
    pub rank_tables: Vec<RankTable>,
    pub timing: Vec<TimingRow>,
}

#[derive(Debug)]
pub struct EvaluateSummary {
    pub cells: usize,
    pub failures: usize,
    pub files: Vec<PathBuf>,
}

struct EvalContext<'a> {
    config: &'a ExperimentConfig,
    out: &'a Path,
    gp_models: HashMap<String, GpFlowModel>,
    nn_plain: Option<MlpPrior>,
    nn_fed: Option<MlpPrior>,
    base_params: EnergyParams,
}

fn sanitize_status(msg: &str) -> String {
    msg.replace(',', ";").replace(['\n', '\r'], " ")
}

fn models_for<'a>(
    ctx: &'a EvalContext<'_>,
    scenario: &str,
    prior: PriorKind,
) -> Result<PriorModels<'a>> {
    let gp = if prior.uses_gp() {
        Some(ctx.gp_models.get(scenario).ok_or_else(|| {
            Error::invalid(format!("no GP model for scenario {scenario}; run the train command"))
        })?)
    } else {
        None
    };
    let nn = match prior {
        PriorKind::Gp => None,
        PriorKind::Nn | PriorKind::LinComb => Some(ctx.nn_plain.as_ref().ok_or_else(|| {
            Error::invalid("no plain NN model; run the train command".to_string())
        })?),
        PriorKind::GpFedNn => Some(ctx.nn_fed.as_ref().ok_or_else(|| {
            Error::invalid("no GP-fed NN model; run the train command".to_string())
        })?),
    };
    Ok(PriorModels { gp, nn })
}

fn evaluate_cell(
    ctx: &EvalContext<'_>,
    scenario: &Scenario,
    density: usize,
    seed: u64,
    prior: PriorKind,
    optimizer: OptimizerKind,
) -> Result<CellMetrics> {
    let path = dataset_path(ctx.out, &scenario.name, density, seed);
    if !path.exists() {
        return Err(Error::invalid(format!(
            "dataset {} missing; run the generate command first",
            path.display()
        )));
    }
    let (meta, truth) = read_dataset(&path)?;
    let scn = scenario_at_density(scenario, density, seed)?;
    if scn.agents.len() != truth.len() {
        return Err(Error::invalid(format!(
            "dataset {} has {} agents but the roster has {}",
            path.display(),
            truth.len(),
            scn.agents.len()
        )));
    }

    let mut params = ctx.base_params;
    if ctx.config.energy.dt.is_none() {
        params.dt = meta.dt;
    }
    if prior.uses_nn() && ctx.config.energy.sigma_nn.is_none() {
        let model = match prior {
            PriorKind::GpFedNn => ctx.nn_fed.as_ref(),
            _ => ctx.nn_plain.as_ref(),
        };
        if let Some(sigma) = model.and_then(|m| m.sigma_nn()) {
            params.sigma_nn = sigma.clamp(SIGMA_NN_FLOOR, SIGMA_NN_CEIL);
        }
    }
    params.validate()?;
    let obs_params = ObsParams { dt: params.dt, ..Default::default() };

    let observations: Vec<Trajectory> = truth
        .iter()
        .enumerate()
        .map(|(i, t)| mask_segment(t, ctx.config.mask_fraction, mask_seed(seed, i)))
        .collect::<Result<_>>()?;

    // Baseline: the optimizer's own starting point, scored as-is.
    let baseline: Vec<Trajectory> =
        observations.iter().map(linear_init).collect::<Result<_>>()?;
    let mut rel_linear = Vec::new();
    let mut rel_agents = Vec::new();
    for (i, init) in baseline.iter().enumerate() {
        match relative_dtw(init, &truth[i]) {
            Ok(v) => {
                rel_linear.push(v);
                rel_agents.push(i);
            }
            // A stationary ground-truth track has no defined score; the
            // agent is skipped consistently in baseline and reconstruction.
            Err(_) => continue,
        }
    }
    if rel_agents.is_empty() {
        return Err(Error::invalid("no agent has a defined relative DTW score"));
    }

    let models = models_for(ctx, &scenario.name, prior)?;
    let alt = AlternateConfig {
        rounds: ctx.config.outer_iters,
        // Zero tolerance forces the full round budget; scores are measured
        // after the last round, and converged rounds are skipped for free.
        tol: 0.0,
        optimizer,
        mpa: MpaConfig { max_iters: MPA_EVAL_ITERS, ..Default::default() },
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    let solution = alternate_optimize(&scn, &observations, prior, models, &params, &obs_params, &alt)?;
    let wallclock_seconds = t0.elapsed().as_secs_f64();

    let mut rels = Vec::with_capacity(rel_agents.len());
    for &i in &rel_agents {
        rels.push(relative_dtw(&solution.trajs[i], &truth[i])?);
    }
    let tracks: Vec<Vec<crate::Vec2>> =
        solution.trajs.iter().map(|t| t.points.clone()).collect();
    let radii: Vec<f64> = scn.agents.iter().map(|a| a.radius).collect();
    let counts = count_collisions(&tracks, &radii, &scn.obstacles)?;
    let report = EvalReport::new(
        scenario.name.clone(),
        prior.as_str(),
        optimizer.as_str(),
        rels,
        counts,
        wallclock_seconds,
        scn.agents.len(),
    )?;
    Ok(CellMetrics {
        agents: report.agent_count,
        rounds: solution.rounds,
        rel_dtw_pct: report.relative_dtw_mean_percent,
        rel_dtw_linear_pct: rel_linear.iter().sum::<f64>() / rel_linear.len() as f64,
        rel_dtw_per_agent_pct: report.relative_dtw_percent,
        agent_agent_collisions: report.agent_agent_collisions,
        agent_obstacle_collisions: report.agent_obstacle_collisions,
        wallclock_seconds,
    })
}

const RESULTS_HEADER: &str = "scenario,density,seed,prior,optimizer,status,agents,rounds,\
                              rel_dtw_pct,rel_dtw_linear_pct,agent_agent_collisions,\
                              agent_obstacle_collisions,wallclock_seconds";

fn results_csv(cells: &[CellRecord]) -> String {
    let mut csv = String::from(RESULTS_HEADER.split_whitespace().collect::<String>());
    csv.push('\n');
    for cell in cells {
        let coords = format!(
            "{},{},{},{},{}",
            cell.scenario, cell.density, cell.seed, cell.prior, cell.optimizer
        );
        match &cell.metrics {
            Some(m) => {
                csv.push_str(&format!(
                    "{coords},ok,{},{},{},{},{},{},{}\n",
                    m.agents,
                    m.rounds,
                    m.rel_dtw_pct,
                    m.rel_dtw_linear_pct,
                    m.agent_agent_collisions,
                    m.agent_obstacle_collisions,
                    m.wallclock_seconds
                ));
            }
            None => csv.push_str(&format!("{coords},{},,,,,,,\n", cell.status)),
        }
    }
    csv
}

/// Metrics the rank table covers. Wall clock is excluded on purpose: rank
/// tables must be byte-deterministic and timing belongs to `timing.csv`.
const RANK_METRICS: [&str; 3] =
    ["rel_dtw_pct", "agent_agent_collisions", "agent_obstacle_collisions"];

fn metric_value(metrics: &CellMetrics, name: &str) -> f64 {
    match name {
        "rel_dtw_pct" => metrics.rel_dtw_pct,
        "agent_agent_collisions" => metrics.agent_agent_collisions as f64,
        "agent_obstacle_collisions" => metrics.agent_obstacle_collisions as f64,
        _ => unreachable!("unknown rank metric {name}"),
    }
}

fn build_rank_tables(config: &ExperimentConfig, cells: &[CellRecord]) -> Vec<RankTable> {
    let methods: Vec<(PriorKind, OptimizerKind)> = config
        .priors
        .iter()
        .flat_map(|&p| config.optimizers.iter().map(move |&o| (p, o)))
        .collect();
    let mut columns: Vec<(String, usize)> = Vec::new();
    for cell in cells {
        let key = (cell.scenario.clone(), cell.density);
        if !columns.contains(&key) {
            columns.push(key);
        }
    }
    RANK_METRICS
        .iter()
        .map(|&metric| {
            let mut scores = vec![vec![f64::NAN; columns.len()]; methods.len()];
            for (mi, &(prior, optimizer)) in methods.iter().enumerate() {
                for (ci, (scenario, density)) in columns.iter().enumerate() {
                    let values: Vec<f64> = cells
                        .iter()
                        .filter(|c| {
                            c.prior == prior
                                && c.optimizer == optimizer
                                && &c.scenario == scenario
                                && c.density == *density
                        })
                        .filter_map(|c| c.metrics.as_ref())
                        .map(|m| metric_value(m, metric))
                        .collect();
                    // Ranks compare means over the same seeds; a coordinate
                    // with any failed seed stays missing and poisons the
                    // table instead of skewing it.
                    if values.len() == config.seeds.len() {
                        scores[mi][ci] = values.iter().sum::<f64>() / values.len() as f64;
                    }
                }
            }
            match rank_methods(&scores) {
                Ok(ranks) => RankTable {
                    metric: metric.to_string(),
                    error: None,
                    methods: methods
                        .iter()
                        .zip(ranks)
                        .map(|(&(prior, optimizer), average_rank)| RankedMethod {
                            prior,
                            optimizer,
                            average_rank,
                        })
                        .collect(),
                },
                Err(e) => RankTable {
                    metric: metric.to_string(),
                    error: Some(e.to_string()),
                    methods: Vec::new(),
                },
            }
        })
        .collect()
}

fn build_timing(cells: &[CellRecord]) -> Vec<TimingRow> {
    let mut rows = Vec::new();
    for cell in cells {
        let exists = rows.iter().any(|r: &TimingRow| {
            r.scenario == cell.scenario
                && r.density == cell.density
                && r.prior == cell.prior
                && r.optimizer == cell.optimizer
        });
        if exists {
            continue;
        }
        let clocks: Vec<f64> = cells
            .iter()
            .filter(|c| {
                c.scenario == cell.scenario
                    && c.density == cell.density
                    && c.prior == cell.prior
                    && c.optimizer == cell.optimizer
            })
            .filter_map(|c| c.metrics.as_ref())
            .map(|m| m.wallclock_seconds)
            .collect();
        if clocks.is_empty() {
            continue;
        }
        rows.push(TimingRow {
            scenario: cell.scenario.clone(),
            density: cell.density,
            prior: cell.prior,
            optimizer: cell.optimizer,
            seeds_counted: clocks.len(),
            mean_wallclock_seconds: clocks.iter().sum::<f64>() / clocks.len() as f64,
        });
    }
    rows
}

fn ranks_csv(tables: &[RankTable]) -> String {
    let mut csv = String::from("metric,prior,optimizer,average_rank\n");
    for table in tables {
        if table.error.is_some() {
            continue;
        }
        for m in &table.methods {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                table.metric, m.prior, m.optimizer, m.average_rank
            ));
        }
    }
    csv
}

fn timing_csv(rows: &[TimingRow]) -> String {
    let mut csv =
        String::from("scenario,density,prior,optimizer,seeds_counted,mean_wallclock_seconds\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.scenario, r.density, r.prior, r.optimizer, r.seeds_counted, r.mean_wallclock_seconds
        ));
    }
    csv
}

/// Run the full (scenario, density, seed, prior, optimizer) grid. A failed
/// cell is recorded in its row and the grid keeps going; the summary's
/// failure count drives the process exit code.
pub fn cmd_evaluate(config: &ExperimentConfig) -> Result<EvaluateSummary> {
    config.validate()?;
    let scenarios = load_scenarios(config)?;
    let out = Path::new(&config.out_dir);
    ensure_dir(out)?;

    let needs_gp = config.priors.iter().any(|p| p.uses_gp());
    let needs_plain = config
        .priors
        .iter()
        .any(|p| matches!(p, PriorKind::Nn | PriorKind::LinComb));
    let needs_fed = config.priors.contains(&PriorKind::GpFedNn);
    let mut gp_models = HashMap::new();
    if needs_gp {
        for scenario in &scenarios {
            let path = gp_model_path(out, &scenario.name);
            if !path.exists() {
                return Err(Error::invalid(format!(
                    "GP model {} missing; run the train command first",
                    path.display()
                )));
            }
            gp_models.insert(scenario.name.clone(), GpFlowModel::load(&path)?);
        }
    }
    let load_nn = |gp_fed: bool| -> Result<MlpPrior> {
        let path = nn_model_path(out, gp_fed);
        if !path.exists() {
            return Err(Error::invalid(format!(
                "NN model {} missing; run the train command first",
                path.display()
            )));
        }
        MlpPrior::load(&path)
    };
    let ctx = EvalContext {
        config,
        out,
        gp_models,
        nn_plain: if needs_plain { Some(load_nn(false)?) } else { None },
        nn_fed: if needs_fed { Some(load_nn(true)?) } else { None },
        base_params: config.energy_params()?,
    };

    let mut cells_spec = Vec::new();
    for (si, scenario) in scenarios.iter().enumerate() {
        for &density in &densities_for(config, scenario) {
            for &seed in &config.seeds {
                for &prior in &config.priors {
                    for &optimizer in &config.optimizers {
                        cells_spec.push((si, density, seed, prior, optimizer));
                    }
                }
            }
        }
    }
    let cells: Vec<CellRecord> = cells_spec
        .par_iter()
        .map(|&(si, density, seed, prior, optimizer)| {
            let scenario = &scenarios[si];
            let outcome = evaluate_cell(&ctx, scenario, density, seed, prior, optimizer);
            match outcome {
                Ok(metrics) => CellRecord {
                    scenario: scenario.name.clone(),
                    density,
                    seed,
                    prior,
                    optimizer,
                    status: "ok".to_string(),
                    metrics: Some(metrics),
                },
                Err(e) => CellRecord {
                    scenario: scenario.name.clone(),
                    density,
                    seed,
                    prior,
                    optimizer,
                    status: format!("failed: {}", sanitize_status(&e.to_string())),
                    metrics: None,
                },
            }
        })
        .collect();

    let failures = cells.iter().filter(|c| c.metrics.is_none()).count();
    let rank_tables = build_rank_tables(config, &cells);
    let timing = build_timing(&cells);

    let results_path = out.join("results.csv");
    write_text(&results_path, &results_csv(&cells))?;
    let ranks_path = out.join("ranks.csv");
    write_text(&ranks_path, &ranks_csv(&rank_tables))?;
    let timing_path = out.join("timing.csv");
    write_text(&timing_path, &timing_csv(&timing))?;
    let aggregate = Aggregate { cells, rank_tables, timing };
    let mut json = serde_json::to_string_pretty(&aggregate)
        .map_err(|e| Error::parse(format!("aggregate: {e}")))?;
    json.push('\n');
    let aggregate_path = out.join("aggregate.json");
    write_text(&aggregate_path, &json)?;

    Ok(EvaluateSummary {
        cells: cells_spec.len(),
        failures,
        files: vec![results_path, ranks_path, timing_path, aggregate_path],
    })
}

#[derive(Debug)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
}

/// Figure tables carved out of `aggregate.json`: one CSV per plot, density
/// on the x axis, one series per prior, values averaged over optimizers and
/// seeds within each scenario.
pub fn cmd_report(config: &ExperimentConfig) -> Result<ReportSummary> {
    config.validate()?;
    let out = Path::new(&config.out_dir);
    let aggregate_path = out.join("aggregate.json");
    if !aggregate_path.exists() {
        return Err(Error::invalid(format!(
            "{} missing; run the evaluate command first",
            aggregate_path.display()
        )));
    }
    let text = std::fs::read_to_string(&aggregate_path)
        .map_err(|e| Error::io(aggregate_path.display().to_string(), e))?;
    let aggregate: Aggregate =
        serde_json::from_str(&text).map_err(|e| Error::parse(format!("aggregate: {e}")))?;

    ensure_dir(&report_dir(out))?;
    let figures: [(&str, &str); 3] = [
        ("fig-rel-dtw.csv", "rel_dtw_pct"),
        ("fig-agent-agent.csv", "agent_agent_collisions"),
        ("fig-agent-obstacle.csv", "agent_obstacle_collisions"),
    ];
    let mut files = Vec::new();
    for (file, metric) in figures {
        // Series key: (scenario, prior, density). BTreeMap fixes the order.
        let mut groups: BTreeMap<(String, String, usize), (f64, usize)> = BTreeMap::new();
        for cell in &aggregate.cells {
            let Some(m) = &cell.metrics else { continue };
            let entry = groups
                .entry((cell.scenario.clone(), cell.prior.to_string(), cell.density))
                .or_insert((0.0, 0));
            entry.0 += metric_value(m, metric);
            entry.1 += 1;
        }
        let mut csv = String::from("scenario,prior,density,value\n");
        for ((scenario, prior, density), (sum, count)) in &groups {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                scenario,
                prior,
                density,
                sum / *count as f64
            ));
        }
        let path = report_dir(out).join(file);
        write_text(&path, &csv)?;
        files.push(path);
    }
    Ok(ReportSummary { files })
}
