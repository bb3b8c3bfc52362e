//! Neural-network local collision-avoidance prior.
//!
//! A multilayer perceptron regresses the next-step velocity from a local
//! observation: the desired velocity toward the goal, a 360-ray distance
//! scan, the velocities of whatever each ray hit, and optionally the GP
//! flow-field prediction at the agent. Each component enters through its own
//! dense branch; the branches merge into a shared trunk and a linear head
//! whose output is clamped per component.
//!
//! Training is mean squared error under RMSprop with inverted dropout and
//! early stopping on a held-out slice. sigma_nn, the root-mean-square
//! validation residual per component, is stored on the trained model.

use crate::geom::{ray_scan, Disc, SCAN_RAYS};
use crate::gp::{GpFlowModel, GpPrediction};
use crate::scenario::Scenario;
use crate::{Error, Result, Vec2};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CFNN";
const FORMAT_VERSION: u32 = 1;
/// Hard ceiling on deserialized model size; anything larger is rejected.
const MAX_PARAMS: usize = 1 << 26;
const RMSPROP_DECAY: f64 = 0.9;
const RMSPROP_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct ObsParams {
    /// Seconds between frames, used to turn displacements into velocities.
    pub dt: f64,
    /// Preferred speed scaling the goal-direction signal, m/s.
    pub desired_speed: f64,
    /// Desired velocity is zero within this distance of the goal, m.
    pub goal_tolerance: f64,
}

impl Default for ObsParams {
    fn default() -> Self {
        ObsParams { dt: 1.5, desired_speed: 1.3, goal_tolerance: 0.5 }
    }
}

/// Everything the network sees about one agent at one frame. All entries are
/// relative to the agent except the optional GP branch, which samples the
/// absolute flow field.
#[derive(Clone, Debug)]
pub struct LocalObservation {
    pub desired_velocity: Vec2,
    /// Distance along each scan ray to the nearest surface, capped at range.
    pub distance_map: Vec<f64>,
    /// Velocity of the entity each ray hit; zero for obstacles and misses.
    pub velocity_map: Vec<Vec2>,
    pub gp: Option<GpPrediction>,
}

impl LocalObservation {
    pub fn validate(&self) -> Result<()> {
        if self.distance_map.len() != SCAN_RAYS || self.velocity_map.len() != SCAN_RAYS {
            return Err(Error::invalid(format!(
                "observation: maps must have {SCAN_RAYS} entries"
            )));
        }
        let finite = self.desired_velocity.iter().all(|v| v.is_finite())
            && self.distance_map.iter().all(|v| v.is_finite())
            && self.velocity_map.iter().all(|v| v.x.is_finite() && v.y.is_finite())
            && self.gp.iter().all(|g| {
                g.mean.iter().chain(g.std.iter()).all(|v| v.is_finite())
            });
        if !finite {
            return Err(Error::invalid("observation: entries must be finite"));
        }
        Ok(())
    }
}

/// Build the observation for one agent from the full multi-agent state at a
/// frame. Neighbor velocities come from the previous frame's positions; the
/// agent itself is excluded from the scan.
pub fn build_observation(
    agent: usize,
    positions: &[Vec2],
    prev_positions: &[Vec2],
    t_seconds: f64,
    scenario: &Scenario,
    goal: Vec2,
    gp: Option<&GpFlowModel>,
    params: &ObsParams,
) -> Result<LocalObservation> {
    let n = scenario.agents.len();
    if positions.len() != n || prev_positions.len() != n {
        return Err(Error::invalid("observation: state length must match the roster"));
    }
    if agent >= n {
        return Err(Error::invalid(format!("observation: agent {agent} out of range")));
    }
    if !(params.dt.is_finite() && params.dt > 0.0) {
        return Err(Error::invalid("observation: dt must be finite and positive"));
    }
    let pos = positions[agent];
    let to_goal = goal - pos;
    let dist_goal = to_goal.norm();
    let desired_velocity = if dist_goal <= params.goal_tolerance {
        Vec2::zeros()
    } else {
        to_goal / dist_goal * params.desired_speed
    };
    let discs: Vec<(Disc, Vec2)> = (0..n)
        .filter(|&j| j != agent)
        .map(|j| {
            let vel = (positions[j] - prev_positions[j]) / params.dt;
            (Disc { center: positions[j], radius: scenario.agents[j].radius }, vel)
        })
        .collect();
    let scan = ray_scan(pos, scenario.scan_range, &discs, &scenario.obstacles);
    let obs = LocalObservation {
        desired_velocity,
        distance_map: scan.distances,
        velocity_map: scan.velocities,
        gp: gp.map(|m| m.predict([pos.x, pos.y, t_seconds])),
    };
    obs.validate()?;
    Ok(obs)
}

/// Network topology. The default is the full-scale layout: branch encoders
/// of depth 5, merge at layer 6, trunk width 1,024, depth 10 in total
/// counting the output head. Tests and the desk harness shrink it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlpConfig {
    /// When set, the observation must carry a GP prediction; it enters
    /// through two extra branches (mean and std).
    pub gp_branch: bool,
    /// Dense layers per input branch.
    pub branch_depth: usize,
    /// Width of the desired-velocity branch (input: desired velocity plus
    /// the agent's current velocity).
    pub dv_width: usize,
    pub dist_width: usize,
    pub vmap_width: usize,
    /// Width of each GP branch.
    pub gp_width: usize,
    pub trunk_width: usize,
    /// Hidden trunk layers between the merge and the output head.
    pub trunk_depth: usize,
    /// Per-component clip applied after the linear head, m/s.
    pub clamp: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            gp_branch: false,
            branch_depth: 5,
            dv_width: 64,
            dist_width: 256,
            vmap_width: 256,
            gp_width: 32,
            trunk_width: 1024,
            trunk_depth: 4,
            clamp: 2.6,
        }
    }
}

impl MlpConfig {
    fn validate(&self) -> Result<()> {
        let dims = [
            self.branch_depth,
            self.dv_width,
            self.dist_width,
            self.vmap_width,
            self.gp_width,
            self.trunk_width,
            self.trunk_depth,
        ];
        if dims.iter().any(|&d| d == 0 || d > 65_536) {
            return Err(Error::invalid("mlp config: sizes must be in 1..=65536"));
        }
        if !(self.clamp.is_finite() && self.clamp > 0.0) {
            return Err(Error::invalid("mlp config: clamp must be finite and positive"));
        }
        Ok(())
    }

    /// Branch (input_dim, width) pairs in wire order.
    fn branch_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![
            (4, self.dv_width),
            (SCAN_RAYS, self.dist_width),
            (2 * SCAN_RAYS, self.vmap_width),
        ];
        if self.gp_branch {
            dims.push((2, self.gp_width));
            dims.push((2, self.gp_width));
        }
        dims
    }

    fn merge_dim(&self) -> usize {
        self.branch_dims().iter().map(|&(_, w)| w).sum()
    }

    /// (rows, cols) of every layer in storage order: branches, trunk, head.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        for (input, width) in self.branch_dims() {
            shapes.push((width, input));
            for _ in 1..self.branch_depth {
                shapes.push((width, width));
            }
        }
        shapes.push((self.trunk_width, self.merge_dim()));
        for _ in 1..self.trunk_depth {
            shapes.push((self.trunk_width, self.trunk_width));
        }
        shapes.push((2, self.trunk_width));
        shapes
    }

    fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(r, c)| r * c + r).sum()
    }
}

#[derive(Clone, Debug)]
struct Layer {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Layer {
        Layer { w: DMatrix::zeros(rows, cols), b: DVector::zeros(rows) }
    }
}

/// Gradient of the batch loss, with the same layout as the model weights.
pub struct MlpGradient {
    layers: Vec<Layer>,
}

impl MlpGradient {
    /// Flattened values in the model's parameter order.
    pub fn params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.w.iter());
        out.extend(l.b.iter());
    }
    out
}

fn assign(layers: &mut [Layer], flat: &[f64]) {
    let mut it = flat.iter();
    for l in layers {
        for v in l.w.iter_mut() {
            *v = *it.next().expect("flat length checked");
        }
        for v in l.b.iter_mut() {
            *v = *it.next().expect("flat length checked");
        }
    }
}

/// One training sample: what the agent saw, how fast it was moving, and the
/// velocity it actually took next.
#[derive(Clone, Debug)]
pub struct Sample {
    pub obs: LocalObservation,
    pub velocity: Vec2,
    pub target: Vec2,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Inverted-dropout rate on hidden activations during training.
    pub dropout: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-4, batch: 64, dropout: 0.2, max_epochs: 200, patience: 10, seed: 0 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("train config: lr must be finite and positive"));
        }
        if self.batch == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("train config: batch and max_epochs must be positive"));
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return Err(Error::invalid("train config: dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Per-component validation MSE of the restored best weights.
    pub best_val_mse: f64,
    pub sigma_nn: f64,
    /// Mean training batch loss per epoch, measured before each update.
    pub train_losses: Vec<f64>,
}

pub struct MlpPrior {
    config: MlpConfig,
    layers: Vec<Layer>,
    sigma_nn: Option<f64>,
}

impl MlpPrior {
    /// Fresh network with He-initialized weights and zero biases.
    pub fn new(config: &MlpConfig, seed: u64) -> Result<MlpPrior> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = move || {
            // Box-Muller; u1 in (0, 1] keeps the log finite.
            let u1: f64 = 1.0 - rng.random_range(0.0..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(rows, cols)| {
                let scale = (2.0 / cols as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(rows, cols, |_, _| normal() * scale),
                    b: DVector::zeros(rows),
                }
            })
            .collect();
        Ok(MlpPrior { config: *config, layers, sigma_nn: None })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    /// Root-mean-square validation residual per component; None before
    /// training.
    pub fn sigma_nn(&self) -> Option<f64> {
        self.sigma_nn
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Snapshot of all weights and biases, layer by layer, weights
    /// column-major then biases.
    pub fn params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid("set_params: length mismatch"));
        }
        assign(&mut self.layers, flat);
        Ok(())
    }

    /// Split the layer list into branch stacks, trunk stack, and head.
    fn stacks(&self) -> (Vec<&[Layer]>, &[Layer], &Layer) {
        let mut rest = &self.layers[..];
        let mut branches = Vec::new();
        for _ in 0..self.config.branch_dims().len() {
            let (stack, tail) = rest.split_at(self.config.branch_depth);
            branches.push(stack);
            rest = tail;
        }
        let (trunk, tail) = rest.split_at(self.config.trunk_depth);
        (branches, trunk, &tail[0])
    }

    /// Per-branch input vectors for one sample.
    fn branch_inputs(&self, obs: &LocalObservation, velocity: Vec2) -> Result<Vec<DVector<f64>>> {
        obs.validate()?;
        if !(velocity.x.is_finite() && velocity.y.is_finite()) {
            return Err(Error::invalid("forward: velocity must be finite"));
        }
        if obs.gp.is_some() != self.config.gp_branch {
            return Err(Error::invalid(
                "forward: observation GP branch does not match the model topology",
            ));
        }
        let mut bins = vec![
            DVector::from_vec(vec![
                obs.desired_velocity.x,
                obs.desired_velocity.y,
                velocity.x,
                velocity.y,
            ]),
            DVector::from_column_slice(&obs.distance_map),
            DVector::from_fn(2 * SCAN_RAYS, |i, _| {
                let v = obs.velocity_map[i / 2];
                if i % 2 == 0 {
                    v.x
                } else {
                    v.y
                }
            }),
        ];
        if let Some(gp) = &obs.gp {
            bins.push(DVector::from_vec(vec![gp.mean.x, gp.mean.y]));
            bins.push(DVector::from_vec(vec![gp.std.x, gp.std.y]));
        }
        Ok(bins)
    }

    /// Inference: dropout off, deterministic, output clamped per component.
    pub fn forward(&self, obs: &LocalObservation, velocity: Vec2) -> Result<Vec2> {
        let bins = self.branch_inputs(obs, velocity)?;
        Ok(self.run(&bins, None).0)
    }

    /// Training-mode forward: hidden activations pass through inverted
    /// dropout driven by `rng`. The dropout rate comes from the argument so
    /// that an untrained model carries no training state.
    pub fn forward_train(
        &self,
        obs: &LocalObservation,
        velocity: Vec2,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec2> {
        let bins = self.branch_inputs(obs, velocity)?;
        Ok(self.run(&bins, Some((dropout, rng))).0)
    }

    /// Shared forward pass. Returns the clamped output and, for backprop,
    /// the cached layer inputs and activation multipliers (ReLU gate times
    /// dropout scale) in storage order plus the head-gate pair.
    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        bins: &[DVector<f64>],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> (Vec2, Vec<(DVector<f64>, DVector<f64>)>, [f64; 2]) {
        let (branches, trunk, head) = self.stacks();
        let mut cache = Vec::with_capacity(self.layers.len() - 1);
        let mut run_stack = |stack: &[Layer],
                             input: DVector<f64>,
                             dropout: &mut Option<(f64, &mut ChaCha8Rng)>|
         -> DVector<f64> {
            let mut a = input;
            for layer in stack {
                let pre = &layer.w * &a + &layer.b;
                let mult = DVector::from_fn(pre.len(), |i, _| {
                    if pre[i] > 0.0 {
                        match dropout {
                            Some((rate, rng)) if *rate > 0.0 => {
                                if rng.random_range(0.0..1.0) < *rate {
                                    0.0
                                } else {
                                    1.0 / (1.0 - *rate)
                                }
                            }
                            _ => 1.0,
                        }
                    } else {
                        0.0
                    }
                });
                cache.push((a, mult));
                a = pre.component_mul(&cache.last().expect("just pushed").1);
            }
            a
        };
        let mut merged = DVector::zeros(self.config.merge_dim());
        let mut offset = 0;
        for (stack, bin) in branches.iter().zip(bins) {
            let out = run_stack(stack, bin.clone(), &mut dropout);
            merged.rows_mut(offset, out.len()).copy_from(&out);
            offset += out.len();
        }
        let trunk_out = run_stack(trunk, merged, &mut dropout);
        let pre = &head.w * &trunk_out + &head.b;
        cache.push((trunk_out, DVector::zeros(0)));
        let c = self.config.clamp;
        let gates = [
            if pre[0].abs() <= c { 1.0 } else { 0.0 },
            if pre[1].abs() <= c { 1.0 } else { 0.0 },
        ];
        let out = Vec2::new(pre[0].clamp(-c, c), pre[1].clamp(-c, c));
        (out, cache, gates)
    }

    /// Forward plus backward for one sample; accumulates raw per-sample
    /// gradients of 1/2 * squared residual into `grad` and returns that loss.
    fn sample_grad(
        &self,
        bins: &[DVector<f64>],
        target: Vec2,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
        grad: &mut [Layer],
    ) -> f64 {
        let (out, cache, gates) = self.run(bins, dropout);
        let r = out - target;
        let loss = 0.5 * r.norm_squared();

        // Head layer: the clamp gate kills the gradient where saturated.
        let head_idx = self.layers.len() - 1;
        let dout = DVector::from_vec(vec![r.x * gates[0], r.y * gates[1]]);
        let head_in = &cache[head_idx].0;
        grad[head_idx].w += &dout * head_in.transpose();
        grad[head_idx].b += &dout;
        let mut dz = self.layers[head_idx].w.transpose() * &dout;

        // Trunk, backwards.
        let trunk_start = head_idx - self.config.trunk_depth;
        for i in (trunk_start..head_idx).rev() {
            let (input, mult) = &cache[i];
            let dpre = dz.component_mul(mult);
            grad[i].w += &dpre * input.transpose();
            grad[i].b += &dpre;
            dz = self.layers[i].w.transpose() * &dpre;
        }

        // dz now holds the merged-vector gradient; split it per branch.
        let mut offset = 0;
        for (k, (_, width)) in self.config.branch_dims().into_iter().enumerate() {
            let mut db = dz.rows(offset, width).into_owned();
            offset += width;
            let base = k * self.config.branch_depth;
            for i in (base..base + self.config.branch_depth).rev() {
                let (input, mult) = &cache[i];
                let dpre = db.component_mul(mult);
                grad[i].w += &dpre * input.transpose();
                grad[i].b += &dpre;
                if i > base {
                    db = self.layers[i].w.transpose() * &dpre;
                }
            }
        }
        loss
    }

    /// Mean-squared-error gradient over a batch, dropout off. The loss is
    /// the per-component MSE: sum of squared residuals over 2n.
    pub fn backprop_gradient(&self, batch: &[Sample]) -> Result<(MlpGradient, f64)> {
        self.grad_batch(batch, None)
    }

    fn grad_batch(
        &self,
        batch: &[Sample],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(MlpGradient, f64)> {
        if batch.is_empty() {
            return Err(Error::invalid("backprop: empty batch"));
        }
        let mut grad: Vec<Layer> = self
            .config
            .layer_shapes()
            .into_iter()
            .map(|(r, c)| Layer::zeros(r, c))
            .collect();
        let mut loss_sum = 0.0;
        for sample in batch {
            if !(sample.target.x.is_finite() && sample.target.y.is_finite()) {
                return Err(Error::invalid("backprop: targets must be finite"));
            }
            let bins = self.branch_inputs(&sample.obs, sample.velocity)?;
            let d = dropout.as_mut().map(|(rate, rng)| (*rate, &mut **rng));
            loss_sum += self.sample_grad(&bins, sample.target, d, &mut grad);
        }
        let scale = 1.0 / batch.len() as f64;
        for l in grad.iter_mut() {
            l.w *= scale;
            l.b *= scale;
        }
        Ok((MlpGradient { layers: grad }, loss_sum * scale))
    }

    /// Mean per-component squared residual at inference settings.
    fn mse(&self, samples: &[Sample]) -> Result<f64> {
        let mut sum = 0.0;
        for s in samples {
            let out = self.forward(&s.obs, s.velocity)?;
            sum += (out - s.target).norm_squared();
        }
        Ok(sum / (2.0 * samples.len() as f64))
    }

    /// Train with RMSprop and early stopping; restores the best-validation
    /// weights and stores sigma_nn.
    pub fn train(&mut self, data: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("train: empty dataset"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = data.len();
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut rng);
        // Held-out validation slice; a single sample validates on itself.
        let val_count = if n >= 2 { (((n as f64) * 0.1).round() as usize).clamp(1, n - 1) } else { 0 };
        let (val_idx, train_idx) = order.split_at(val_count);
        let val: Vec<Sample> = if val_count == 0 {
            data.to_vec()
        } else {
            val_idx.iter().map(|&i| data[i].clone()).collect()
        };
        let mut train_idx = train_idx.to_vec();

        let mut cache = vec![0.0; self.param_count()];
        let mut best_val = self.mse(&val)?;
        let mut best_params = self.params();
        let mut patience_left = cfg.patience;
        let mut train_losses = Vec::new();
        let mut epochs_run = 0;

        for _ in 0..cfg.max_epochs {
            epochs_run += 1;
            shuffle(&mut train_idx, &mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for chunk in train_idx.chunks(cfg.batch) {
                let batch: Vec<Sample> = chunk.iter().map(|&i| data[i].clone()).collect();
                let (grad, loss) = self.grad_batch(&batch, Some((cfg.dropout, &mut rng)))?;
                if !loss.is_finite() {
                    return Err(Error::numerical("train: loss diverged to non-finite"));
                }
                epoch_loss += loss;
                batches += 1;
                let g = grad.params();
                let mut p = self.params();
                for ((pi, gi), ci) in p.iter_mut().zip(&g).zip(cache.iter_mut()) {
                    *ci = RMSPROP_DECAY * *ci + (1.0 - RMSPROP_DECAY) * gi * gi;
                    *pi -= cfg.lr * gi / (ci.sqrt() + RMSPROP_EPS);
                }
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerical("train: weights diverged to non-finite"));
                }
                self.set_params(&p)?;
            }
            train_losses.push(epoch_loss / batches.max(1) as f64);

            let val_mse = self.mse(&val)?;
            if !val_mse.is_finite() {
                return Err(Error::numerical("train: validation loss diverged to non-finite"));
            }
            if val_mse < best_val {
                best_val = val_mse;
                best_params = self.params();
                patience_left = cfg.patience;
            } else if patience_left == 0 {
                break;
            } else {
                patience_left -= 1;
            }
        }

        self.set_params(&best_params)?;
        let sigma = best_val.sqrt();
        self.sigma_nn = Some(sigma);
        Ok(TrainReport { epochs_run, best_val_mse: best_val, sigma_nn: sigma, train_losses })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.config.gp_branch as u8);
        for dim in [
            self.config.branch_depth,
            self.config.dv_width,
            self.config.dist_width,
            self.config.vmap_width,
            self.config.gp_width,
            self.config.trunk_width,
            self.config.trunk_depth,
        ] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.config.clamp.to_le_bytes());
        match self.sigma_nn {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&0.0f64.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.w.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.w.ncols() as u32).to_le_bytes());
            for v in l.w.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in l.b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a persisted model. Shapes are re-derived from the stored
    /// topology and must match exactly; reload reproduces inference
    /// bit-exactly on the same platform.
    pub fn from_bytes(buf: &[u8]) -> Result<MlpPrior> {
        let mut r = ByteReader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::parse("nn model: bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::parse(format!("nn model: unsupported version {version}")));
        }
        let gp_branch = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::parse(format!("nn model: bad gp flag {v}"))),
        };
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let config = MlpConfig {
            gp_branch,
            branch_depth: dims[0],
            dv_width: dims[1],
            dist_width: dims[2],
            vmap_width: dims[3],
            gp_width: dims[4],
            trunk_width: dims[5],
            trunk_depth: dims[6],
            clamp: r.f64()?,
        };
        config.validate().map_err(|e| Error::parse(e.to_string()))?;
        if config.param_count() > MAX_PARAMS {
            return Err(Error::parse("nn model: parameter count exceeds the size cap"));
        }
        let sigma_flag = r.u8()?;
        let sigma_raw = r.f64()?;
        let sigma_nn = match sigma_flag {
            0 => None,
            1 if sigma_raw.is_finite() && sigma_raw >= 0.0 => Some(sigma_raw),
            1 => return Err(Error::parse("nn model: sigma_nn must be finite and non-negative")),
            v => return Err(Error::parse(format!("nn model: bad sigma flag {v}"))),
        };
        let shapes = config.layer_shapes();
        if r.u32()? as usize != shapes.len() {
            return Err(Error::parse("nn model: layer count does not match the topology"));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for (rows, cols) in shapes {
            if r.u32()? as usize != rows || r.u32()? as usize != cols {
                return Err(Error::parse("nn model: layer shape does not match the topology"));
            }
            let mut l = Layer::zeros(rows, cols);
            for v in l.w.iter_mut() {
                *v = r.f64()?;
                if !v.is_finite() {
                    return Err(Error::parse("nn model: weights must be finite"));
                }
            }
            for v in l.b.iter_mut() {
                *v = r.f64()?;
                if !v.is_finite() {
                    return Err(Error::parse("nn model: weights must be finite"));
                }
            }
            layers.push(l);
        }
        if r.pos != buf.len() {
            return Err(Error::parse("nn model: trailing bytes"));
        }
        Ok(MlpPrior { config, layers, sigma_nn })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<MlpPrior> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        MlpPrior::from_bytes(&buf)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::parse("nn model: truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Fisher-Yates with the crate's seeded generator.
fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}
