//! Gaussian-process global flow prior.
//!
//! Two independent GPs over (x, y, t) model the velocity field's x and y
//! components. Inputs and targets are z-scored before fitting; the Matern-5/2
//! kernel carries one length scale per input dimension. Hyperparameters come
//! from multi-start quasi-Newton ascent of the log marginal likelihood in
//! log-space. A fitted model is immutable and safe to query from many
//! threads.

use crate::numopt::{minimize_box, MinimizeParams};
use crate::{Error, Result, Vec2};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const SQRT5: f64 = 2.23606797749979;
/// Diagonal boosts tried in order when the Cholesky factorization fails.
const JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];
/// Natural-space bound applied to every hyperparameter during the fit.
const HYPER_BOUND: f64 = 1e3;
const MODEL_FORMAT: &str = "crowdfill-gp-v1";

#[derive(Clone, Copy, Debug)]
pub struct GpConfig {
    /// Training rows kept after uniform subsampling.
    pub max_points: usize,
    /// Random restarts of the hyperparameter ascent.
    pub optimizer_restarts: usize,
    /// Quasi-Newton iterations per restart.
    pub optimizer_iters: usize,
    pub seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig { max_points: 1000, optimizer_restarts: 5, optimizer_iters: 200, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpHypers {
    pub signal_var: f64,
    pub length: [f64; 3],
    pub noise_var: f64,
}

impl GpHypers {
    fn validate(&self) -> Result<()> {
        let all = [self.signal_var, self.length[0], self.length[1], self.length[2], self.noise_var];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("gp hypers must be finite and positive"));
        }
        Ok(())
    }

    #[cfg(test)]
    fn to_log(self) -> [f64; 5] {
        [
            self.signal_var.ln(),
            self.length[0].ln(),
            self.length[1].ln(),
            self.length[2].ln(),
            self.noise_var.ln(),
        ]
    }

    fn from_log(lt: &[f64]) -> GpHypers {
        GpHypers {
            signal_var: lt[0].exp(),
            length: [lt[1].exp(), lt[2].exp(), lt[3].exp()],
            noise_var: lt[4].exp(),
        }
    }
}

/// Matern-5/2 ARD kernel value between two points.
fn matern52(a: &[f64; 3], b: &[f64; 3], h: &GpHypers) -> f64 {
    let mut r2 = 0.0;
    for d in 0..3 {
        let u = (a[d] - b[d]) / h.length[d];
        r2 += u * u;
    }
    let r = r2.sqrt();
    h.signal_var * (1.0 + SQRT5 * r + 5.0 * r2 / 3.0) * (-SQRT5 * r).exp()
}

/// Per-dimension squared differences, cached once per fit so that repeated
/// likelihood evaluations only pay elementwise work plus the factorization.
struct Sqdists {
    d: [DMatrix<f64>; 3],
    n: usize,
}

impl Sqdists {
    fn new(x: &[[f64; 3]]) -> Sqdists {
        let n = x.len();
        let d = std::array::from_fn(|dim| {
            DMatrix::from_fn(n, n, |i, j| {
                let u = x[i][dim] - x[j][dim];
                u * u
            })
        });
        Sqdists { d, n }
    }
}

struct LmlEval {
    value: f64,
    grad: [f64; 5],
    jitter: f64,
}

/// Log marginal likelihood of targets `y` under the kernel at `h`, with its
/// gradient taken w.r.t. the log of each hyperparameter, in the order
/// (signal variance, three length scales, noise variance).
fn lml_eval(sq: &Sqdists, y: &DVector<f64>, h: &GpHypers, want_grad: bool) -> Result<LmlEval> {
    let n = sq.n;
    let mut r = DMatrix::zeros(n, n);
    for d in 0..3 {
        let inv = 1.0 / (h.length[d] * h.length[d]);
        r.zip_apply(&sq.d[d], |acc: &mut f64, sd: f64| *acc += sd * inv);
    }
    r.apply(|v| *v = v.sqrt());
    // Noise-free kernel, kept for the signal-variance gradient.
    let kf = r.map(|r| h.signal_var * (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * (-SQRT5 * r).exp());

    let mut chosen = None;
    for &jitter in &JITTER_LADDER {
        let mut k = kf.clone();
        for i in 0..n {
            k[(i, i)] += h.noise_var + jitter;
        }
        if let Some(c) = Cholesky::new(k) {
            chosen = Some((c, jitter));
            break;
        }
    }
    let Some((chol, jitter)) = chosen else {
        return Err(Error::numerical("gp: kernel not positive definite after jitter escalation"));
    };

    let alpha = chol.solve(y);
    let l = chol.l_dirty();
    let mut logdet = 0.0;
    for i in 0..n {
        logdet += l[(i, i)].ln();
    }
    logdet *= 2.0;
    let value = -0.5 * y.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    let mut grad = [0.0; 5];
    if want_grad {
        let kinv = chol.inverse();
        // d(lml)/dθ = (α'(∂K)α − tr(K⁻¹ ∂K)) / 2 for each log-parameter.
        let half_form = |dk: &DMatrix<f64>| {
            let mut t1 = 0.0;
            let mut t2 = 0.0;
            for j in 0..n {
                for i in 0..n {
                    t1 += alpha[i] * dk[(i, j)] * alpha[j];
                    t2 += kinv[(i, j)] * dk[(i, j)];
                }
            }
            0.5 * (t1 - t2)
        };
        grad[0] = half_form(&kf);
        // Shared factor of the length-scale derivatives.
        let g = r.map(|r| (5.0 / 3.0) * h.signal_var * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp());
        for d in 0..3 {
            let inv = 1.0 / (h.length[d] * h.length[d]);
            let dk = g.zip_map(&sq.d[d], |gv, sd| gv * sd * inv);
            grad[1 + d] = half_form(&dk);
        }
        let tr_kinv: f64 = (0..n).map(|i| kinv[(i, i)]).sum();
        grad[4] = 0.5 * h.noise_var * (alpha.dot(&alpha) - tr_kinv);
    }
    Ok(LmlEval { value, grad, jitter })
}

/// Log marginal likelihood and its analytic gradient w.r.t. the log of each
/// hyperparameter, evaluated on the data exactly as given. The fit applies
/// this to normalized data.
pub fn log_marginal_likelihood(
    points: &[[f64; 3]],
    targets: &[f64],
    hypers: &GpHypers,
) -> Result<(f64, [f64; 5])> {
    if points.len() != targets.len() || points.is_empty() {
        return Err(Error::invalid("lml: points and targets must be non-empty and equal length"));
    }
    if points.iter().flatten().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::invalid("lml: inputs must be finite"));
    }
    hypers.validate()?;
    let sq = Sqdists::new(points);
    let y = DVector::from_column_slice(targets);
    let e = lml_eval(&sq, &y, hypers, true)?;
    Ok((e.value, e.grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub in_mean: [f64; 3],
    pub in_std: [f64; 3],
    pub out_mean: [f64; 2],
    pub out_std: [f64; 2],
}

fn guarded_std(sum_sq: f64, n: f64) -> f64 {
    let s = (sum_sq / n).sqrt();
    // A constant column carries no scale information; leave it unscaled.
    if s < 1e-12 {
        1.0
    } else {
        s
    }
}

impl NormStats {
    fn from_data(points: &[[f64; 3]], targets: &[[f64; 2]]) -> NormStats {
        let n = points.len() as f64;
        let mut stats = NormStats {
            in_mean: [0.0; 3],
            in_std: [1.0; 3],
            out_mean: [0.0; 2],
            out_std: [1.0; 2],
        };
        for d in 0..3 {
            let mean = points.iter().map(|p| p[d]).sum::<f64>() / n;
            let ss = points.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>();
            stats.in_mean[d] = mean;
            stats.in_std[d] = guarded_std(ss, n);
        }
        for c in 0..2 {
            let mean = targets.iter().map(|t| t[c]).sum::<f64>() / n;
            let ss = targets.iter().map(|t| (t[c] - mean).powi(2)).sum::<f64>();
            stats.out_mean[c] = mean;
            stats.out_std[c] = guarded_std(ss, n);
        }
        stats
    }

    fn normalize_input(&self, p: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|d| (p[d] - self.in_mean[d]) / self.in_std[d])
    }

    fn validate(&self) -> Result<()> {
        let vals = self
            .in_mean
            .iter()
            .chain(&self.in_std)
            .chain(&self.out_mean)
            .chain(&self.out_std);
        if vals.clone().any(|v| !v.is_finite()) {
            return Err(Error::invalid("gp stats must be finite"));
        }
        if self.in_std.iter().chain(&self.out_std).any(|s| *s <= 0.0) {
            return Err(Error::invalid("gp stats: scales must be positive"));
        }
        Ok(())
    }
}

/// One fitted output dimension in normalized space.
struct GpCore {
    x: Vec<[f64; 3]>,
    hypers: GpHypers,
    jitter: f64,
    alpha: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

enum Jitter {
    Ladder,
    Fixed(f64),
}

impl GpCore {
    fn new(x: Vec<[f64; 3]>, y: DVector<f64>, hypers: GpHypers, jitter: Jitter) -> Result<GpCore> {
        let n = x.len();
        let base = DMatrix::from_fn(n, n, |i, j| matern52(&x[i], &x[j], &hypers));
        let ladder: &[f64] = match &jitter {
            Jitter::Ladder => &JITTER_LADDER,
            Jitter::Fixed(j) => std::slice::from_ref(j),
        };
        for &j in ladder {
            let mut k = base.clone();
            for i in 0..n {
                k[(i, i)] += hypers.noise_var + j;
            }
            if let Some(chol) = Cholesky::new(k) {
                let alpha = chol.solve(&y);
                return Ok(GpCore { x, hypers, jitter: j, alpha, chol });
            }
        }
        Err(Error::numerical("gp: kernel not positive definite after jitter escalation"))
    }

    /// Posterior mean and latent variance (measurement noise excluded) at a
    /// normalized query.
    fn predict(&self, q: &[f64; 3]) -> (f64, f64) {
        let kstar = DVector::from_fn(self.x.len(), |i, _| matern52(&self.x[i], q, &self.hypers));
        let mean = kstar.dot(&self.alpha);
        let v = self.chol.solve(&kstar);
        let var = (self.hypers.signal_var - kstar.dot(&v)).max(1e-18);
        (mean, var)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GpPrediction {
    /// Posterior velocity mean, m/s.
    pub mean: Vec2,
    /// Predictive standard deviation per component, m/s; always positive.
    /// Includes the fitted noise term, which carries the scatter of
    /// individual velocities around the mean flow.
    pub std: Vec2,
}

/// Per-scenario flow model: two independent GPs over (x, y, t) for the two
/// velocity components.
pub struct GpFlowModel {
    points: Vec<[f64; 3]>,
    targets: Vec<[f64; 2]>,
    stats: NormStats,
    cores: [GpCore; 2],
}

fn validate_rows(points: &[[f64; 3]], targets: &[[f64; 2]]) -> Result<()> {
    if points.len() != targets.len() {
        return Err(Error::invalid("gp fit: points and targets lengths differ"));
    }
    if points.len() < 2 {
        return Err(Error::invalid("gp fit: need at least 2 training rows"));
    }
    let finite = points.iter().flatten().chain(targets.iter().flatten()).all(|v| v.is_finite());
    if !finite {
        return Err(Error::invalid("gp fit: training data must be finite"));
    }
    Ok(())
}

/// Assemble a model from normalized rows and already-chosen hyperparameters.
fn assemble(
    points: Vec<[f64; 3]>,
    targets: Vec<[f64; 2]>,
    stats: NormStats,
    hypers: [GpHypers; 2],
    jitter: [Jitter; 2],
) -> Result<GpFlowModel> {
    let xn: Vec<[f64; 3]> = points.iter().map(|p| stats.normalize_input(p)).collect();
    let mut jit = jitter.into_iter();
    let mut make = |c: usize| -> Result<GpCore> {
        let y = DVector::from_fn(targets.len(), |i, _| {
            (targets[i][c] - stats.out_mean[c]) / stats.out_std[c]
        });
        GpCore::new(xn.clone(), y, hypers[c], jit.next().unwrap())
    };
    let core0 = make(0)?;
    let core1 = make(1)?;
    Ok(GpFlowModel { points, targets, stats, cores: [core0, core1] })
}

impl GpFlowModel {
    /// Fit with hyperparameter optimization. Rows beyond `config.max_points`
    /// are dropped by uniform random subsampling.
    pub fn fit(points: &[[f64; 3]], velocities: &[[f64; 2]], config: &GpConfig) -> Result<GpFlowModel> {
        validate_rows(points, velocities)?;
        if config.max_points < 2 {
            return Err(Error::invalid("gp fit: max_points must be at least 2"));
        }
        if config.optimizer_restarts == 0 {
            return Err(Error::invalid("gp fit: need at least one optimizer restart"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (points, targets): (Vec<[f64; 3]>, Vec<[f64; 2]>) = if points.len() > config.max_points {
            let mut idx = rand::seq::index::sample(&mut rng, points.len(), config.max_points).into_vec();
            idx.sort_unstable();
            (idx.iter().map(|&i| points[i]).collect(), idx.iter().map(|&i| velocities[i]).collect())
        } else {
            (points.to_vec(), velocities.to_vec())
        };

        let stats = NormStats::from_data(&points, &targets);
        let xn: Vec<[f64; 3]> = points.iter().map(|p| stats.normalize_input(p)).collect();
        let sq = Sqdists::new(&xn);
        let lo = [HYPER_BOUND.recip().ln(); 5];
        let hi = [HYPER_BOUND.ln(); 5];
        let opt = MinimizeParams {
            max_iters: config.optimizer_iters,
            grad_tol: 1e-5,
            ..MinimizeParams::default()
        };

        let mut hypers = [GpHypers { signal_var: 1.0, length: [1.0; 3], noise_var: 0.1 }; 2];
        let mut jitters = [Jitter::Ladder, Jitter::Ladder];
        for c in 0..2 {
            let y = DVector::from_fn(targets.len(), |i, _| {
                (targets[i][c] - stats.out_mean[c]) / stats.out_std[c]
            });
            let mut best: Option<(f64, [f64; 5])> = None;
            for restart in 0..config.optimizer_restarts {
                let start: [f64; 5] = if restart == 0 {
                    [0.0, 0.0, 0.0, 0.0, 0.1f64.ln()]
                } else {
                    let ln10 = 10.0f64.ln();
                    [
                        rng.random_range(-ln10..ln10),
                        rng.random_range(-ln10..ln10),
                        rng.random_range(-ln10..ln10),
                        rng.random_range(-ln10..ln10),
                        rng.random_range(1e-3f64.ln()..0.0),
                    ]
                };
                let eval = |lt: &[f64], g: &mut [f64]| {
                    match lml_eval(&sq, &y, &GpHypers::from_log(lt), true) {
                        Ok(e) => {
                            for (gi, d) in g.iter_mut().zip(e.grad) {
                                *gi = -d;
                            }
                            -e.value
                        }
                        Err(_) => f64::INFINITY,
                    }
                };
                // A restart whose starting kernel is singular is skipped.
                let Ok(m) = minimize_box(&start, &lo, &hi, &opt, eval) else { continue };
                if best.is_none_or(|(bv, _)| m.value < bv) {
                    best = Some((m.value, std::array::from_fn(|i| m.x[i])));
                }
            }
            let Some((_, lt)) = best else {
                return Err(Error::numerical(
                    "gp fit: kernel not positive definite after jitter escalation",
                ));
            };
            hypers[c] = GpHypers::from_log(&lt);
            jitters[c] = Jitter::Fixed(lml_eval(&sq, &y, &hypers[c], false)?.jitter);
        }
        assemble(points, targets, stats, hypers, jitters)
    }

    /// Build a model with fixed hyperparameters (normalized space), skipping
    /// subsampling and the likelihood ascent.
    pub fn with_hypers(
        points: &[[f64; 3]],
        velocities: &[[f64; 2]],
        hypers: [GpHypers; 2],
    ) -> Result<GpFlowModel> {
        validate_rows(points, velocities)?;
        hypers[0].validate()?;
        hypers[1].validate()?;
        let stats = NormStats::from_data(points, velocities);
        assemble(points.to_vec(), velocities.to_vec(), stats, hypers, [Jitter::Ladder, Jitter::Ladder])
    }

    /// Number of stored training rows.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn hypers(&self, output: usize) -> GpHypers {
        self.cores[output].hypers
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    /// Posterior mean and predictive standard deviation (latent variance
    /// plus fitted noise) at a raw (x, y, t) query, both denormalized to m/s.
    pub fn predict(&self, query: [f64; 3]) -> GpPrediction {
        let qn = self.stats.normalize_input(&query);
        let mut mean = Vec2::zeros();
        let mut std = Vec2::zeros();
        for c in 0..2 {
            let (m, var) = self.cores[c].predict(&qn);
            mean[c] = m * self.stats.out_std[c] + self.stats.out_mean[c];
            std[c] = (var + self.cores[c].hypers.noise_var).sqrt() * self.stats.out_std[c];
        }
        GpPrediction { mean, std }
    }

    pub fn to_json(&self) -> String {
        let file = GpModelFile {
            format: MODEL_FORMAT.into(),
            points: self.points.clone(),
            targets: self.targets.clone(),
            stats: self.stats,
            hypers: [self.cores[0].hypers, self.cores[1].hypers],
            jitter: [self.cores[0].jitter, self.cores[1].jitter],
        };
        serde_json::to_string_pretty(&file).expect("gp model serializes")
    }

    /// Parse a persisted model. The Cholesky factor and weights are
    /// recomputed from the stored rows, which reproduces predictions
    /// bit-exactly on the same platform.
    pub fn from_json(text: &str) -> Result<GpFlowModel> {
        let file: GpModelFile =
            serde_json::from_str(text).map_err(|e| Error::parse(format!("gp model: {e}")))?;
        if file.format != MODEL_FORMAT {
            return Err(Error::parse(format!("gp model: unknown format {:?}", file.format)));
        }
        validate_rows(&file.points, &file.targets).map_err(|e| Error::parse(e.to_string()))?;
        file.stats.validate().map_err(|e| Error::parse(e.to_string()))?;
        for h in &file.hypers {
            h.validate().map_err(|e| Error::parse(e.to_string()))?;
        }
        if file.jitter.iter().any(|j| !(j.is_finite() && *j >= 0.0)) {
            return Err(Error::parse("gp model: jitter must be finite and non-negative"));
        }
        assemble(
            file.points,
            file.targets,
            file.stats,
            file.hypers,
            [Jitter::Fixed(file.jitter[0]), Jitter::Fixed(file.jitter[1])],
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<GpFlowModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        GpFlowModel::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GpModelFile {
    format: String,
    points: Vec<[f64; 3]>,
    targets: Vec<[f64; 2]>,
    stats: NormStats,
    hypers: [GpHypers; 2],
    jitter: [f64; 2],
}
