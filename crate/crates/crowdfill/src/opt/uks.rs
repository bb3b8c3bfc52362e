//! Unscented Kalman smoothing of the per-agent energy.
//!
//! The prior and kinetic terms together imply a per-step dynamical system:
//! the velocity target is shrunk by lambda/(lambda + C_kn), passed through a
//! soft magnitude limiter, and disturbed by process noise with variance
//! 1/(2(C_kn + lambda)) per component. Measurements are the observations on
//! observed frames and the previous-round proxies on masked ones, with small
//! and large noise respectively. A forward unscented filter and an unscented
//! RTS pass return the smoothed means. Endpoints are not overridden; they are
//! always observed, so the small measurement noise anchors them.

use nalgebra::Matrix2;

use crate::energy::{EnergyParams, PriorTargets};
use crate::traj::Trajectory;
use crate::{Error, Result, Vec2};

/// First-order Taylor expansion of the soft magnitude limiter
/// `f(v) = 2 c_mv (sigmoid(v) - 1/2)` around `a`: returns the approximated
/// value at `v` and the slope `f'(a) = 2 c_mv sigmoid(a)(1 - sigmoid(a))`.
pub fn soft_limiter(v: f64, c_mv: f64, a: f64) -> (f64, f64) {
    let s = 1.0 / (1.0 + (-a).exp());
    let slope = 2.0 * c_mv * s * (1.0 - s);
    let value = 2.0 * c_mv * (s - 0.5) + slope * (v - a);
    (value, slope)
}

/// Velocity shrink factor lambda/(lambda + C_kn); 108/109 at paper weights.
pub fn uks_shrink(lambda: f64, c_kn: f64) -> f64 {
    lambda / (lambda + c_kn)
}

/// Per-component process noise variance 1/(2(C_kn + lambda)); 1/218 at
/// paper weights.
pub fn uks_process_noise(lambda: f64, c_kn: f64) -> f64 {
    1.0 / (2.0 * (c_kn + lambda))
}

/// A 2-d Gaussian belief.
#[derive(Debug, Clone, Copy)]
pub struct Gaussian2 {
    pub mean: Vec2,
    pub cov: Matrix2<f64>,
}

/// One-step transition implied by the prior at the crate-level weights: the
/// limited prior velocity, shrunk and scaled by dt, plus process noise.
/// The limiter is linearized at the prior velocity itself, where the Taylor
/// value is exact.
pub fn uks_transition(x: Vec2, prior_velocity: Vec2, params: &EnergyParams) -> Gaussian2 {
    let lambda = params.lambda();
    let shrink = uks_shrink(lambda, params.c_kn);
    let q = uks_process_noise(lambda, params.c_kn);
    let mut mean = x;
    for c in 0..2 {
        let (limited, _) = soft_limiter(prior_velocity[c], params.c_mv, prior_velocity[c]);
        mean[c] += params.dt * shrink * limited;
    }
    Gaussian2 { mean, cov: Matrix2::from_diagonal_element(q) }
}

#[derive(Debug, Clone)]
pub struct UksConfig {
    /// Sigma-point spread.
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Measurement noise variance on observed frames.
    pub obs_noise_small: f64,
    /// Measurement noise variance on masked frames (proxy measurements).
    pub obs_noise_large: f64,
    /// Disable to get the raw (linear) velocity map; the surrogate tests
    /// compare against an exact linear smoother.
    pub limiter_enabled: bool,
}

impl Default for UksConfig {
    fn default() -> UksConfig {
        UksConfig {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
            obs_noise_small: 1e-4,
            obs_noise_large: 1e2,
            limiter_enabled: true,
        }
    }
}

impl UksConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::invalid(format!("uks alpha must be positive, got {}", self.alpha)));
        }
        for (name, v) in [
            ("obs_noise_small", self.obs_noise_small),
            ("obs_noise_large", self.obs_noise_large),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!("uks {name} must be positive, got {v}")));
            }
        }
        if self.obs_noise_small > self.obs_noise_large {
            return Err(Error::invalid(
                "uks obs_noise_small must not exceed obs_noise_large",
            ));
        }
        if !self.beta.is_finite() || !self.kappa.is_finite() {
            return Err(Error::invalid("uks beta and kappa must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct UksSolution {
    pub traj: Trajectory,
    pub filtered: Vec<Gaussian2>,
    pub smoothed: Vec<Gaussian2>,
}

// Sigma points and their weights for a 2-d belief.
struct SigmaSet {
    points: [Vec2; 5],
    wm: [f64; 5],
    wc: [f64; 5],
}

fn chol2(cov: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let sym = (cov + cov.transpose()) * 0.5;
    for jitter in [0.0, 1e-12, 1e-9, 1e-6] {
        let m = sym + Matrix2::from_diagonal_element(jitter);
        if let Some(ch) = nalgebra::Cholesky::new(m) {
            return Ok(ch.l());
        }
    }
    Err(Error::numerical("uks covariance lost positive definiteness"))
}

fn inv2(m: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    for jitter in [0.0, 1e-12, 1e-9] {
        let j = m + Matrix2::from_diagonal_element(jitter);
        if let Some(inv) = j.try_inverse() {
            if inv.iter().all(|v| v.is_finite()) {
                return Ok(inv);
            }
        }
    }
    Err(Error::numerical("uks covariance became singular"))
}

fn sigma_points(belief: &Gaussian2, config: &UksConfig) -> Result<SigmaSet> {
    let n = 2.0;
    let lam = config.alpha * config.alpha * (n + config.kappa) - n;
    let c = n + lam;
    let l = chol2(&(belief.cov * c))?;
    let cols = [l.column(0).into_owned(), l.column(1).into_owned()];
    let points = [
        belief.mean,
        belief.mean + cols[0],
        belief.mean + cols[1],
        belief.mean - cols[0],
        belief.mean - cols[1],
    ];
    let wm0 = lam / c;
    let wc0 = wm0 + 1.0 - config.alpha * config.alpha + config.beta;
    let wi = 1.0 / (2.0 * c);
    Ok(SigmaSet { points, wm: [wm0, wi, wi, wi, wi], wc: [wc0, wi, wi, wi, wi] })
}

fn weighted_mean(set: &SigmaSet, mapped: &[Vec2; 5]) -> Vec2 {
    let mut m = Vec2::zeros();
    for i in 0..5 {
        m += mapped[i] * set.wm[i];
    }
    m
}

fn weighted_cov(set: &SigmaSet, a: &[Vec2; 5], am: Vec2, b: &[Vec2; 5], bm: Vec2) -> Matrix2<f64> {
    let mut cov = Matrix2::zeros();
    for i in 0..5 {
        cov += (a[i] - am) * (b[i] - bm).transpose() * set.wc[i];
    }
    cov
}

// Per-step affine dynamics derived from the combined prior term.
struct StepDynamics {
    drift: Vec2,
    q: Vec2,
}

fn step_dynamics(
    targets: &PriorTargets,
    k: usize,
    params: &EnergyParams,
    config: &UksConfig,
) -> StepDynamics {
    let term = targets.combined(k);
    let mut drift = Vec2::zeros();
    let mut q = Vec2::zeros();
    for c in 0..2 {
        let w = term.lambda[c];
        let shrink = uks_shrink(w, params.c_kn);
        let velocity = if config.limiter_enabled {
            soft_limiter(term.f[c], params.c_mv, term.f[c]).0
        } else {
            term.f[c]
        };
        drift[c] = params.dt * shrink * velocity;
        q[c] = uks_process_noise(w, params.c_kn);
    }
    StepDynamics { drift, q }
}

/// Smooth one agent's trajectory against frozen prior targets. `init`
/// supplies the proxy measurement for masked frames (the previous outer
/// round's state); observed frames measure the observation itself.
pub fn uks_solve(
    init: &Trajectory,
    obs: &Trajectory,
    targets: &PriorTargets,
    params: &EnergyParams,
    config: &UksConfig,
) -> Result<UksSolution> {
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
        return Err(Error::invalid("uks needs at least two frames"));
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

    let measurement = |t: usize| -> (Vec2, f64) {
        if obs.u(t) == 1.0 {
            (obs.points[t], config.obs_noise_small)
        } else {
            (init.points[t], config.obs_noise_large)
        }
    };

    let (m0, r0) = measurement(0);
    let mut filtered =
        vec![Gaussian2 { mean: m0, cov: Matrix2::from_diagonal_element(r0) }];
    let mut predicted = vec![filtered[0]]; // index 0 unused by the smoother
    let mut crosses: Vec<Matrix2<f64>> = Vec::with_capacity(t_len - 1);

    for t in 1..t_len {
        let dyn_k = step_dynamics(targets, t - 1, params, config);
        let prev = filtered[t - 1];
        let set = sigma_points(&prev, config)?;
        let mut propagated = set.points;
        for p in &mut propagated {
            *p += dyn_k.drift;
        }
        let pred_mean = weighted_mean(&set, &propagated);
        let mut pred_cov = weighted_cov(&set, &propagated, pred_mean, &propagated, pred_mean);
        pred_cov[(0, 0)] += dyn_k.q[0];
        pred_cov[(1, 1)] += dyn_k.q[1];
        pred_cov = (pred_cov + pred_cov.transpose()) * 0.5;
        let cross = weighted_cov(&set, &set.points, prev.mean, &propagated, pred_mean);
        crosses.push(cross);
        let pred = Gaussian2 { mean: pred_mean, cov: pred_cov };
        predicted.push(pred);

        // Measurement update through the identity map, still via the
        // unscented transform so the machinery stays uniform.
        let (y, r) = measurement(t);
        let mset = sigma_points(&pred, config)?;
        let mapped = mset.points;
        let y_mean = weighted_mean(&mset, &mapped);
        let mut pyy = weighted_cov(&mset, &mapped, y_mean, &mapped, y_mean);
        pyy += Matrix2::from_diagonal_element(r);
        let pxy = weighted_cov(&mset, &mset.points, pred.mean, &mapped, y_mean);
        let gain = pxy * inv2(&pyy)?;
        let mean = pred.mean + gain * (y - y_mean);
        let mut cov = pred.cov - gain * pyy * gain.transpose();
        cov = (cov + cov.transpose()) * 0.5;
        if !mean.x.is_finite() || !mean.y.is_finite() {
            return Err(Error::numerical(format!("uks filter diverged at frame {t}")));
        }
        filtered.push(Gaussian2 { mean, cov });
    }

    let mut smoothed = filtered.clone();
    for t in (0..t_len - 1).rev() {
        let gain = crosses[t] * inv2(&predicted[t + 1].cov)?;
        let mean = filtered[t].mean + gain * (smoothed[t + 1].mean - predicted[t + 1].mean);
        let mut cov = filtered[t].cov
            + gain * (smoothed[t + 1].cov - predicted[t + 1].cov) * gain.transpose();
        cov = (cov + cov.transpose()) * 0.5;
        if !mean.x.is_finite() || !mean.y.is_finite() {
            return Err(Error::numerical(format!("uks smoother diverged at frame {t}")));
        }
        smoothed[t] = Gaussian2 { mean, cov };
    }

    let traj = Trajectory {
        points: smoothed.iter().map(|g| g.mean).collect(),
        mask: obs.mask.clone(),
    };
    Ok(UksSolution { traj, filtered, smoothed })
}
