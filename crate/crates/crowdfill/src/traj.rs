//! Trajectories with per-frame observation flags, plus the masking,
//! initialization and split helpers of the evaluation protocol.

use crate::{Error, Result, Vec2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A single agent's trajectory. `mask[t]` is the observation flag u_t:
/// true means frame `t` was observed, false means it must be reconstructed.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Vec<Vec2>,
    pub mask: Vec<bool>,
}

impl Trajectory {
    pub fn fully_observed(points: Vec<Vec2>) -> Trajectory {
        let mask = vec![true; points.len()];
        Trajectory { points, mask }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Observation flag as the 0/1 weight u_t.
    pub fn u(&self, t: usize) -> f64 {
        if self.mask[t] {
            1.0
        } else {
            0.0
        }
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Hide one contiguous interior block of `round(fraction * len)` frames.
/// Frame 0 and the final frame always stay observed; the block start is
/// uniform over the feasible positions, deterministic in `seed`. A fraction
/// that rounds to zero frames is a no-op.
pub fn mask_segment(traj: &Trajectory, fraction: f64, seed: u64) -> Result<Trajectory> {
    if !(fraction.is_finite() && fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("mask_segment: fraction must lie strictly in (0, 1)"));
    }
    let len = traj.len();
    if len < 3 {
        return Err(Error::invalid("mask_segment: trajectory too short to mask"));
    }
    let masked_len = (fraction * len as f64).round() as usize;
    if masked_len == 0 {
        return Ok(traj.clone());
    }
    // The block must fit strictly inside [1, len-2].
    if masked_len > len - 2 {
        return Err(Error::invalid(format!(
            "mask_segment: masking {masked_len} of {len} frames leaves fewer than 2 observed"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(1..=(len - 1 - masked_len));
    let mut out = traj.clone();
    for t in start..start + masked_len {
        out.mask[t] = false;
    }
    Ok(out)
}

/// Fill every masked run by linear interpolation between its bracketing
/// observed frames. The mask is preserved; only points change. The first and
/// last frames must be observed.
pub fn linear_init(traj: &Trajectory) -> Result<Trajectory> {
    let len = traj.len();
    if len == 0 {
        return Err(Error::invalid("linear_init: empty trajectory"));
    }
    if !traj.mask[0] || !traj.mask[len - 1] {
        return Err(Error::invalid("linear_init: first and last frames must be observed"));
    }
    let mut out = traj.clone();
    let mut t = 1;
    while t < len {
        if out.mask[t] {
            t += 1;
            continue;
        }
        let run_start = t;
        while !out.mask[t] {
            t += 1;
        }
        let (a, b) = (run_start - 1, t);
        let (pa, pb) = (out.points[a], out.points[b]);
        for k in run_start..b {
            let s = (k - a) as f64 / (b - a) as f64;
            out.points[k] = pa + (pb - pa) * s;
        }
    }
    Ok(out)
}

/// Randomly partition `n` trajectories into train and test index sets with
/// sizes matching `ratio = (train, test)` up to rounding; both sides are
/// non-empty. Returned indices are sorted; deterministic in `seed`.
pub fn split_train_test(n: usize, ratio: (usize, usize), seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if ratio.0 == 0 || ratio.1 == 0 {
        return Err(Error::invalid("split_train_test: ratio parts must be positive"));
    }
    if n < 2 {
        return Err(Error::invalid("split_train_test: need at least 2 trajectories"));
    }
    let total = (ratio.0 + ratio.1) as f64;
    let train_count =
        ((n as f64 * ratio.0 as f64 / total).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut train: Vec<usize> = idx[..train_count].to_vec();
    let mut test: Vec<usize> = idx[train_count..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
