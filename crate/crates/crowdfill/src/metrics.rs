//! Evaluation metrics: dynamic-time-warping error against ground truth and
//! rank aggregation across scenarios.
//!
//! Collision counting itself lives in `geom::count_collisions`; this module
//! carries its totals inside `EvalReport` rows and adds the alignment and
//! ranking arithmetic the result tables are built from.

use crate::geom::CollisionCounts;
use crate::traj::Trajectory;
use crate::{Error, Result, Vec2};
use serde::{Deserialize, Serialize};

/// Dynamic-time-warping distance with Euclidean point cost.
///
/// Boundary-aligned and unconstrained: the first points of both sequences are
/// matched, so are the last, and any monotone alignment in between is allowed
/// (no band). The cost of an alignment is the sum of matched-pair distances;
/// the returned value is the minimum over all alignments, in meters.
pub fn dtw(a: &[Vec2], b: &[Vec2]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("dtw: empty input sequence"));
    }
    // One rolling row of the (|a|+1) x (|b|+1) table; index 0 is the border.
    // Only the top-left border cell is reachable, everything else starts at
    // infinity, which forces the (0, 0) boundary match.
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for pa in a {
        let mut curr = vec![f64::INFINITY; m + 1];
        for j in 1..=m {
            let step = prev[j - 1].min(prev[j]).min(curr[j - 1]);
            curr[j] = (pa - b[j - 1]).norm() + step;
        }
        prev = curr;
    }
    Ok(prev[m])
}

/// Total polyline length of a point sequence, in meters.
pub fn path_length(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// DTW distance between an estimate and the ground truth, normalized by the
/// ground-truth path length and expressed in percent.
///
/// The normalizer makes the score scale-invariant and comparable across
/// scenarios of different extent. A stationary ground-truth track has no
/// defined score and is rejected; callers report such agents as missing.
pub fn relative_dtw(estimate: &Trajectory, ground_truth: &Trajectory) -> Result<f64> {
    let bad = |p: &Vec2| !p.x.is_finite() || !p.y.is_finite();
    if estimate.points.iter().any(bad) || ground_truth.points.iter().any(bad) {
        return Err(Error::invalid("relative_dtw: non-finite point"));
    }
    let cost = dtw(&estimate.points, &ground_truth.points)?;
    let len = path_length(&ground_truth.points);
    if len <= 0.0 {
        return Err(Error::invalid(
            "relative_dtw: ground-truth path has zero length",
        ));
    }
    Ok(100.0 * cost / len)
}

/// Evaluation scores for one (scenario, prior, optimizer) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub prior: String,
    pub optimizer: String,
    /// Relative DTW per agent, percent, in agent order.
    pub relative_dtw_percent: Vec<f64>,
    /// Per-agent mean of `relative_dtw_percent`.
    pub relative_dtw_mean_percent: f64,
    pub agent_agent_collisions: u64,
    pub agent_obstacle_collisions: u64,
    /// Wall clock of the optimize call alone, not of data loading or metrics.
    pub wallclock_seconds: f64,
    pub agent_count: usize,
}

impl EvalReport {
    /// Builds a report row and fills in the per-agent mean. Percentages must
    /// be finite and non-negative and at least one agent must be present.
    pub fn new(
        scenario: impl Into<String>,
        prior: impl Into<String>,
        optimizer: impl Into<String>,
        relative_dtw_percent: Vec<f64>,
        collisions: CollisionCounts,
        wallclock_seconds: f64,
        agent_count: usize,
    ) -> Result<EvalReport> {
        if relative_dtw_percent.is_empty() {
            return Err(Error::invalid("EvalReport: no per-agent scores"));
        }
        if relative_dtw_percent.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid(
                "EvalReport: relative DTW percentages must be finite and non-negative",
            ));
        }
        if !wallclock_seconds.is_finite() || wallclock_seconds < 0.0 {
            return Err(Error::invalid("EvalReport: bad wallclock"));
        }
        let mean = relative_dtw_percent.iter().sum::<f64>() / relative_dtw_percent.len() as f64;
        Ok(EvalReport {
            scenario: scenario.into(),
            prior: prior.into(),
            optimizer: optimizer.into(),
            relative_dtw_percent,
            relative_dtw_mean_percent: mean,
            agent_agent_collisions: collisions.agent_agent,
            agent_obstacle_collisions: collisions.agent_obstacle,
            wallclock_seconds,
            agent_count,
        })
    }
}

/// Average rank per method over scenarios.
///
/// `scores[m][s]` is the metric value of method `m` on scenario `s`, lower is
/// better. Within each scenario methods are ranked from 1; ties receive the
/// mean of the positions they span. Every cell must be present and finite,
/// an incomplete table is an error rather than a silently skewed average.
pub fn rank_methods(scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let methods = scores.len();
    if methods == 0 {
        return Err(Error::invalid("rank_methods: no methods"));
    }
    let scenarios = scores[0].len();
    if scenarios == 0 {
        return Err(Error::invalid("rank_methods: no scenarios"));
    }
    if scores.iter().any(|row| row.len() != scenarios) {
        return Err(Error::invalid("rank_methods: ragged score table"));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("rank_methods: missing cell"));
    }
    let mut avg = vec![0.0; methods];
    for s in 0..scenarios {
        let column: Vec<f64> = scores.iter().map(|row| row[s]).collect();
        let ranks = ranks_with_ties(&column);
        for m in 0..methods {
            avg[m] += ranks[m];
        }
    }
    for r in &mut avg {
        *r /= scenarios as f64;
    }
    Ok(avg)
}

/// 1-based ranks of `values` ascending, exact ties sharing the mean rank.
fn ranks_with_ties(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && values[order[end]] == values[order[k]] {
            end += 1;
        }
        // Mean of the 1-based positions k+1 ..= end.
        let mean = (k + 1 + end) as f64 / 2.0;
        for &idx in &order[k..end] {
            ranks[idx] = mean;
        }
        k = end;
    }
    ranks
}
