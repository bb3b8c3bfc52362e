//! Planar geometry: range scans against discs and axis-aligned rectangles,
//! and swept-disc collision tests used both by the simulator and the
//! evaluation metrics.
//!
//! Conventions fixed here and relied on everywhere else:
//! * The scan grid has [`SCAN_RAYS`] rays spaced 1 degree apart, ray `k`
//!   pointing `k` degrees counterclockwise from the +x axis.
//! * A miss reports exactly the scan range and zero velocity; an obstacle hit
//!   reports the obstacle distance and zero velocity.
//! * Collision predicates are strict: grazing contact (distance exactly equal
//!   to the radius sum) is a non-collision.

use crate::Vec2;

/// Number of rays in a scan, one per degree.
pub const SCAN_RAYS: usize = 360;

/// Axis-aligned rectangular obstacle. Invariant: `xmin < xmax`, `ymin < ymax`
/// (validated on scenario load; constructors here do not re-check).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Rect { xmin, ymin, xmax, ymax }
    }

    /// Closed containment test; boundary points count as inside.
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }

    /// Closest point of the rectangle (as a filled region) to `p`.
    pub fn closest_point(&self, p: Vec2) -> Vec2 {
        Vec2::new(p.x.clamp(self.xmin, self.xmax), p.y.clamp(self.ymin, self.ymax))
    }

    /// Euclidean distance from `p` to the rectangle, zero inside.
    pub fn distance(&self, p: Vec2) -> f64 {
        (p - self.closest_point(p)).norm()
    }

    /// Corner points in counterclockwise order starting at (xmin, ymin).
    pub fn corners(&self) -> [Vec2; 4] {
        [
            Vec2::new(self.xmin, self.ymin),
            Vec2::new(self.xmax, self.ymin),
            Vec2::new(self.xmax, self.ymax),
            Vec2::new(self.xmin, self.ymax),
        ]
    }

    /// The four boundary edges as segments.
    pub fn edges(&self) -> [(Vec2, Vec2); 4] {
        let c = self.corners();
        [(c[0], c[1]), (c[1], c[2]), (c[2], c[3]), (c[3], c[0])]
    }
}

/// A circular agent footprint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub center: Vec2,
    pub radius: f64,
}

/// Result of a 360-ray range scan. `distances[k]` is the distance along ray
/// `k` to the nearest surface, capped at the scan range; `velocities[k]` is
/// the velocity of the hit entity (zero for obstacles and misses).
#[derive(Clone, Debug)]
pub struct RayScan {
    pub distances: Vec<f64>,
    pub velocities: Vec<Vec2>,
}

impl RayScan {
    /// Unit direction of ray `k`.
    pub fn ray_direction(k: usize) -> Vec2 {
        let a = (k as f64).to_radians();
        Vec2::new(a.cos(), a.sin())
    }
}

/// Distance along the ray `origin + t*dir` (unit `dir`) to a disc, if it hits
/// with `t >= 0`. An origin on or inside the disc reports 0.
pub fn ray_disc_hit(origin: Vec2, dir: Vec2, disc: &Disc) -> Option<f64> {
    let oc = origin - disc.center;
    let c0 = oc.dot(&oc) - disc.radius * disc.radius;
    if c0 <= 0.0 {
        return Some(0.0);
    }
    let b = oc.dot(&dir);
    let discr = b * b - c0;
    if discr < 0.0 {
        return None;
    }
    let t = -b - discr.sqrt();
    if t >= 0.0 {
        Some(t)
    } else {
        None
    }
}

/// Distance along the ray to an axis-aligned rectangle via the slab test.
/// Boundary contact counts as a hit; an origin inside reports 0.
pub fn ray_rect_hit(origin: Vec2, dir: Vec2, rect: &Rect) -> Option<f64> {
    let mut tmin = f64::NEG_INFINITY;
    let mut tmax = f64::INFINITY;
    for (o, d, lo, hi) in [
        (origin.x, dir.x, rect.xmin, rect.xmax),
        (origin.y, dir.y, rect.ymin, rect.ymax),
    ] {
        if d == 0.0 {
            if o < lo || o > hi {
                return None;
            }
        } else {
            let (t1, t2) = ((lo - o) / d, (hi - o) / d);
            let (t1, t2) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            tmin = tmin.max(t1);
            tmax = tmax.min(t2);
        }
    }
    if tmax >= tmin && tmax >= 0.0 {
        Some(tmin.max(0.0))
    } else {
        None
    }
}

/// Scan 360 rays from `origin` against agent discs (with their velocities)
/// and rectangular obstacles. The caller must not include the scanning
/// agent's own disc. Ties at equal distance resolve disc-before-obstacle.
pub fn ray_scan(origin: Vec2, scan_range: f64, discs: &[(Disc, Vec2)], obstacles: &[Rect]) -> RayScan {
    // Entities that cannot be reached within the scan range never produce a
    // hit with t <= range, so they are dropped up front.
    let near_discs: Vec<&(Disc, Vec2)> = discs
        .iter()
        .filter(|(d, _)| (origin - d.center).norm() - d.radius <= scan_range)
        .collect();
    let near_rects: Vec<&Rect> =
        obstacles.iter().filter(|r| r.distance(origin) <= scan_range).collect();

    let mut distances = vec![scan_range; SCAN_RAYS];
    let mut velocities = vec![Vec2::zeros(); SCAN_RAYS];
    for k in 0..SCAN_RAYS {
        let dir = RayScan::ray_direction(k);
        let mut best = scan_range;
        let mut best_vel = Vec2::zeros();
        let mut have_hit = false;
        for (disc, vel) in &near_discs {
            if let Some(t) = ray_disc_hit(origin, dir, disc) {
                if t <= best && (t < best || !have_hit) {
                    best = t;
                    best_vel = *vel;
                    have_hit = true;
                }
            }
        }
        for rect in &near_rects {
            if let Some(t) = ray_rect_hit(origin, dir, rect) {
                // Strict: at equal distance a disc hit keeps priority.
                if t < best {
                    best = t;
                    best_vel = Vec2::zeros();
                    have_hit = true;
                }
            }
        }
        let _ = have_hit;
        distances[k] = best;
        velocities[k] = best_vel;
    }
    RayScan { distances, velocities }
}

/// Whether two discs moving linearly over one step come strictly closer than
/// the sum of their radii. `a_from -> a_to` and `b_from -> b_to` are the
/// endpoints of the step; grazing contact is a non-collision.
pub fn segment_collision(
    a_from: Vec2,
    a_to: Vec2,
    b_from: Vec2,
    b_to: Vec2,
    ra: f64,
    rb: f64,
) -> bool {
    // In the frame of b the relative position is d0 + s*dv for s in [0, 1];
    // the squared distance is a quadratic whose minimum over the interval is
    // at the clamped vertex.
    let d0 = a_from - b_from;
    let dv = (a_to - a_from) - (b_to - b_from);
    let rsum = ra + rb;
    let vv = dv.dot(&dv);
    let s = if vv == 0.0 { 0.0 } else { (-d0.dot(&dv) / vv).clamp(0.0, 1.0) };
    let closest = d0 + dv * s;
    closest.dot(&closest) < rsum * rsum
}

/// Distance between two segments `p1->q1` and `p2->q2`; zero if they cross.
/// Degenerate (zero-length) segments are handled as points.
pub fn segment_segment_distance(p1: Vec2, q1: Vec2, p2: Vec2, q2: Vec2) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let (s, t);
    if a == 0.0 && e == 0.0 {
        return r.norm();
    }
    if a == 0.0 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e == 0.0 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s_ = if denom != 0.0 { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t_ = (b * s_ + f) / e;
            if t_ < 0.0 {
                t_ = 0.0;
                s_ = (-c / a).clamp(0.0, 1.0);
            } else if t_ > 1.0 {
                t_ = 1.0;
                s_ = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s_;
            t = t_;
        }
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

/// Distance from a segment to a rectangle (as a filled region), zero when
/// they overlap.
pub fn segment_rect_distance(from: Vec2, to: Vec2, rect: &Rect) -> f64 {
    if rect.contains(from) || rect.contains(to) {
        return 0.0;
    }
    // Neither endpoint is inside, so any overlap shows up as a boundary-edge
    // crossing, which segment_segment_distance reports as zero.
    rect.edges()
        .iter()
        .map(|&(a, b)| segment_segment_distance(from, to, a, b))
        .fold(f64::INFINITY, f64::min)
}

/// Whether a disc of radius `radius` sweeping linearly from `from` to `to`
/// strictly overlaps the rectangle. Equivalent to testing the segment against
/// the rectangle inflated by `radius` with exact rounded corners.
pub fn segment_obstacle_collision(from: Vec2, to: Vec2, radius: f64, rect: &Rect) -> bool {
    segment_rect_distance(from, to, rect) < radius
}

/// Collision-event totals over a set of trajectories.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CollisionCounts {
    /// Events counted once per unordered agent pair per time step.
    pub agent_agent: u64,
    /// Events counted once per (agent, obstacle) pair per time step.
    pub agent_obstacle: u64,
}

/// Count collision events over synchronized trajectories. All trajectories
/// must have the same non-zero length and `radii` must match their count.
pub fn count_collisions(
    trajectories: &[Vec<Vec2>],
    radii: &[f64],
    obstacles: &[Rect],
) -> crate::Result<CollisionCounts> {
    if trajectories.len() != radii.len() {
        return Err(crate::Error::invalid(format!(
            "count_collisions: {} trajectories but {} radii",
            trajectories.len(),
            radii.len()
        )));
    }
    let len = match trajectories.first() {
        Some(t) => t.len(),
        None => return Ok(CollisionCounts::default()),
    };
    if len == 0 || trajectories.iter().any(|t| t.len() != len) {
        return Err(crate::Error::invalid(
            "count_collisions: trajectories must share the same non-zero length".to_string(),
        ));
    }
    let mut counts = CollisionCounts::default();
    for step in 1..len {
        for i in 0..trajectories.len() {
            let (ai, bi) = (trajectories[i][step - 1], trajectories[i][step]);
            for j in (i + 1)..trajectories.len() {
                let (aj, bj) = (trajectories[j][step - 1], trajectories[j][step]);
                if segment_collision(ai, bi, aj, bj, radii[i], radii[j]) {
                    counts.agent_agent += 1;
                }
            }
            for rect in obstacles {
                if segment_obstacle_collision(ai, bi, radii[i], rect) {
                    counts.agent_obstacle += 1;
                }
            }
        }
    }
    Ok(counts)
}
