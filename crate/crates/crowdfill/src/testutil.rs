//! Brute-force and cross-derivation oracles used by the test suites.
//!
//! Everything in this module deliberately avoids the closed forms and solver
//! code paths it is used to check: ray hits are found by marching, swept
//! collisions by dense sampling of the distance function, quadratic minima by
//! polarization-reconstruction of the quadratic, alignments by exhaustive
//! enumeration. Not part of the public API surface.

use crate::geom::{Disc, Rect};
use crate::Vec2;

fn inside_disc(p: Vec2, d: &Disc) -> bool {
    let dx = p.x - d.center.x;
    let dy = p.y - d.center.y;
    dx * dx + dy * dy <= d.radius * d.radius
}

fn inside_rect(p: Vec2, r: &Rect) -> bool {
    p.x >= r.xmin && p.x <= r.xmax && p.y >= r.ymin && p.y <= r.ymax
}

fn point_rect_distance(p: Vec2, r: &Rect) -> f64 {
    let dx = (r.xmin - p.x).max(0.0).max(p.x - r.xmax);
    let dy = (r.ymin - p.y).max(0.0).max(p.y - r.ymax);
    (dx * dx + dy * dy).sqrt()
}

/// March along the ray at `angle_deg` in 1e-4 steps until a surface is
/// entered, then bisect the bracketing interval down to 1e-13. Returns the
/// scan range on a miss.
pub fn ray_hit_oracle(
    origin: Vec2,
    angle_deg: f64,
    range: f64,
    discs: &[Disc],
    rects: &[Rect],
) -> f64 {
    let a = angle_deg.to_radians();
    let dir = Vec2::new(a.cos(), a.sin());
    let inside = |t: f64| {
        let p = origin + dir * t;
        discs.iter().any(|d| inside_disc(p, d)) || rects.iter().any(|r| inside_rect(p, r))
    };
    if inside(0.0) {
        return 0.0;
    }
    let step = 1e-4;
    let mut t = step;
    while t <= range {
        if inside(t) {
            let (mut lo, mut hi) = (t - step, t);
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if inside(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return 0.5 * (lo + hi);
        }
        t += step;
    }
    range
}

/// Dense sampling of the inter-disc distance over one step at the given
/// sampling resolution; strict comparison like the closed form.
pub fn segment_collision_oracle_step(
    a_from: Vec2,
    a_to: Vec2,
    b_from: Vec2,
    b_to: Vec2,
    ra: f64,
    rb: f64,
    step: f64,
) -> bool {
    let rsum = ra + rb;
    let n = (1.0 / step).round() as usize;
    for i in 0..=n {
        let s = i as f64 / n as f64;
        let pa = a_from + (a_to - a_from) * s;
        let pb = b_from + (b_to - b_from) * s;
        if (pa - pb).norm() < rsum {
            return true;
        }
    }
    false
}

/// [`segment_collision_oracle_step`] at the reference 1e-5 resolution.
pub fn segment_collision_oracle(
    a_from: Vec2,
    a_to: Vec2,
    b_from: Vec2,
    b_to: Vec2,
    ra: f64,
    rb: f64,
) -> bool {
    segment_collision_oracle_step(a_from, a_to, b_from, b_to, ra, rb, 1e-5)
}

/// Dense sampling of the point-to-rectangle distance along the sweep.
pub fn segment_obstacle_oracle_step(
    from: Vec2,
    to: Vec2,
    radius: f64,
    rect: &Rect,
    step: f64,
) -> bool {
    let n = (1.0 / step).round() as usize;
    for i in 0..=n {
        let s = i as f64 / n as f64;
        let p = from + (to - from) * s;
        if point_rect_distance(p, rect) < radius {
            return true;
        }
    }
    false
}

/// [`segment_obstacle_oracle_step`] at the reference 1e-5 resolution.
pub fn segment_obstacle_oracle(from: Vec2, to: Vec2, radius: f64, rect: &Rect) -> bool {
    segment_obstacle_oracle_step(from, to, radius, rect, 1e-5)
}

/// Minimize a quadratic `f(x) = c + b'x + x'Qx/2` given only black-box
/// evaluations: `Q` and `b` are reconstructed by polarization over the unit
/// directions (exact for quadratics up to rounding) and the stationary point
/// solved densely. Independent of any closed-form minimizer under test.
pub fn quadratic_argmin<F: Fn(&[f64]) -> f64>(f: F, dim: usize) -> Vec<f64> {
    let c = f(&vec![0.0; dim]);
    let mut q = nalgebra::DMatrix::<f64>::zeros(dim, dim);
    let mut b = nalgebra::DVector::<f64>::zeros(dim);
    let unit = |i: usize, s: f64| {
        let mut x = vec![0.0; dim];
        x[i] = s;
        x
    };
    for i in 0..dim {
        let fp = f(&unit(i, 1.0));
        let fm = f(&unit(i, -1.0));
        q[(i, i)] = fp + fm - 2.0 * c;
        b[i] = 0.5 * (fp - fm);
    }
    for i in 0..dim {
        for j in (i + 1)..dim {
            let mut x = vec![0.0; dim];
            x[i] = 1.0;
            x[j] = 1.0;
            let qij = f(&x) - f(&unit(i, 1.0)) - f(&unit(j, 1.0)) + c;
            q[(i, j)] = qij;
            q[(j, i)] = qij;
        }
    }
    let sol = q.lu().solve(&(-b)).expect("quadratic_argmin: singular quadratic");
    sol.iter().copied().collect()
}

/// Golden-section search for the minimum of a 1-d function on [a, b].
pub fn golden_section_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Central finite-difference gradient of a black-box function.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Exhaustive dynamic-time-warping oracle: enumerates every monotone
/// alignment path explicitly (no DP table) and returns the minimum summed
/// Euclidean cost. Only usable for short sequences.
pub fn dtw_exhaustive(a: &[Vec2], b: &[Vec2]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    assert!(a.len() <= 8 && b.len() <= 8, "exhaustive oracle is exponential");
    fn walk(a: &[Vec2], b: &[Vec2], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (a[i] - b[j]).norm();
        if i == a.len() - 1 && j == b.len() - 1 {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

/// Exact linear-Gaussian Kalman filter + RTS smoother for the scalar system
///   x_{t+1} = x_t + drift_t + w,  w ~ N(0, q_t)
///   z_t     = x_t + v,            v ~ N(0, r_t)
/// starting from N(m0, p0) at t = 0 (frame 0 has no update; the initial
/// belief already encodes it). Returns the smoothed means.
pub fn scalar_kalman_rts(
    m0: f64,
    p0: f64,
    drift: &[f64],
    q: &[f64],
    z: &[f64],
    r: &[f64],
) -> Vec<f64> {
    let steps = drift.len();
    assert_eq!(q.len(), steps);
    assert_eq!(z.len(), steps);
    assert_eq!(r.len(), steps);
    let mut mf = vec![m0];
    let mut pf = vec![p0];
    let mut mp = vec![0.0; steps + 1];
    let mut pp = vec![0.0; steps + 1];
    for t in 0..steps {
        mp[t + 1] = mf[t] + drift[t];
        pp[t + 1] = pf[t] + q[t];
        let k = pp[t + 1] / (pp[t + 1] + r[t]);
        mf.push(mp[t + 1] + k * (z[t] - mp[t + 1]));
        pf.push((1.0 - k) * pp[t + 1]);
    }
    let mut ms = mf.clone();
    let mut ps = pf.clone();
    for t in (0..steps).rev() {
        let g = pf[t] / pp[t + 1];
        ms[t] = mf[t] + g * (ms[t + 1] - mp[t + 1]);
        ps[t] = pf[t] + g * g * (ps[t + 1] - pp[t + 1]);
    }
    ms
}
