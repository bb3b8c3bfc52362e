//! Scenario description files: world bounds, rectangular obstacles and the
//! agent roster (radius, start, goal), one JSON document per scenario.
//!
//! The on-disk schema is stable and validated on load:
//!
//! ```json
//! {
//!   "name": "hallway-two-way",
//!   "width": 200.0, "height": 200.0,
//!   "frames": 101,
//!   "scan_range": 10.0,
//!   "obstacles": [[xmin, ymin, xmax, ymax], ...],
//!   "agents": [{"radius": 0.3, "start": [x, y], "goal": [x, y]}, ...]
//! }
//! ```
//!
//! `scan_range` is optional (default 10 m). Unknown fields are rejected.

use crate::geom::Rect;
use crate::{Error, Result, Vec2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SCAN_RANGE: f64 = 10.0;

/// One roster entry: a disc agent with a fixed start and goal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentSpec {
    pub radius: f64,
    pub start: Vec2,
    pub goal: Vec2,
}

/// A validated scenario. `frames` is the number of emitted trajectory frames
/// (so a run covers `frames - 1` steps).
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub width: f64,
    pub height: f64,
    pub frames: usize,
    pub scan_range: f64,
    pub obstacles: Vec<Rect>,
    pub agents: Vec<AgentSpec>,
}

fn default_scan_range() -> f64 {
    DEFAULT_SCAN_RANGE
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: String,
    width: f64,
    height: f64,
    frames: usize,
    #[serde(default = "default_scan_range")]
    scan_range: f64,
    #[serde(default)]
    obstacles: Vec<[f64; 4]>,
    agents: Vec<AgentFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentFile {
    radius: f64,
    start: [f64; 2],
    goal: [f64; 2],
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario> {
        let file: ScenarioFile =
            serde_json::from_str(text).map_err(|e| Error::parse(format!("scenario: {e}")))?;
        let scenario = Scenario {
            name: file.name,
            width: file.width,
            height: file.height,
            frames: file.frames,
            scan_range: file.scan_range,
            obstacles: file
                .obstacles
                .iter()
                .map(|o| Rect::new(o[0], o[1], o[2], o[3]))
                .collect(),
            agents: file
                .agents
                .iter()
                .map(|a| AgentSpec {
                    radius: a.radius,
                    start: Vec2::new(a.start[0], a.start[1]),
                    goal: Vec2::new(a.goal[0], a.goal[1]),
                })
                .collect(),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        let file = ScenarioFile {
            name: self.name.clone(),
            width: self.width,
            height: self.height,
            frames: self.frames,
            scan_range: self.scan_range,
            obstacles: self.obstacles.iter().map(|r| [r.xmin, r.ymin, r.xmax, r.ymax]).collect(),
            agents: self
                .agents
                .iter()
                .map(|a| AgentFile {
                    radius: a.radius,
                    start: [a.start.x, a.start.y],
                    goal: [a.goal.x, a.goal.y],
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("scenario serialization cannot fail")
    }

    pub fn load(path: &std::path::Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Scenario::from_json(&text)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::invalid("scenario: empty name"));
        }
        if !(self.width.is_finite() && self.width > 0.0)
            || !(self.height.is_finite() && self.height > 0.0)
        {
            return Err(Error::invalid("scenario: width and height must be finite and positive"));
        }
        if self.frames < 2 {
            return Err(Error::invalid("scenario: needs at least 2 frames"));
        }
        if !(self.scan_range.is_finite() && self.scan_range > 0.0) {
            return Err(Error::invalid("scenario: scan_range must be finite and positive"));
        }
        for (i, r) in self.obstacles.iter().enumerate() {
            let finite =
                r.xmin.is_finite() && r.ymin.is_finite() && r.xmax.is_finite() && r.ymax.is_finite();
            if !finite || r.xmin >= r.xmax || r.ymin >= r.ymax {
                return Err(Error::invalid(format!(
                    "scenario: obstacle {i} must be a finite rectangle with positive area"
                )));
            }
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !(a.radius.is_finite() && a.radius > 0.0) {
                return Err(Error::invalid(format!("scenario: agent {i} radius must be positive")));
            }
            for (what, p) in [("start", a.start), ("goal", a.goal)] {
                if !(p.x.is_finite() && p.y.is_finite()) {
                    return Err(Error::invalid(format!("scenario: agent {i} {what} not finite")));
                }
                if p.x < 0.0 || p.x > self.width || p.y < 0.0 || p.y > self.height {
                    return Err(Error::invalid(format!(
                        "scenario: agent {i} {what} outside world bounds"
                    )));
                }
            }
            for (k, r) in self.obstacles.iter().enumerate() {
                if r.distance(a.start) < a.radius {
                    return Err(Error::invalid(format!(
                        "scenario: agent {i} starts inside obstacle {k}"
                    )));
                }
            }
        }
        for i in 0..self.agents.len() {
            for j in (i + 1)..self.agents.len() {
                let gap = (self.agents[i].start - self.agents[j].start).norm();
                if gap < self.agents[i].radius + self.agents[j].radius {
                    return Err(Error::invalid(format!(
                        "scenario: agents {i} and {j} start overlapping"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Derive a roster of exactly `n` agents by cycling the base roster;
    /// duplicated entries get a jittered start (deterministic in `seed`) that
    /// keeps the placement valid. The goal of a duplicate is kept as-is.
    pub fn with_density(&self, n: usize, seed: u64) -> Result<Scenario> {
        if self.agents.is_empty() {
            return Err(Error::invalid("scenario: cannot densify an empty roster"));
        }
        if n == 0 {
            return Err(Error::invalid("scenario: density must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut agents: Vec<AgentSpec> = self.agents.iter().take(n).copied().collect();
        let placement_ok = |agents: &[AgentSpec], cand: &AgentSpec| {
            cand.start.x >= cand.radius
                && cand.start.x <= self.width - cand.radius
                && cand.start.y >= cand.radius
                && cand.start.y <= self.height - cand.radius
                && self.obstacles.iter().all(|r| r.distance(cand.start) >= cand.radius)
                && agents
                    .iter()
                    .all(|a| (a.start - cand.start).norm() >= a.radius + cand.radius)
        };
        while agents.len() < n {
            let base = self.agents[agents.len() % self.agents.len()];
            let mut placed = false;
            // Widen the jitter disk until a free spot shows up.
            for attempt in 0..400 {
                let spread = 1.0 + 4.0 * (attempt as f64 / 100.0);
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                let rad = spread * rng.random_range(0.0f64..1.0).sqrt();
                let cand = AgentSpec {
                    start: base.start + Vec2::new(ang.cos(), ang.sin()) * rad,
                    ..base
                };
                if placement_ok(&agents, &cand) {
                    agents.push(cand);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::invalid(format!(
                    "scenario {}: no room to place {} agents",
                    self.name, n
                )));
            }
        }
        let out = Scenario { agents, ..self.clone() };
        out.validate()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "name": "t",
            "width": 20.0, "height": 10.0,
            "frames": 5,
            "obstacles": [[5.0, 0.0, 6.0, 4.0]],
            "agents": [
                {"radius": 0.3, "start": [1.0, 1.0], "goal": [19.0, 9.0]},
                {"radius": 0.3, "start": [1.0, 2.0], "goal": [19.0, 1.0]}
            ]
        }"#
        .to_string()
    }

    #[test]
    fn parses_and_round_trips() {
        let s = Scenario::from_json(&minimal_json()).unwrap();
        assert_eq!(s.name, "t");
        assert_eq!(s.scan_range, DEFAULT_SCAN_RANGE);
        assert_eq!(s.obstacles.len(), 1);
        assert_eq!(s.agents.len(), 2);
        let again = Scenario::from_json(&s.to_json()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_geometry() {
        let with_unknown = minimal_json().replace("\"name\"", "\"bogus\": 1, \"name\"");
        assert!(Scenario::from_json(&with_unknown).is_err());
        let zero_area = minimal_json().replace("[5.0, 0.0, 6.0, 4.0]", "[5.0, 0.0, 5.0, 4.0]");
        assert!(Scenario::from_json(&zero_area).is_err());
        let overlap = minimal_json().replace("[1.0, 2.0]", "[1.1, 1.0]");
        assert!(Scenario::from_json(&overlap).is_err());
        let inside_obstacle = minimal_json().replace("[1.0, 2.0]", "[5.5, 2.0]");
        assert!(Scenario::from_json(&inside_obstacle).is_err());
        let outside = minimal_json().replace("[19.0, 9.0]", "[21.0, 9.0]");
        assert!(Scenario::from_json(&outside).is_err());
    }

    #[test]
    fn densify_is_deterministic_and_valid() {
        let s = Scenario::from_json(&minimal_json()).unwrap();
        let a = s.with_density(9, 7).unwrap();
        let b = s.with_density(9, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.agents.len(), 9);
        a.validate().unwrap();
        let fewer = s.with_density(1, 7).unwrap();
        assert_eq!(fewer.agents.len(), 1);
        assert_ne!(s.with_density(9, 8).unwrap(), a);
    }
}
