//! Trajectory dataset files: one delimiter-separated text file per run.
//!
//! The format is fixed and reproduced bit-exactly by a write/read/write
//! round trip (floats use Rust's shortest round-trip representation):
//!
//! ```text
//! # scenario=<name>
//! # dt=<seconds between frames>
//! # seed=<u64 generation seed>
//! # density=<agent count requested at generation>
//! agent_id,t,x,y,mask
//! 0,0,12.5,3.25,1
//! ...
//! ```
//!
//! Rows are agent-major, frame-minor, with contiguous ids and frame indices
//! starting at zero; every agent has the same frame count. `mask` is the 0/1
//! observation flag.

use crate::traj::Trajectory;
use crate::{Error, Result, Vec2};

/// Run-level metadata stored in the dataset header.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub scenario: String,
    pub dt: f64,
    pub seed: u64,
    pub density: usize,
}

const COLUMNS: &str = "agent_id,t,x,y,mask";

pub fn dataset_to_string(meta: &DatasetMeta, trajectories: &[Trajectory]) -> Result<String> {
    if meta.scenario.is_empty() || meta.scenario.contains('\n') {
        return Err(Error::invalid("dataset: scenario name must be a non-empty single line"));
    }
    if !(meta.dt.is_finite() && meta.dt > 0.0) {
        return Err(Error::invalid("dataset: dt must be finite and positive"));
    }
    if trajectories.is_empty() {
        return Err(Error::invalid("dataset: no trajectories"));
    }
    let len = trajectories[0].len();
    if len == 0 || trajectories.iter().any(|t| t.len() != len) {
        return Err(Error::invalid("dataset: trajectories must share the same non-zero length"));
    }
    let mut out = String::new();
    out.push_str(&format!("# scenario={}\n", meta.scenario));
    out.push_str(&format!("# dt={}\n", meta.dt));
    out.push_str(&format!("# seed={}\n", meta.seed));
    out.push_str(&format!("# density={}\n", meta.density));
    out.push_str(COLUMNS);
    out.push('\n');
    for (id, traj) in trajectories.iter().enumerate() {
        for t in 0..len {
            let p = traj.points[t];
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::invalid(format!("dataset: non-finite point at agent {id} frame {t}")));
            }
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                id,
                t,
                p.x,
                p.y,
                if traj.mask[t] { 1 } else { 0 }
            ));
        }
    }
    Ok(out)
}

pub fn dataset_from_str(text: &str) -> Result<(DatasetMeta, Vec<Trajectory>)> {
    let mut lines = text.lines();
    let mut scenario = None;
    let mut dt = None;
    let mut seed = None;
    let mut density = None;
    let mut header_lines = 0;
    for line in lines.by_ref() {
        if let Some(rest) = line.strip_prefix("# ") {
            header_lines += 1;
            if header_lines > 4 {
                return Err(Error::parse("dataset: too many header lines"));
            }
            if let Some(v) = rest.strip_prefix("scenario=") {
                scenario = Some(v.to_string());
            } else if let Some(v) = rest.strip_prefix("dt=") {
                let parsed: f64 =
                    v.parse().map_err(|_| Error::parse(format!("dataset: bad dt {v:?}")))?;
                if !(parsed.is_finite() && parsed > 0.0) {
                    return Err(Error::parse("dataset: dt must be finite and positive"));
                }
                dt = Some(parsed);
            } else if let Some(v) = rest.strip_prefix("seed=") {
                seed = Some(v.parse::<u64>().map_err(|_| Error::parse(format!("dataset: bad seed {v:?}")))?);
            } else if let Some(v) = rest.strip_prefix("density=") {
                density =
                    Some(v.parse::<usize>().map_err(|_| Error::parse(format!("dataset: bad density {v:?}")))?);
            } else {
                return Err(Error::parse(format!("dataset: unknown header line {line:?}")));
            }
        } else if line == COLUMNS {
            let meta = DatasetMeta {
                scenario: scenario.ok_or_else(|| Error::parse("dataset: missing scenario header"))?,
                dt: dt.ok_or_else(|| Error::parse("dataset: missing dt header"))?,
                seed: seed.ok_or_else(|| Error::parse("dataset: missing seed header"))?,
                density: density.ok_or_else(|| Error::parse("dataset: missing density header"))?,
            };
            if meta.scenario.is_empty() {
                return Err(Error::parse("dataset: empty scenario name"));
            }
            return parse_rows(meta, lines);
        } else {
            return Err(Error::parse(format!("dataset: unexpected line before column header: {line:?}")));
        }
    }
    Err(Error::parse("dataset: missing column header"))
}

fn parse_rows<'a>(
    meta: DatasetMeta,
    lines: impl Iterator<Item = &'a str>,
) -> Result<(DatasetMeta, Vec<Trajectory>)> {
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut line_no = 5;
    for line in lines {
        line_no += 1;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next = |what: &str| {
            fields
                .next()
                .ok_or_else(|| Error::parse(format!("dataset line {line_no}: missing {what}")))
        };
        let id: usize = next("agent_id")?
            .parse()
            .map_err(|_| Error::parse(format!("dataset line {line_no}: bad agent_id")))?;
        let t: usize = next("t")?
            .parse()
            .map_err(|_| Error::parse(format!("dataset line {line_no}: bad t")))?;
        let x: f64 = next("x")?
            .parse()
            .map_err(|_| Error::parse(format!("dataset line {line_no}: bad x")))?;
        let y: f64 = next("y")?
            .parse()
            .map_err(|_| Error::parse(format!("dataset line {line_no}: bad y")))?;
        let mask = match next("mask")? {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::parse(format!("dataset line {line_no}: mask must be 0 or 1, got {other:?}")))
            }
        };
        if fields.next().is_some() {
            return Err(Error::parse(format!("dataset line {line_no}: trailing fields")));
        }
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::parse(format!("dataset line {line_no}: non-finite coordinates")));
        }
        // Rows must arrive agent-major with contiguous indices.
        if id == trajectories.len() && t == 0 {
            trajectories.push(Trajectory { points: Vec::new(), mask: Vec::new() });
        }
        if id + 1 != trajectories.len() || trajectories[id].points.len() != t {
            return Err(Error::parse(format!(
                "dataset line {line_no}: rows out of order at agent {id} frame {t}"
            )));
        }
        trajectories[id].points.push(Vec2::new(x, y));
        trajectories[id].mask.push(mask);
    }
    if trajectories.is_empty() {
        return Err(Error::parse("dataset: no data rows"));
    }
    let len = trajectories[0].len();
    if trajectories.iter().any(|t| t.len() != len) {
        return Err(Error::parse("dataset: agents have differing frame counts"));
    }
    Ok((meta, trajectories))
}

pub fn write_dataset(path: &std::path::Path, meta: &DatasetMeta, trajectories: &[Trajectory]) -> Result<()> {
    let text = dataset_to_string(meta, trajectories)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_dataset(path: &std::path::Path) -> Result<(DatasetMeta, Vec<Trajectory>)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    dataset_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (DatasetMeta, Vec<Trajectory>) {
        let meta = DatasetMeta { scenario: "t".into(), dt: 1.5, seed: 11, density: 2 };
        let mut a = Trajectory::fully_observed(vec![
            Vec2::new(0.0, 0.125),
            Vec2::new(1.0, 0.3333333333333333),
            Vec2::new(2.0, -7.25e-3),
        ]);
        a.mask[1] = false;
        let b = Trajectory::fully_observed(vec![
            Vec2::new(5.0, 5.0),
            Vec2::new(4.5, 5.5),
            Vec2::new(4.0, 6.0),
        ]);
        (meta, vec![a, b])
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (meta, trajs) = sample();
        let text = dataset_to_string(&meta, &trajs).unwrap();
        let (meta2, trajs2) = dataset_from_str(&text).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(trajs, trajs2);
        let text2 = dataset_to_string(&meta2, &trajs2).unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn rejects_malformed_inputs() {
        let (meta, trajs) = sample();
        let good = dataset_to_string(&meta, &trajs).unwrap();
        // Missing header field.
        assert!(dataset_from_str(&good.replace("# seed=11\n", "")).is_err());
        // Unknown header key.
        assert!(dataset_from_str(&good.replace("# seed=", "# sed=")).is_err());
        // Bad mask value.
        assert!(dataset_from_str(&good.replace("0,1,1,0.3333333333333333,0", "0,1,1,0.3333333333333333,2")).is_err());
        // Out-of-order rows.
        let mut lines: Vec<&str> = good.lines().collect();
        lines.swap(6, 7);
        assert!(dataset_from_str(&lines.join("\n")).is_err());
        // Truncated agent.
        let truncated: Vec<&str> = good.lines().take(good.lines().count() - 1).collect();
        assert!(dataset_from_str(&truncated.join("\n")).is_err());
        // Non-finite coordinate.
        assert!(dataset_from_str(&good.replace("5,5", "NaN,5")).is_err());
        // Empty body.
        assert!(dataset_from_str("# scenario=t\n# dt=1.5\n# seed=1\n# density=1\nagent_id,t,x,y,mask\n").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        let (meta, trajs) = sample();
        write_dataset(&path, &meta, &trajs).unwrap();
        let (meta2, trajs2) = read_dataset(&path).unwrap();
        assert_eq!((meta, trajs), (meta2, trajs2));
    }
}
