//! Run logs as JSON lines and versioned JSON checkpoints.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::FilterParams;
use crate::dynamics::{ControlInput, TerrainInput, VehicleState, STATE_DIM};
use crate::error::{Error, Result};
use crate::meta::{EpochRecord, RunLog};
use crate::model::HybridModel;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RunLine {
    state: [f64; STATE_DIM],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    control: Option<ControlInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    terrain: Option<TerrainInput>,
}

pub fn write_run_log(path: &Path, run: &RunLog) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (k, x) in run.states.iter().enumerate() {
        let line = RunLine {
            state: x.to_array(),
            control: run.controls.get(k).copied(),
            terrain: run.terrains.get(k).copied(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_run_log(path: &Path, run_id: usize) -> Result<RunLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut run = RunLog {
        run_id,
        states: Vec::new(),
        controls: Vec::new(),
        terrains: Vec::new(),
    };
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunLine = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", n + 1),
        })?;
        run.states.push(VehicleState::from_array(rec.state));
        match (rec.control, rec.terrain) {
            (Some(u), Some(y)) => {
                run.controls.push(u);
                run.terrains.push(y);
            }
            (None, None) => {}
            _ => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("line {}: control and terrain must appear together", n + 1),
                })
            }
        }
    }
    Ok(run)
}

/// All `*.jsonl` run logs in a directory, in file-name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<RunLog>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().enumerate().map(|(i, p)| read_run_log(p, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// `"baseline"` or `"meta"`.
    pub kind: String,
    pub model: HybridModel,
    pub filter: FilterParams,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn new(kind: &str, model: HybridModel, filter: FilterParams, history: Vec<EpochRecord>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            model,
            filter,
            history,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        ck.model.params.validate()?;
        ck.model.net.validate()?;
        ck.filter.validate()?;
        if ck.filter.n_theta() != ck.model.n_theta() {
            return Err(Error::Shape(format!(
                "checkpoint {}: filter has {} parameters, model has {}",
                path.display(),
                ck.filter.n_theta(),
                ck.model.n_theta()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ParametricParams;
    use crate::network::NetShape;
    use crate::synthetic::{synthetic_run, tiny_shape};

    #[test]
    fn run_logs_round_trip() {
        let model = HybridModel::parametric(ParametricParams::default(), tiny_shape());
        let run = synthetic_run(&model, &[0.0; 6], 50, 1, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("runs/run_000.jsonl");
        write_run_log(&p, &run).unwrap();
        let back = read_run_log(&p, run.run_id).unwrap();
        assert_eq!(back, run);
        let all = read_dataset(&dir.path().join("runs")).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].states, back.states);
    }

    #[test]
    fn checkpoint_round_trip_and_version_check() {
        let model = HybridModel::parametric(ParametricParams::default(), NetShape::default());
        let ck = Checkpoint::new("baseline", model.clone(), FilterParams::new(model.n_theta()), vec![]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        let mut old = ck.clone();
        old.version = 0;
        old.save(&p).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Version { .. })));
    }
}
