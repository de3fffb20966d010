//! CSV persistence for trajectories and schedules. Floats are written in the
//! shortest form that parses back to the same value.

use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::schedule::TimeSchedule;
use crate::trajectory::Trajectory;

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

/// Header `t,x_0,...,x_{d-1}`, one row per node in trajectory order.
pub fn write_trajectory_csv(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..traj.dim()).map(|i| format!("x_{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (t, x) in &traj.nodes {
        let row = std::iter::once(t.to_string()).chain(x.iter().map(f64::to_string));
        w.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Nodes only; evaluation records are not stored in the CSV.
pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.get(0) != Some("t") {
        return Err(Error::parse(path, "first column must be 't'"));
    }
    let dim = header.len() - 1;
    let mut nodes = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::parse(path, format!("row {}: {e}", line + 1)))?;
        if vals.len() != dim + 1 {
            return Err(Error::parse(
                path,
                format!(
                    "row {} has {} fields, expected {}",
                    line + 1,
                    vals.len(),
                    dim + 1
                ),
            ));
        }
        nodes.push((vals[0], DVector::from_row_slice(&vals[1..])));
    }
    Ok(Trajectory {
        nodes,
        ..Default::default()
    })
}

/// Single column `t`, ascending.
pub fn write_schedule_csv(path: impl AsRef<Path>, schedule: &TimeSchedule) -> Result<()> {
    let path = path.as_ref();
    let mut w = writer(path)?;
    w.write_record(["t"]).map_err(|e| csv_error(path, e))?;
    for t in schedule.times() {
        w.write_record([t.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
