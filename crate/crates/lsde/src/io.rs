//! Flat binary array files and trajectory persistence.
//!
//! Array file layout (little-endian): magic bytes `LSDE`, format version
//! u32, row count u32, column count u32, then rows×cols f64 values in
//! row-major order. JSON sidecars carry everything else.

use crate::error::{Error, Result};
use crate::sde::Trajectory;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LSDE";
const VERSION: u32 = 1;

/// Write a dense matrix in the LSDE binary layout.
pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.nrows() as u32).to_le_bytes())?;
    w.write_all(&(m.ncols() as u32).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            w.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a matrix written by [`write_matrix`].
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadFormat(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::BadFormat(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut u32buf)?;
    let rows = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let cols = u32::from_le_bytes(u32buf) as usize;
    let mut data = vec![0.0f64; rows * cols];
    let mut f64buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut f64buf)?;
        *v = f64::from_le_bytes(f64buf);
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Time grid description for a trajectory sidecar; uniform grids are
/// stored compactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimesSpec {
    Uniform { t0: f64, dt: f64, n_steps: usize },
    Explicit { times: Vec<f64> },
}

impl TimesSpec {
    pub fn from_times(times: &[f64]) -> Self {
        if times.len() >= 2 {
            let dt = times[1] - times[0];
            let uniform = times
                .windows(2)
                .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-12 * dt.abs().max(1.0));
            if uniform {
                return TimesSpec::Uniform {
                    t0: times[0],
                    dt,
                    n_steps: times.len() - 1,
                };
            }
        }
        TimesSpec::Explicit {
            times: times.to_vec(),
        }
    }

    pub fn to_times(&self) -> Vec<f64> {
        match self {
            TimesSpec::Uniform { t0, dt, n_steps } => {
                (0..=*n_steps).map(|k| t0 + k as f64 * dt).collect()
            }
            TimesSpec::Explicit { times } => times.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectorySidecar {
    pub spec_name: String,
    pub seed: u64,
    pub times: TimesSpec,
}

/// Persist a trajectory as `<base>.bin` (states) + `<base>.json` (sidecar).
pub fn save_trajectory(base: &Path, traj: &Trajectory, spec_name: &str) -> Result<()> {
    write_matrix(&base.with_extension("bin"), &traj.state_matrix())?;
    let sidecar = TrajectorySidecar {
        spec_name: spec_name.to_string(),
        seed: traj.seed,
        times: TimesSpec::from_times(&traj.times),
    };
    let f = BufWriter::new(File::create(base.with_extension("json"))?);
    serde_json::to_writer_pretty(f, &sidecar)?;
    Ok(())
}

/// Load a trajectory saved by [`save_trajectory`]; returns the sidecar too.
pub fn load_trajectory(base: &Path) -> Result<(Trajectory, TrajectorySidecar)> {
    let states = read_matrix(&base.with_extension("bin"))?;
    let f = BufReader::new(File::open(base.with_extension("json"))?);
    let sidecar: TrajectorySidecar = serde_json::from_reader(f)?;
    let times = sidecar.times.to_times();
    if times.len() != states.nrows() {
        return Err(Error::BadFormat(format!(
            "{}: sidecar has {} time points but array has {} rows",
            base.display(),
            times.len(),
            states.nrows()
        )));
    }
    let traj = Trajectory {
        times,
        states: (0..states.nrows())
            .map(|i| DVector::from_iterator(states.ncols(), states.row(i).iter().copied()))
            .collect(),
        seed: sidecar.seed,
    };
    Ok((traj, sidecar))
}
