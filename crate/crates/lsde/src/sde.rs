//! Itô SDE coefficient specs, the catalog of benchmark equations, and the
//! Euler–Maruyama simulator.
//!
//! An SDE dZ_t = μ(Z_t,t)dt + σ(Z_t,t)dW_t is represented by opaque
//! coefficient callables plus its dimension. One Euler–Maruyama step is
//! z + μ(z,t)·dt + σ(z,t)·(√dt·ξ) with ξ ~ N(0, I); the simulator chains
//! steps over an arbitrary strictly-increasing time grid, drawing Wiener
//! increments from a counter-based stream keyed on (seed, step, coordinate)
//! so paths regenerate bit-for-bit.

use crate::error::{Error, Result};
use crate::rng::Stream;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Domain tag separating Wiener increments from other uses of a seed.
const WIENER_DOMAIN: u64 = 0x5DE0;

type DriftFn = dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync;
type DiffusionFn = dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync;

/// Drift and diffusion coefficients of a d-dimensional Itô SDE.
#[derive(Clone)]
pub struct SdeSpec {
    pub name: String,
    pub dim: usize,
    /// Whether the coefficients genuinely depend on t.
    pub time_dependent: bool,
    /// Whether the diffusion satisfies the reducibility conditions
    /// (symmetric positive definite + the curl condition) on its natural
    /// domain; set for catalog entries, checkable via the lamperti module.
    pub reducible: bool,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
}

impl std::fmt::Debug for SdeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdeSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("time_dependent", &self.time_dependent)
            .field("reducible", &self.reducible)
            .finish()
    }
}

impl SdeSpec {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        time_dependent: bool,
        reducible: bool,
        drift: impl Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
        diffusion: impl Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        SdeSpec {
            name: name.into(),
            dim,
            time_dependent,
            reducible,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
        }
    }

    /// Spec with identity diffusion.
    pub fn isotropic(
        name: impl Into<String>,
        dim: usize,
        drift: impl Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self::new(name, dim, false, true, drift, move |_, _| {
            DMatrix::identity(dim, dim)
        })
    }

    pub fn drift(&self, z: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.drift)(z, t)
    }

    pub fn diffusion(&self, z: &DVector<f64>, t: f64) -> DMatrix<f64> {
        (self.diffusion)(z, t)
    }

    fn check_dim(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "state has dimension {}, spec '{}' expects {}",
                z.len(),
                self.name,
                self.dim
            )));
        }
        Ok(())
    }
}

/// A sampled path: states aligned with a strictly increasing time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    /// States as an (N+1)×d matrix, rows in time order.
    pub fn state_matrix(&self) -> DMatrix<f64> {
        let n = self.states.len();
        let d = self.dim();
        DMatrix::from_fn(n, d, |i, j| self.states[i][j])
    }
}

/// One Euler–Maruyama step: z + μ(z,t)·dt + σ(z,t)·(√dt·noise).
pub fn euler_maruyama_step(
    spec: &SdeSpec,
    z: &DVector<f64>,
    t: f64,
    dt: f64,
    noise: &DVector<f64>,
) -> Result<DVector<f64>> {
    spec.check_dim(z)?;
    spec.check_dim(noise)?;
    if dt <= 0.0 {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let mu = spec.drift(z, t);
    let sigma = spec.diffusion(z, t);
    Ok(z + mu * dt + sigma * (noise * dt.sqrt()))
}

/// Simulate a path over `times` (strictly increasing; gaps may vary).
///
/// Wiener increments come from a stream keyed on (seed, step index,
/// coordinate), so the result is a pure function of its arguments.
pub fn simulate(spec: &SdeSpec, z0: &DVector<f64>, times: &[f64], seed: u64) -> Result<Trajectory> {
    spec.check_dim(z0)?;
    if times.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two time points".to_string(),
        ));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(
            "times must be strictly increasing".to_string(),
        ));
    }
    let wiener = Stream::new(seed).derive(WIENER_DOMAIN);
    let d = spec.dim;
    let mut states = Vec::with_capacity(times.len());
    states.push(z0.clone());
    let mut z = z0.clone();
    for (k, w) in times.windows(2).enumerate() {
        let dt = w[1] - w[0];
        let noise = DVector::from_fn(d, |c, _| wiener.gaussian((k * d + c) as u64));
        z = euler_maruyama_step(spec, &z, w[0], dt, &noise)?;
        states.push(z.clone());
    }
    Ok(Trajectory {
        times: times.to_vec(),
        states,
        seed,
    })
}

/// Uniform time grid [0, dt, …, n·dt].
pub fn uniform_times(n_steps: usize, dt: f64) -> Vec<f64> {
    (0..=n_steps).map(|k| k as f64 * dt).collect()
}

/// Names of all catalog entries.
pub const CATALOG_NAMES: [&str; 13] = [
    "constant2d",
    "ou2d",
    "circle2d",
    "constant4d",
    "ou4d",
    "circle4d",
    "ou1d",
    "double_well1d",
    "gbm1d",
    "ou3d",
    "cauchy3d",
    "anisotropic3d",
    "zero",
];

/// Look up a benchmark SDE by name.
pub fn catalog(name: &str) -> Result<SdeSpec> {
    let spec = match name {
        "constant2d" => SdeSpec::isotropic("constant2d", 2, |_, _| {
            DVector::from_vec(vec![-0.25, 0.25])
        }),
        "ou2d" => SdeSpec::isotropic("ou2d", 2, |z, _| z * -4.0),
        "circle2d" => SdeSpec::isotropic("circle2d", 2, |z, _| {
            DVector::from_vec(vec![-z[0] - 3.0 * z[1], z[1] - 3.0 * z[0]])
        }),
        "constant4d" => SdeSpec::isotropic("constant4d", 4, |_, _| DVector::zeros(4)),
        "ou4d" => SdeSpec::isotropic("ou4d", 4, |z, _| {
            DVector::from_vec(vec![-z[0] - 1.0, -z[1] - 1.0, -z[2] + 1.0, -z[3] + 1.0])
        }),
        "circle4d" => SdeSpec::isotropic("circle4d", 4, |z, _| {
            DVector::from_vec(vec![
                -z[0] - 2.0 * z[1],
                -z[1] + 2.0 * z[0],
                -z[2] - 2.0 * z[3],
                -z[3] + 2.0 * z[2],
            ])
        }),
        "ou1d" => SdeSpec::isotropic("ou1d", 1, |z, _| z * -2.0),
        "double_well1d" => SdeSpec::isotropic("double_well1d", 1, |z, _| {
            DVector::from_vec(vec![2.0 * z[0] * (1.0 - z[0] * z[0])])
        }),
        "gbm1d" => SdeSpec::new(
            "gbm1d",
            1,
            false,
            true, // positive scalar diffusion on x > 0
            |z, _| z * 0.5,
            |z, _| DMatrix::from_element(1, 1, z[0]),
        ),
        "ou3d" => SdeSpec::isotropic("ou3d", 3, |z, _| {
            DVector::from_vec(vec![-z[0], -2.0 * z[1], -3.0 * z[2]])
        }),
        "cauchy3d" => SdeSpec::isotropic("cauchy3d", 3, |z, _| {
            DVector::from_vec(vec![
                -z[0] / (1.0 + z[0] * z[0]),
                -2.0 * z[1] / (1.0 + z[1] * z[1]),
                -3.0 * z[2] / (1.0 + z[2] * z[2]),
            ])
        }),
        "anisotropic3d" => SdeSpec::new(
            "anisotropic3d",
            3,
            false,
            // The printed 2×2 block is not symmetric, so the reducibility
            // conditions fail for the full matrix (its third coordinate
            // alone is a reducible 1-D sub-SDE).
            false,
            |z, _| DVector::from_vec(vec![-z[0], -2.0 * z[1], 0.6 - 0.3 * z[2]]),
            |z, _| {
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[1.0, 2.0, 0.0, 2.5, 3.0, 0.0, 0.0, 0.0, z[2].max(0.0).sqrt()],
                )
            },
        ),
        "zero" => SdeSpec::new(
            "zero",
            2,
            false,
            false, // zero diffusion is not positive definite
            |_, _| DVector::zeros(2),
            |_, _| DMatrix::zeros(2, 2),
        ),
        other => {
            return Err(Error::NotFound(format!(
                "unknown SDE '{other}'; catalog: {}",
                CATALOG_NAMES.join(", ")
            )))
        }
    };
    Ok(spec)
}

/// Sensible starting state for a catalog entry: the origin for `zero`,
/// otherwise the all-ones vector (which keeps gbm1d and anisotropic3d in
/// their positive domains).
pub fn default_initial_state(name: &str) -> Result<DVector<f64>> {
    let spec = catalog(name)?;
    Ok(match name {
        "zero" => DVector::zeros(spec.dim),
        _ => DVector::from_element(spec.dim, 1.0),
    })
}
