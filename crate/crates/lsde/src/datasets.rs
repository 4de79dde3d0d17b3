//! Synthetic observation pipeline: embed latent trajectories into ambient
//! space through injective frozen maps, add observation noise, optionally
//! rescale the latent realization to the unit box, pair consecutive
//! observations, and persist datasets to disk.

use crate::error::{Error, Result};
use crate::io::{self, TimesSpec};
use crate::rng::Stream;
use crate::sde;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAP_DOMAIN: u64 = 0x3A90;
const SIM_DOMAIN: u64 = 0xDA7A;
const NOISE_DOMAIN: u64 = 0x401E;

/// Hidden width of the frozen random_smooth decoder.
pub const RANDOM_SMOOTH_HIDDEN: usize = 32;
/// Default raster grid side length.
pub const DEFAULT_RASTER_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    RandomSmooth,
    RasterBall,
    Linear,
}

/// Everything needed to reconstruct an [`AmbientMap`] deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapConfig {
    pub kind: MapKind,
    pub latent_dim: usize,
    pub ambient_dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raster_side: Option<usize>,
    /// Row-major override matrix for kind = linear (used by tests and
    /// hand-constructed experiments).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit_matrix: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
enum MapParams {
    Linear {
        a: DMatrix<f64>,
    },
    RandomSmooth {
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        skip: DMatrix<f64>,
    },
    RasterBall {
        side: usize,
        sigma: f64,
    },
}

/// Injective synthetic decoder f: ℝ^d → ℝ^n (n ≥ d), frozen at
/// construction and a pure function of its configuration.
#[derive(Debug, Clone)]
pub struct AmbientMap {
    pub kind: MapKind,
    pub latent_dim: usize,
    pub ambient_dim: usize,
    pub seed: u64,
    params: MapParams,
    /// Smallest Jacobian singular value observed on a 100-point probe grid.
    pub injectivity_margin: f64,
    config: MapConfig,
}

fn operator_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Orthonormalize the columns of a seeded Gaussian matrix and scale them
/// by a log-uniform spectrum in [0.5, 2].
fn random_column_frame(n: usize, d: usize, stream: Stream) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, d, |i, j| stream.gaussian((i * d + j) as u64));
    let q = g.qr().q().columns(0, d).into_owned();
    let spec_stream = stream.derive(1);
    let ln_half = 0.5f64.ln();
    let ln_two = 2.0f64.ln();
    let mut a = q;
    for j in 0..d {
        let s = (ln_half + (ln_two - ln_half) * spec_stream.uniform(j as u64)).exp();
        a.column_mut(j).scale_mut(s);
    }
    a
}

impl AmbientMap {
    /// Build a map of the given kind with kind-specific defaults
    /// (random_smooth hidden width 32, raster side 16).
    pub fn new(kind: MapKind, latent_dim: usize, ambient_dim: usize, seed: u64) -> Result<Self> {
        let config = MapConfig {
            kind,
            latent_dim,
            ambient_dim,
            seed,
            raster_side: match kind {
                MapKind::RasterBall => {
                    let side = (ambient_dim as f64).sqrt().round() as usize;
                    Some(side)
                }
                _ => None,
            },
            explicit_matrix: None,
        };
        Self::from_config(&config)
    }

    /// Linear map with an explicitly supplied full-column-rank matrix.
    pub fn linear_from_matrix(a: DMatrix<f64>) -> Result<Self> {
        let (n, d) = (a.nrows(), a.ncols());
        let config = MapConfig {
            kind: MapKind::Linear,
            latent_dim: d,
            ambient_dim: n,
            seed: 0,
            raster_side: None,
            explicit_matrix: Some(a.transpose().iter().copied().collect()),
        };
        Self::from_config(&config)
    }

    pub fn from_config(config: &MapConfig) -> Result<Self> {
        let (d, n, seed) = (config.latent_dim, config.ambient_dim, config.seed);
        if n < d {
            return Err(Error::InvalidInput(format!(
                "ambient dimension {n} must be at least latent dimension {d}"
            )));
        }
        if d == 0 {
            return Err(Error::InvalidInput("latent dimension must be positive".into()));
        }
        let stream = Stream::new(seed).derive(MAP_DOMAIN);
        let params = match config.kind {
            MapKind::Linear => {
                let a = match &config.explicit_matrix {
                    Some(flat) => {
                        if flat.len() != n * d {
                            return Err(Error::InvalidInput(format!(
                                "explicit matrix has {} entries, expected {}",
                                flat.len(),
                                n * d
                            )));
                        }
                        let a = DMatrix::from_row_slice(n, d, flat);
                        let sv = a.clone().svd(false, false).singular_values;
                        if sv.min() <= 1e-10 * sv.max() {
                            return Err(Error::InvalidInput(
                                "explicit linear map is column-rank deficient".into(),
                            ));
                        }
                        a
                    }
                    None => random_column_frame(n, d, stream.derive(0)),
                };
                MapParams::Linear { a }
            }
            MapKind::RandomSmooth => {
                let h = RANDOM_SMOOTH_HIDDEN;
                let skip = random_column_frame(n, d, stream.derive(0));
                let s1 = stream.derive(1);
                let w1 = DMatrix::from_fn(h, d, |i, j| {
                    s1.gaussian((i * d + j) as u64) / (d as f64).sqrt()
                });
                let b1 = DVector::from_fn(h, |i, _| 0.5 * stream.derive(2).gaussian(i as u64));
                let s3 = stream.derive(3);
                let mut w2 = DMatrix::from_fn(n, h, |i, j| {
                    s3.gaussian((i * h + j) as u64) / (h as f64).sqrt()
                });
                // Shrink the nonlinear branch so its Jacobian never
                // overwhelms the skip connection: with ‖W₂‖‖W₁‖ =
                // 0.5·σ_min(skip), every Jacobian has σ_min ≥
                // 0.5·σ_min(skip) > 0, which also makes f globally
                // injective.
                let sigma_min_skip = skip.clone().svd(false, false).singular_values.min();
                let c = 0.5 * sigma_min_skip / (operator_norm(&w2) * operator_norm(&w1));
                w2.scale_mut(c);
                MapParams::RandomSmooth { w1, b1, w2, skip }
            }
            MapKind::RasterBall => {
                if d != 2 {
                    return Err(Error::InvalidInput(format!(
                        "raster_ball requires latent dimension 2, got {d}"
                    )));
                }
                let side = config.raster_side.unwrap_or(DEFAULT_RASTER_SIDE);
                if side * side != n {
                    return Err(Error::InvalidInput(format!(
                        "raster_ball needs ambient dimension side² = {}, got {n}",
                        side * side
                    )));
                }
                MapParams::RasterBall {
                    side,
                    sigma: side as f64 / 8.0,
                }
            }
        };
        let mut map = AmbientMap {
            kind: config.kind,
            latent_dim: d,
            ambient_dim: n,
            seed,
            params,
            injectivity_margin: 0.0,
            config: config.clone(),
        };
        map.injectivity_margin = map.probe_margin();
        Ok(map)
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    /// For kind = linear, the underlying matrix.
    pub fn linear_matrix(&self) -> Option<&DMatrix<f64>> {
        match &self.params {
            MapParams::Linear { a } => Some(a),
            _ => None,
        }
    }

    pub fn apply(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.latent_dim {
            return Err(Error::InvalidInput(format!(
                "latent point has dimension {}, map expects {}",
                z.len(),
                self.latent_dim
            )));
        }
        Ok(match &self.params {
            MapParams::Linear { a } => a * z,
            MapParams::RandomSmooth { w1, b1, w2, skip } => {
                let mut hid = w1 * z + b1;
                hid.apply(|v| *v = v.tanh());
                w2 * hid + skip * z
            }
            MapParams::RasterBall { side, sigma } => {
                // Pixel centers sit at integer coordinates; the bump
                // center is the latent point scaled by the side length.
                let (cr, cc) = (z[0] * *side as f64, z[1] * *side as f64);
                let inv = 1.0 / (2.0 * sigma * sigma);
                DVector::from_fn(side * side, |k, _| {
                    let (r, c) = ((k / side) as f64, (k % side) as f64);
                    (-((r - cr).powi(2) + (c - cc).powi(2)) * inv).exp()
                })
            }
        })
    }

    /// Smallest finite-difference Jacobian singular value over a
    /// 100-point probe grid (unit box for raster_ball, seeded Gaussian
    /// cloud otherwise).
    fn probe_margin(&self) -> f64 {
        let probes: Vec<DVector<f64>> = match self.kind {
            MapKind::RasterBall => {
                let mut pts = Vec::new();
                for i in 0..10 {
                    for j in 0..10 {
                        pts.push(DVector::from_vec(vec![
                            0.1 + 0.8 * i as f64 / 9.0,
                            0.1 + 0.8 * j as f64 / 9.0,
                        ]));
                    }
                }
                pts
            }
            _ => {
                let s = Stream::new(self.seed).derive(MAP_DOMAIN).derive(0xBE);
                (0..100)
                    .map(|k| {
                        DVector::from_fn(self.latent_dim, |i, _| {
                            s.gaussian((k * self.latent_dim + i) as u64)
                        })
                    })
                    .collect()
            }
        };
        let mut margin = f64::INFINITY;
        for z in &probes {
            let h = 1e-5 * (1.0 + z.norm());
            let mut jac = DMatrix::zeros(self.ambient_dim, self.latent_dim);
            for j in 0..self.latent_dim {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[j] += h;
                zm[j] -= h;
                let col = (self.apply(&zp).unwrap() - self.apply(&zm).unwrap()) / (2.0 * h);
                jac.set_column(j, &col);
            }
            margin = margin.min(jac.svd(false, false).singular_values.min());
        }
        margin
    }
}

/// Observation noise added i.i.d. per ambient element.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Gaussian { variance: f64 },
    StudentT { dof: u32, scale: f64 },
}

impl Default for NoiseKind {
    fn default() -> Self {
        NoiseKind::None
    }
}

impl NoiseKind {
    /// Student-t noise whose variance matches `variance` (requires dof > 2
    /// so the variance is finite): scale² · dof/(dof−2) = variance.
    pub fn student_t_matching(dof: u32, variance: f64) -> Result<NoiseKind> {
        if dof <= 2 {
            return Err(Error::InvalidInput(
                "student_t variance matching needs dof > 2".into(),
            ));
        }
        Ok(NoiseKind::StudentT {
            dof,
            scale: (variance * (dof as f64 - 2.0) / dof as f64).sqrt(),
        })
    }

    /// Pure draw for element `index` of the given stream.
    pub fn sample(&self, stream: Stream, index: u64) -> f64 {
        match *self {
            NoiseKind::None => 0.0,
            NoiseKind::Gaussian { variance } => variance.sqrt() * stream.gaussian(index),
            NoiseKind::StudentT { dof, scale } => {
                let s = stream.derive(index);
                let z = s.gaussian(0);
                let chi2: f64 = (1..=dof as u64).map(|i| s.gaussian(i).powi(2)).sum();
                scale * z / (chi2 / dof as f64).sqrt()
            }
        }
    }
}

/// Per-trajectory min/max rescale record: bounds for every coordinate,
/// plus the coordinates skipped because their range was degenerate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RescaleRecord {
    pub bounds: Vec<[f64; 2]>,
    pub skipped: Vec<usize>,
}

impl RescaleRecord {
    /// Map a rescaled latent point back to raw trajectory coordinates.
    pub fn unrescale(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(z.len(), |i, _| {
            if self.skipped.contains(&i) {
                z[i]
            } else {
                self.bounds[i][0] + z[i] * (self.bounds[i][1] - self.bounds[i][0])
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec_name: String,
    pub map: MapConfig,
    pub times: TimesSpec,
    pub noise: NoiseKind,
    pub rescale: bool,
    /// One record per trajectory when rescale = true.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescale_records: Option<Vec<RescaleRecord>>,
    pub seed: u64,
    pub n_trajectories: usize,
}

/// Consecutive-observation pairs stored column-wise: column i of `x_t`
/// and `x_s` is the i-th pair (x at t, x at t+Δt), with `dts[i]` the gap.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub x_t: DMatrix<f64>,
    pub x_s: DMatrix<f64>,
    pub dts: DVector<f64>,
    pub latent: Option<LatentTruth>,
    pub noise_kind: NoiseKind,
    pub meta: DatasetMeta,
}

/// Ground-truth latent pairs aligned with the observation pairs.
#[derive(Debug, Clone)]
pub struct LatentTruth {
    pub z_t: DMatrix<f64>,
    pub z_s: DMatrix<f64>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.dts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dts.len() == 0
    }

    pub fn ambient_dim(&self) -> usize {
        self.x_t.nrows()
    }

    pub fn pair(&self, i: usize) -> (DVector<f64>, DVector<f64>, f64) {
        (
            self.x_t.column(i).into_owned(),
            self.x_s.column(i).into_owned(),
            self.dts[i],
        )
    }
}

fn rescale_path(states: &mut [DVector<f64>]) -> RescaleRecord {
    let d = states[0].len();
    let mut bounds = vec![[f64::INFINITY, f64::NEG_INFINITY]; d];
    for z in states.iter() {
        for i in 0..d {
            bounds[i][0] = bounds[i][0].min(z[i]);
            bounds[i][1] = bounds[i][1].max(z[i]);
        }
    }
    let mut skipped = Vec::new();
    for i in 0..d {
        let range = bounds[i][1] - bounds[i][0];
        if range < 1e-12 {
            skipped.push(i);
            continue;
        }
        for z in states.iter_mut() {
            z[i] = (z[i] - bounds[i][0]) / range;
        }
    }
    RescaleRecord { bounds, skipped }
}

/// Generate a paired dataset from one simulated trajectory of the named
/// catalog SDE: simulate → optional per-coordinate min-max rescale of the
/// latent path → apply the ambient map → add observation noise per time
/// point → pair consecutive observations.
pub fn generate(
    spec_name: &str,
    map: &AmbientMap,
    times: &TimesSpec,
    noise: NoiseKind,
    rescale: bool,
    seed: u64,
) -> Result<PairedDataset> {
    generate_multi(spec_name, map, 1, times, noise, rescale, seed)
}

/// Multi-trajectory variant: trajectories are generated independently
/// (seeds derived per trajectory) and their pairs concatenated. Pairing
/// never crosses a trajectory boundary.
pub fn generate_multi(
    spec_name: &str,
    map: &AmbientMap,
    n_trajectories: usize,
    times: &TimesSpec,
    noise: NoiseKind,
    rescale: bool,
    seed: u64,
) -> Result<PairedDataset> {
    let spec = sde::catalog(spec_name)?;
    if map.latent_dim != spec.dim {
        return Err(Error::InvalidInput(format!(
            "map latent dimension {} does not match SDE dimension {}",
            map.latent_dim, spec.dim
        )));
    }
    if n_trajectories == 0 {
        return Err(Error::InvalidInput("need at least one trajectory".into()));
    }
    let time_points = times.to_times();
    if time_points.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two time points to form a pair".into(),
        ));
    }
    let z0 = sde::default_initial_state(spec_name)?;
    let master = Stream::new(seed);
    let pairs_per_traj = time_points.len() - 1;
    let n_pairs = n_trajectories * pairs_per_traj;
    let (n, d) = (map.ambient_dim, map.latent_dim);

    let mut x_t = DMatrix::zeros(n, n_pairs);
    let mut x_s = DMatrix::zeros(n, n_pairs);
    let mut dts = DVector::zeros(n_pairs);
    let mut z_t = DMatrix::zeros(d, n_pairs);
    let mut z_s = DMatrix::zeros(d, n_pairs);
    let mut records = Vec::new();

    for traj in 0..n_trajectories {
        let sim_seed = master.derive(SIM_DOMAIN).bits(traj as u64);
        let noise_stream = master.derive(NOISE_DOMAIN).derive(traj as u64);
        let trajectory = sde::simulate(&spec, &z0, &time_points, sim_seed)?;
        let mut states = trajectory.states.clone();
        if rescale {
            records.push(rescale_path(&mut states));
        }
        // Observation noise is drawn once per time point, so shared
        // endpoints of consecutive pairs receive identical noise.
        let observed: Vec<DVector<f64>> = states
            .iter()
            .enumerate()
            .map(|(k, z)| {
                let mut x = map.apply(z)?;
                for e in 0..n {
                    x[e] += noise.sample(noise_stream, (k * n + e) as u64);
                }
                Ok(x)
            })
            .collect::<Result<_>>()?;
        for k in 0..pairs_per_traj {
            let col = traj * pairs_per_traj + k;
            x_t.set_column(col, &observed[k]);
            x_s.set_column(col, &observed[k + 1]);
            dts[col] = time_points[k + 1] - time_points[k];
            z_t.set_column(col, &states[k]);
            z_s.set_column(col, &states[k + 1]);
        }
    }

    Ok(PairedDataset {
        x_t,
        x_s,
        dts,
        latent: Some(LatentTruth { z_t, z_s }),
        noise_kind: noise,
        meta: DatasetMeta {
            spec_name: spec_name.to_string(),
            map: map.config().clone(),
            times: times.clone(),
            noise,
            rescale,
            rescale_records: if rescale { Some(records) } else { None },
            seed,
            n_trajectories,
        },
    })
}

/// Write a dataset directory: `meta.json`, `pairs.bin` (rows of
/// [x_t | x_s | dt]), and `latent.bin` (rows of [z_t | z_s]) if present.
pub fn save_dataset(dir: &Path, ds: &PairedDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&ds.meta)?,
    )?;
    let (n, n_pairs) = (ds.ambient_dim(), ds.len());
    let mut rows = DMatrix::zeros(n_pairs, 2 * n + 1);
    for i in 0..n_pairs {
        for e in 0..n {
            rows[(i, e)] = ds.x_t[(e, i)];
            rows[(i, n + e)] = ds.x_s[(e, i)];
        }
        rows[(i, 2 * n)] = ds.dts[i];
    }
    io::write_matrix(&dir.join("pairs.bin"), &rows)?;
    if let Some(latent) = &ds.latent {
        let d = latent.z_t.nrows();
        let mut lrows = DMatrix::zeros(n_pairs, 2 * d);
        for i in 0..n_pairs {
            for e in 0..d {
                lrows[(i, e)] = latent.z_t[(e, i)];
                lrows[(i, d + e)] = latent.z_s[(e, i)];
            }
        }
        io::write_matrix(&dir.join("latent.bin"), &lrows)?;
    }
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<PairedDataset> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let rows = io::read_matrix(&dir.join("pairs.bin"))?;
    let n = meta.map.ambient_dim;
    if rows.ncols() != 2 * n + 1 {
        return Err(Error::BadFormat(format!(
            "pairs.bin has {} columns, expected {}",
            rows.ncols(),
            2 * n + 1
        )));
    }
    let n_pairs = rows.nrows();
    let mut x_t = DMatrix::zeros(n, n_pairs);
    let mut x_s = DMatrix::zeros(n, n_pairs);
    let mut dts = DVector::zeros(n_pairs);
    for i in 0..n_pairs {
        for e in 0..n {
            x_t[(e, i)] = rows[(i, e)];
            x_s[(e, i)] = rows[(i, n + e)];
        }
        dts[i] = rows[(i, 2 * n)];
        if dts[i] <= 0.0 {
            return Err(Error::BadFormat(format!("pair {i} has non-positive dt")));
        }
    }
    let latent_path = dir.join("latent.bin");
    let latent = if latent_path.exists() {
        let lrows = io::read_matrix(&latent_path)?;
        if lrows.nrows() != n_pairs || lrows.ncols() % 2 != 0 {
            return Err(Error::BadFormat(
                "latent.bin shape inconsistent with pairs.bin".into(),
            ));
        }
        let d = lrows.ncols() / 2;
        let mut z_t = DMatrix::zeros(d, n_pairs);
        let mut z_s = DMatrix::zeros(d, n_pairs);
        for i in 0..n_pairs {
            for e in 0..d {
                z_t[(e, i)] = lrows[(i, e)];
                z_s[(e, i)] = lrows[(i, d + e)];
            }
        }
        Some(LatentTruth { z_t, z_s })
    } else {
        None
    };
    Ok(PairedDataset {
        x_t,
        x_s,
        dts,
        latent,
        noise_kind: meta.noise,
        meta,
    })
}

/// Convenience wrapper used by drift-evaluation code: apply the map to
/// every column of a latent matrix.
pub fn apply_map_columns(map: &AmbientMap, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(map.ambient_dim, z.ncols());
    for j in 0..z.ncols() {
        out.set_column(j, &map.apply(&z.column(j).into_owned())?);
    }
    Ok(out)
}
