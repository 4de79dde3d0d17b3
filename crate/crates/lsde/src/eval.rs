//! Evaluation up to isometry: Procrustes alignment between estimated and
//! true latent point sets, drift error measured through that alignment,
//! the Cramér–Rao reference level for drift estimation from discrete
//! observations, and a degenerate-Gaussian ambient likelihood for linear
//! models used by dimension search.

use crate::error::{Error, Result};
use crate::sde;
use crate::vae::VaeModel;
use crate::datasets::PairedDataset;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Singular values below this fraction of the largest are treated as
/// zero when forming pseudo-inverses and pseudo-determinants.
pub const RANK_TOL: f64 = 1e-10;
/// Residual mass outside the support (relative) that triggers the −∞
/// sentinel in [`linear_loglik`].
pub const SUPPORT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Rotations and reflections plus an offset.
    #[default]
    Orthogonal,
    /// Arbitrary invertible linear map plus an offset.
    Affine,
}

/// Result of aligning estimated latent points onto true ones:
/// truth ≈ Q·est + b.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub q: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Mean squared alignment error, (1/N)‖QA + b1ᵀ − B‖²_F.
    pub residual: f64,
    pub mode: AlignMode,
}

fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.ncols() as f64;
    DVector::from_fn(m.nrows(), |i, _| m.row(i).sum() / n)
}

fn centered(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            out[(i, j)] -= mean[i];
        }
    }
    out
}

/// Best map from the estimated cloud `est` onto `truth` (both d×N,
/// columns are points) in the requested class. The orthogonal solution
/// is Q = UVᵀ from the SVD of the centered cross-covariance — the
/// global optimum over all orthogonal matrices, reflections included.
pub fn procrustes(est: &DMatrix<f64>, truth: &DMatrix<f64>, mode: AlignMode) -> Result<Alignment> {
    let d = est.nrows();
    let n = est.ncols();
    if truth.nrows() != d || truth.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "point sets disagree: {}×{} vs {}×{}",
            d,
            n,
            truth.nrows(),
            truth.ncols()
        )));
    }
    if n < d + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least d+1 = {} points for alignment, got {n}",
            d + 1
        )));
    }
    let mean_a = column_mean(est);
    let mean_b = column_mean(truth);
    let at = centered(est, &mean_a);
    let bt = centered(truth, &mean_b);

    let q = match mode {
        AlignMode::Orthogonal => {
            let m = &bt * at.transpose();
            let svd = m.svd(true, true);
            let u = svd.u.as_ref().expect("svd requested u");
            let vt = svd.v_t.as_ref().expect("svd requested v_t");
            u * vt
        }
        AlignMode::Affine => {
            let gram = &at * at.transpose();
            let cross = &bt * at.transpose();
            match gram.clone().try_inverse() {
                Some(inv) => {
                    // Guard against near-singular clouds that invert
                    // only numerically.
                    let sv = gram.svd(false, false).singular_values;
                    if sv[sv.len() - 1] <= RANK_TOL * sv[0] {
                        return Err(Error::DegenerateData(
                            "estimated latent cloud is rank deficient; affine alignment is not identifiable".into(),
                        ));
                    }
                    cross * inv
                }
                None => {
                    return Err(Error::DegenerateData(
                        "estimated latent cloud is rank deficient; affine alignment is not identifiable".into(),
                    ))
                }
            }
        }
    };
    let b = &mean_b - &q * &mean_a;
    let resid_mat = &q * &at - &bt;
    let residual = resid_mat.norm_squared() / n as f64;
    Ok(Alignment {
        q,
        b,
        residual,
        mode,
    })
}

/// Mean squared latent error after the best alignment in `mode`.
pub fn latent_mse(est: &DMatrix<f64>, truth: &DMatrix<f64>, mode: AlignMode) -> Result<f64> {
    Ok(procrustes(est, truth, mode)?.residual)
}

/// Mean squared drift error over true latent evaluation points: the
/// estimated field is pulled back through the alignment,
/// v(z) = Q·μ̂(Q⁻¹(z − b)), and compared with the true drift at z.
pub fn drift_mse<F, G>(
    estimated_drift: F,
    true_drift: G,
    align: &Alignment,
    points: &DMatrix<f64>,
) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let d = align.q.nrows();
    if points.nrows() != d {
        return Err(Error::InvalidInput(format!(
            "evaluation points have dimension {}, alignment is {d}-dimensional",
            points.nrows()
        )));
    }
    let q_inv = match align.mode {
        AlignMode::Orthogonal => align.q.transpose(),
        AlignMode::Affine => align
            .q
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::DegenerateData("affine alignment is singular".into()))?,
    };
    let n = points.ncols();
    let mut acc = 0.0;
    for j in 0..n {
        let z = points.column(j).into_owned();
        let pulled = &q_inv * (&z - &align.b);
        let v = &align.q * estimated_drift(&pulled);
        acc += (v - true_drift(&z)).norm_squared();
    }
    Ok(acc / n as f64)
}

/// Cramér–Rao reference level for pointwise drift estimation from N
/// pairs at spacing Δt with unit diffusion: d/(Δt·N).
pub fn crlb(latent_dim: usize, dt: f64, n_pairs: usize) -> Result<f64> {
    if latent_dim == 0 || n_pairs == 0 || !(dt > 0.0) {
        return Err(Error::InvalidInput(
            "crlb needs positive dimension, dt, and pair count".into(),
        ));
    }
    Ok(latent_dim as f64 / (dt * n_pairs as f64))
}

/// Total log-likelihood of the observed ambient increments under a
/// linear-map model: x_s − x_t ~ N(A·μ(A⁺x_t)·Δt, A·σσᵀ·Aᵀ·Δt). The
/// covariance is degenerate when A has fewer columns than rows, so the
/// density uses the pseudo-determinant and pseudo-inverse on its
/// support; increments with mass outside the support return −∞.
pub fn linear_loglik<F>(
    a: &DMatrix<f64>,
    drift: F,
    sigma: &DMatrix<f64>,
    x_t: &DMatrix<f64>,
    x_s: &DMatrix<f64>,
    dts: &DVector<f64>,
) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let (n, j) = (a.nrows(), a.ncols());
    if sigma.nrows() != j || sigma.ncols() != j {
        return Err(Error::InvalidInput(format!(
            "σ is {}×{}, expected {j}×{j}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let n_pairs = x_t.ncols();
    if x_s.ncols() != n_pairs || dts.len() != n_pairs || x_t.nrows() != n || x_s.nrows() != n {
        return Err(Error::InvalidInput("pair matrices disagree with map".into()));
    }

    // Pseudo-inverse of the map for latent reconstruction.
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let sv = &svd.singular_values;
    let sv_max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if sv_max == 0.0 {
        return Err(Error::DegenerateData("map is identically zero".into()));
    }
    let mut sv_inv = DMatrix::zeros(vt.nrows(), u.ncols());
    for i in 0..sv.len().min(sv_inv.nrows()) {
        if sv[i] > RANK_TOL * sv_max {
            sv_inv[(i, i)] = 1.0 / sv[i];
        }
    }
    let a_pinv = vt.transpose() * sv_inv * u.transpose();

    // Eigendecomposition of the base covariance A σσᵀ Aᵀ (Δt factors
    // are reinstated per pair).
    let base_cov = a * sigma * sigma.transpose() * a.transpose();
    let eig = nalgebra::SymmetricEigen::new(base_cov);
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if lam_max <= 0.0 {
        return Err(Error::DegenerateData(
            "increment covariance is identically zero".into(),
        ));
    }
    let keep: Vec<bool> = (0..n)
        .map(|i| eig.eigenvalues[i] > RANK_TOL * lam_max)
        .collect();
    let r = keep.iter().filter(|&&k| k).count();
    let log_pdet_base: f64 = (0..n)
        .filter(|&i| keep[i])
        .map(|i| eig.eigenvalues[i].ln())
        .sum();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();

    let mut total = 0.0;
    for p in 0..n_pairs {
        let dt = dts[p];
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("pair {p} has dt ≤ 0")));
        }
        let xt = x_t.column(p).into_owned();
        let z_hat = &a_pinv * &xt;
        let mean = a * drift(&z_hat) * dt;
        let v = x_s.column(p).into_owned() - xt - mean;

        // Coordinates of the residual in the (complete) eigenbasis; the
        // discarded directions measure mass off the support directly,
        // avoiding the cancellation a norm subtraction would cause.
        let mut quad = 0.0;
        let mut outside_sq = 0.0;
        for i in 0..n {
            let c = eig.eigenvectors.column(i).dot(&v);
            if keep[i] {
                quad += c * c / (eig.eigenvalues[i] * dt);
            } else {
                outside_sq += c * c;
            }
        }
        if outside_sq.sqrt() > SUPPORT_TOL * v.norm().max(1.0) {
            return Ok(f64::NEG_INFINITY);
        }
        total += -0.5 * r as f64 * ln2pi
            - 0.5 * (log_pdet_base + r as f64 * dt.ln())
            - 0.5 * quad;
    }
    Ok(total)
}

/// Learned diffusion diagonal sorted by magnitude, with the count of
/// entries within a factor 10 of the leading one as the suggested
/// latent dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionReport {
    pub sorted_magnitudes: Vec<f64>,
    pub suggested_dim: usize,
}

pub fn diffusion_diag_report(diag: &DVector<f64>) -> DiffusionReport {
    let mut mags: Vec<f64> = diag.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let leading = mags.first().copied().unwrap_or(0.0);
    let suggested_dim = if leading > 0.0 {
        mags.iter().filter(|&&m| m >= 0.1 * leading).count()
    } else {
        0
    };
    DiffusionReport {
        sorted_magnitudes: mags,
        suggested_dim,
    }
}

/// Headline metrics for one trained model on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub l_latent: f64,
    pub l_mu: f64,
    pub reconstruction_mse: f64,
    pub crlb: f64,
    pub n_pairs: usize,
    pub latent_dim: usize,
    pub dt: f64,
}

/// Align the encoder against the stored latent truth and report the
/// isometry-invariant metrics. The dataset must carry latent truth and
/// the model's latent dimension must match it.
pub fn evaluate_model(
    model: &VaeModel,
    ds: &PairedDataset,
    mode: AlignMode,
) -> Result<(MetricsReport, Alignment)> {
    let latent = ds.latent.as_ref().ok_or_else(|| {
        Error::InvalidInput("dataset carries no latent truth; cannot evaluate".into())
    })?;
    let d = model.config.latent_dim;
    if latent.z_t.nrows() != d {
        return Err(Error::InvalidInput(format!(
            "model latent dimension {d} does not match dataset truth {}",
            latent.z_t.nrows()
        )));
    }
    let n_pairs = ds.len();
    let (est_t, _) = model.encode_batch(&ds.x_t)?;
    let (est_s, _) = model.encode_batch(&ds.x_s)?;
    let align = procrustes(&est_t, &latent.z_t, mode)?;

    let spec = sde::catalog(&ds.meta.spec_name)?;
    let l_mu = drift_mse(
        |z| model.drift.forward(z).expect("drift width matches"),
        |z| spec.drift(z, 0.0),
        &align,
        &latent.z_t,
    )?;

    let rec_t = model.decode_batch(&est_t)?;
    let rec_s = model.decode_batch(&est_s)?;
    let reconstruction_mse = ((&rec_t - &ds.x_t).norm_squared()
        + (&rec_s - &ds.x_s).norm_squared())
        / (2.0 * n_pairs as f64);

    let dt = ds.dts.mean();
    let report = MetricsReport {
        l_latent: align.residual,
        l_mu,
        reconstruction_mse,
        crlb: crlb(d, dt, n_pairs)?,
        n_pairs,
        latent_dim: d,
        dt,
    };
    Ok((report, align))
}
