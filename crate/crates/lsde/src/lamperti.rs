//! Reducibility checking and the multivariate Lamperti transform: for an
//! SDE dY = μ dt + σ(Y,t) dW whose diffusion satisfies the commutation
//! (curl) condition, builds h(y,t) with Jacobian σ⁻¹, its numerical
//! inverse g, and the drift μ̃ of the transformed unit-diffusion process
//! dZ = μ̃(Z,t) dt + dW.
//!
//! All coefficient derivatives are numerical central differences; no
//! symbolic differentiation. The Laplacian of g is evaluated through
//! first derivatives of σ only (see [`LampertiMap::transformed_drift`]),
//! which keeps its error at the level of the σ finite differences
//! instead of the much noisier second differences of g itself.

use crate::error::{Error, Result};
use crate::sde::SdeSpec;
use nalgebra::{DMatrix, DVector};

/// Default number of Gauss–Legendre nodes for the h integral.
pub const DEFAULT_QUADRATURE_NODES: usize = 32;
/// Residual-norm tolerance for the commutation condition.
pub const CURL_TOL: f64 = 1e-8;
/// Maximum damped-Newton iterations when inverting h.
pub const MAX_NEWTON_ITERATIONS: usize = 50;

/// Gauss–Legendre nodes and weights on [−1, 1], computed by Newton
/// iteration on the three-term Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-based initial guess, refined by Newton.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n and P_{n−1} via the recurrence.
            let (mut p_prev, mut p) = (1.0, x);
            if n == 1 {
                p = x;
                p_prev = 1.0;
            }
            for k in 1..n {
                let p_next = ((2 * k + 1) as f64 * x * p - k as f64 * p_prev) / (k + 1) as f64;
                p_prev = p;
                p = p_next;
            }
            dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

/// Per-probe diagnostics for the reducibility check.
#[derive(Debug, Clone)]
pub struct ProbeResidual {
    pub point: Vec<f64>,
    pub t: f64,
    /// max over j<k of ‖∂σ/∂y_k·σ⁻¹e_j − ∂σ/∂y_j·σ⁻¹e_k‖
    /// (infinite when σ is singular at the probe).
    pub curl_residual: f64,
    pub symmetric: bool,
    pub positive_definite: bool,
    pub singular: bool,
}

impl ProbeResidual {
    pub fn passes(&self, curl_tol: f64) -> bool {
        self.symmetric && self.positive_definite && !self.singular && self.curl_residual <= curl_tol
    }
}

#[derive(Debug, Clone)]
pub struct ReducibilityReport {
    pub reducible: bool,
    pub curl_tol: f64,
    pub max_residual: f64,
    pub probes: Vec<ProbeResidual>,
}

fn fd_step(y: &DVector<f64>) -> f64 {
    1e-5 * (1.0 + y.norm())
}

/// ∂σ/∂y_m for every m, by central differences.
fn sigma_derivatives(spec: &SdeSpec, y: &DVector<f64>, t: f64) -> Result<Vec<DMatrix<f64>>> {
    let h = fd_step(y);
    let mut out = Vec::with_capacity(y.len());
    for m in 0..y.len() {
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[m] += h;
        ym[m] -= h;
        out.push((spec.diffusion(&yp, t) - spec.diffusion(&ym, t)) / (2.0 * h));
    }
    Ok(out)
}

/// Evaluate the reducibility conditions at each probe: σ symmetric and
/// positive definite, and the commutation residual within tolerance.
/// A singular σ yields a failing probe entry, not an error.
pub fn check_reducible(spec: &SdeSpec, probes: &[(DVector<f64>, f64)]) -> Result<ReducibilityReport> {
    let d = spec.dim;
    let mut report = ReducibilityReport {
        reducible: true,
        curl_tol: CURL_TOL,
        max_residual: 0.0,
        probes: Vec::with_capacity(probes.len()),
    };
    for (y, t) in probes {
        let sigma = spec.diffusion(y, *t);
        let sym_err = (&sigma - sigma.transpose()).norm();
        let symmetric = sym_err <= 1e-10 * (1.0 + sigma.norm());
        let sv = sigma.clone().svd(false, false).singular_values;
        let singular = sv.min() <= 1e-12 * sv.max().max(1.0);
        let positive_definite = if symmetric && !singular {
            let eig = sigma.clone().symmetric_eigen().eigenvalues;
            eig.min() > 1e-12 * eig.max().abs().max(1.0)
        } else {
            false
        };
        let curl_residual = if singular {
            f64::INFINITY
        } else {
            let lu = sigma.clone().lu();
            let derivs = sigma_derivatives(spec, y, *t)?;
            let mut max_r: f64 = 0.0;
            for j in 0..d {
                let inv_ej = lu
                    .solve(&DVector::from_fn(d, |i, _| if i == j { 1.0 } else { 0.0 }))
                    .ok_or_else(|| Error::DegenerateData("σ LU solve failed".into()))?;
                for k in j + 1..d {
                    let inv_ek = lu
                        .solve(&DVector::from_fn(d, |i, _| if i == k { 1.0 } else { 0.0 }))
                        .ok_or_else(|| Error::DegenerateData("σ LU solve failed".into()))?;
                    let r = (&derivs[k] * &inv_ej - &derivs[j] * &inv_ek).norm();
                    max_r = max_r.max(r);
                }
            }
            max_r
        };
        let probe = ProbeResidual {
            point: y.iter().copied().collect(),
            t: *t,
            curl_residual,
            symmetric,
            positive_definite,
            singular,
        };
        if !probe.passes(CURL_TOL) {
            report.reducible = false;
        }
        if curl_residual.is_finite() {
            report.max_residual = report.max_residual.max(curl_residual);
        } else {
            report.max_residual = f64::INFINITY;
        }
        report.probes.push(probe);
    }
    Ok(report)
}

/// Default probe grid around a base point: the base itself plus
/// ±0.3·(1+|b_i|) along each axis, crossed with a few times when the
/// diffusion is time-dependent.
pub fn default_probes(spec: &SdeSpec, base: &DVector<f64>) -> Vec<(DVector<f64>, f64)> {
    let mut points = vec![base.clone()];
    for i in 0..spec.dim {
        let step = 0.3 * (1.0 + base[i].abs());
        let mut p = base.clone();
        p[i] += step;
        points.push(p);
        let mut m = base.clone();
        m[i] -= step;
        points.push(m);
    }
    let times: &[f64] = if spec.time_dependent {
        &[0.0, 0.5, 1.0]
    } else {
        &[0.0]
    };
    let mut probes = Vec::new();
    for t in times {
        for p in &points {
            probes.push((p.clone(), *t));
        }
    }
    probes
}

/// The Lamperti transform of a reducible SDE. Immutable after
/// construction; all evaluations are pure and safe to share across
/// threads.
#[derive(Debug, Clone)]
pub struct LampertiMap {
    pub source: SdeSpec,
    pub base_point: DVector<f64>,
    pub quadrature_nodes: usize,
    pub inversion_tol: f64,
    pub report: ReducibilityReport,
    /// Quadrature rule mapped to [0, 1].
    taus: Vec<f64>,
    tau_weights: Vec<f64>,
}

/// Build the transform. The reducibility check runs on the default probe
/// grid around `base_point`; a failing check is an invalid-input error.
/// For diffusions that degenerate at the origin (e.g. geometric Brownian
/// motion, σ(0) = 0) choose a base point inside the positive-definite
/// region.
pub fn build_map(
    spec: &SdeSpec,
    base_point: &DVector<f64>,
    quadrature_nodes: usize,
    inversion_tol: f64,
) -> Result<LampertiMap> {
    if base_point.len() != spec.dim {
        return Err(Error::InvalidInput(format!(
            "base point has dimension {}, SDE has {}",
            base_point.len(),
            spec.dim
        )));
    }
    if !(inversion_tol > 0.0) {
        return Err(Error::InvalidInput("inversion_tol must be positive".into()));
    }
    let report = check_reducible(spec, &default_probes(spec, base_point))?;
    if !report.reducible {
        return Err(Error::InvalidInput(format!(
            "SDE '{}' is not reducible near the base point (max curl residual {:.3e}); \
             see the reducibility report for per-probe diagnostics",
            spec.name, report.max_residual
        )));
    }
    let (raw_nodes, raw_weights) = gauss_legendre(quadrature_nodes);
    let taus = raw_nodes.iter().map(|x| 0.5 * (x + 1.0)).collect();
    let tau_weights = raw_weights.iter().map(|w| 0.5 * w).collect();
    Ok(LampertiMap {
        source: spec.clone(),
        base_point: base_point.clone(),
        quadrature_nodes,
        inversion_tol,
        report,
        taus,
        tau_weights,
    })
}

impl LampertiMap {
    /// h(y,t) = ∫₀¹ σ(base + τ(y−base), t)⁻¹ (y−base) dτ by
    /// Gauss–Legendre quadrature.
    pub fn h(&self, y: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let delta = y - &self.base_point;
        let mut acc = DVector::zeros(y.len());
        for (tau, w) in self.taus.iter().zip(&self.tau_weights) {
            let point = &self.base_point + &delta * *tau;
            let sigma = self.source.diffusion(&point, t);
            let solved = sigma.lu().solve(&delta).ok_or_else(|| {
                Error::DegenerateData(format!(
                    "σ singular along the integration segment of h at τ = {tau:.4}"
                ))
            })?;
            acc += solved * *w;
        }
        Ok(acc)
    }

    /// Numerical inverse of h: damped Newton with Jacobian σ⁻¹, i.e.
    /// steps −σ(y,t)·(h(y,t) − z), halving the damping on overshoot.
    pub fn g(&self, z: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let mut y = self.base_point.clone();
        let mut residual = self.h(&y, t)? - z;
        let mut res_norm = residual.norm();
        for iteration in 0..MAX_NEWTON_ITERATIONS {
            if res_norm <= self.inversion_tol {
                return Ok(y);
            }
            let sigma = self.source.diffusion(&y, t);
            let det_here = sigma.determinant();
            let step = -(&sigma * &residual);
            let mut damping = 1.0;
            let mut accepted = false;
            while damping > 1e-8 {
                let candidate = &y + &step * damping;
                // Keep iterates on the connected component where σ stays
                // invertible: if det σ vanishes or flips sign along the
                // way, the candidate has crossed a degeneracy of the
                // diffusion and the quadrature for h is meaningless
                // there (it may still return a finite, spuriously small
                // residual — e.g. stepping across x = 0 for gbm1d).
                let cand_det = self.source.diffusion(&candidate, t).determinant();
                if cand_det.is_finite() && cand_det * det_here > 0.0 {
                    if let Ok(h_val) = self.h(&candidate, t) {
                        let cand_res = h_val - z;
                        let cand_norm = cand_res.norm();
                        if cand_norm.is_finite() && cand_norm < res_norm {
                            y = candidate;
                            residual = cand_res;
                            res_norm = cand_norm;
                            accepted = true;
                            break;
                        }
                    }
                }
                damping *= 0.5;
            }
            if !accepted {
                return Err(Error::InversionFailure {
                    point: z.iter().copied().collect(),
                    t,
                    residual: res_norm,
                    iterations: iteration + 1,
                });
            }
        }
        if res_norm <= self.inversion_tol {
            Ok(y)
        } else {
            Err(Error::InversionFailure {
                point: z.iter().copied().collect(),
                t,
                residual: res_norm,
                iterations: MAX_NEWTON_ITERATIONS,
            })
        }
    }

    /// Drift of the transformed unit-diffusion process:
    /// μ̃(z,t) = σ⁻¹·(μ(y,t) − ∂g/∂t − ½Δ_z g) at y = g(z,t).
    ///
    /// Since ∂g/∂z = σ(g(z,t),t), the Laplacian reduces to
    /// Δ_z g_i = Σ_{k,m} (∂σ_{ik}/∂y_m)·σ_{mk}, which needs only first
    /// differences of σ; and ∂g/∂t = −σ·∂h/∂t, with ∂h/∂t a central
    /// difference of the quadrature-accurate h.
    pub fn transformed_drift(&self, z: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let d = z.len();
        let y = self.g(z, t)?;
        let sigma = self.source.diffusion(&y, t);
        let mu = self.source.drift(&y, t);
        let derivs = sigma_derivatives(&self.source, &y, t)?;
        let laplacian = DVector::from_fn(d, |i, _| {
            let mut acc = 0.0;
            for k in 0..d {
                for m in 0..d {
                    acc += derivs[m][(i, k)] * sigma[(m, k)];
                }
            }
            acc
        });
        let dg_dt = if self.source.time_dependent {
            let ht = 1e-5 * (1.0 + t.abs());
            let dh_dt = (self.h(&y, t + ht)? - self.h(&y, t - ht)?) / (2.0 * ht);
            -(&sigma * dh_dt)
        } else {
            DVector::zeros(d)
        };
        let rhs = mu - dg_dt - laplacian * 0.5;
        sigma
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::DegenerateData("σ singular in transformed drift".into()))
    }
}
