//! Pipeline stages behind the subcommands: dataset generation, training
//! with loss logging, evaluation, repeated runs with seed variation, and
//! latent dimension search.

use crate::config::ExperimentConfig;
use lsde::datasets::{self, AmbientMap, MapKind, PairedDataset};
use lsde::eval::{self, AlignMode, MetricsReport};
use lsde::rng::Stream;
use lsde::vae::{self, TrainLog, VaeModel};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

const DIMSEARCH_PAD_DOMAIN: u64 = 0xD1AE;

/// A library error tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct CliError {
    pub stage: &'static str,
    pub source: lsde::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{} stage] {}", self.stage, self.source)
    }
}

impl CliError {
    /// Exit codes: 2 config/input error, 3 training diverged,
    /// 4 evaluation infeasible, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match &self.source {
            lsde::Error::InvalidInput(_)
            | lsde::Error::NotFound(_)
            | lsde::Error::BadFormat(_)
            | lsde::Error::Json(_) => 2,
            lsde::Error::TrainingDiverged { .. } => 3,
            lsde::Error::DegenerateData(_) | lsde::Error::InversionFailure { .. } => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn stage<T>(stage: &'static str, r: lsde::Result<T>) -> CliResult<T> {
    r.map_err(|source| CliError { stage, source })
}

fn write_json<T: Serialize>(stage_name: &'static str, path: &Path, value: &T) -> CliResult<()> {
    let text = stage(
        stage_name,
        serde_json::to_string_pretty(value).map_err(lsde::Error::from),
    )?;
    stage(stage_name, std::fs::write(path, text).map_err(lsde::Error::from))
}

pub fn map_kind_label(kind: MapKind) -> &'static str {
    match kind {
        MapKind::RandomSmooth => "random_smooth",
        MapKind::RasterBall => "raster_ball",
        MapKind::Linear => "linear",
    }
}

fn parallel_repeats() -> usize {
    std::env::var("LSDE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1)
        .unwrap_or(1)
}

/// Generate the dataset described by the config into `out/dataset` and
/// echo the resolved config to `out/config.json`.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> CliResult<PairedDataset> {
    stage("generate", cfg.validate())?;
    stage(
        "generate",
        std::fs::create_dir_all(out).map_err(lsde::Error::from),
    )?;
    stage("generate", cfg.write(&out.join("config.json")))?;
    let map = stage("generate", AmbientMap::from_config(&cfg.dataset.map))?;
    let ds = stage(
        "generate",
        datasets::generate_multi(
            &cfg.dataset.sde,
            &map,
            cfg.dataset.n_trajectories,
            &cfg.dataset.times,
            cfg.dataset.noise.clone(),
            cfg.dataset.rescale,
            cfg.dataset.seed,
        ),
    )?;
    stage("generate", datasets::save_dataset(&out.join("dataset"), &ds))?;
    Ok(ds)
}

pub fn write_loss_log(path: &Path, log: &TrainLog) -> lsde::Result<()> {
    let mut text =
        String::from("epoch,entropy,prior,transition,reconstruction,l1,total,val_total\n");
    for row in &log.epochs {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.epoch,
            row.loss.entropy,
            row.loss.prior,
            row.loss.transition,
            row.loss.reconstruction,
            row.loss.l1_diffusion,
            row.loss.total,
            row.val_total
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Train the configured model on a dataset; writes the checkpoint
/// (`model.json` + `model.bin`) and `loss_log.csv` into `out`.
pub fn train(cfg: &ExperimentConfig, ds: &PairedDataset, out: &Path) -> CliResult<VaeModel> {
    stage(
        "train",
        std::fs::create_dir_all(out).map_err(lsde::Error::from),
    )?;
    let mut model = stage("train", VaeModel::new(cfg.model.clone()))?;
    let log = stage("train", vae::train(&mut model, ds, &cfg.training))?;
    stage("train", write_loss_log(&out.join("loss_log.csv"), &log))?;
    stage("train", vae::save_model(&out.join("model"), &model))?;
    Ok(model)
}

pub fn evaluate(
    model: &VaeModel,
    ds: &PairedDataset,
    mode: AlignMode,
) -> CliResult<MetricsReport> {
    let (report, _) = stage("evaluate", eval::evaluate_model(model, ds, mode))?;
    Ok(report)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricSummary {
    pub l_latent: f64,
    pub l_mu: f64,
    pub reconstruction_mse: f64,
    pub crlb: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub repeats: Vec<MetricsReport>,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    // Sample standard deviation; a single repeat reports zero spread.
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn summarize(repeats: &[MetricsReport]) -> RunSummary {
    let field =
        |f: fn(&MetricsReport) -> f64| -> Vec<f64> { repeats.iter().map(f).collect() };
    let (m_lat, s_lat) = mean_std(&field(|r| r.l_latent));
    let (m_mu, s_mu) = mean_std(&field(|r| r.l_mu));
    let (m_rec, s_rec) = mean_std(&field(|r| r.reconstruction_mse));
    let (m_crlb, s_crlb) = mean_std(&field(|r| r.crlb));
    RunSummary {
        repeats: repeats.to_vec(),
        mean: MetricSummary {
            l_latent: m_lat,
            l_mu: m_mu,
            reconstruction_mse: m_rec,
            crlb: m_crlb,
        },
        std: MetricSummary {
            l_latent: s_lat,
            l_mu: s_mu,
            reconstruction_mse: s_rec,
            crlb: s_crlb,
        },
    }
}

/// One repeat of train → evaluate with the repeat index folded into the
/// model and training seeds (the dataset is shared).
fn run_repeat(
    cfg: &ExperimentConfig,
    ds: &PairedDataset,
    out: &Path,
    index: usize,
) -> CliResult<MetricsReport> {
    let mut repeat_cfg = cfg.clone();
    repeat_cfg.model.seed = cfg.model.seed.wrapping_add(index as u64);
    repeat_cfg.training.seed = cfg.training.seed.wrapping_add(index as u64);
    let dir = out.join(format!("repeat_{index:02}"));
    let model = train(&repeat_cfg, ds, &dir)?;
    let report = evaluate(&model, ds, cfg.evaluation.mode)?;
    write_json("evaluate", &dir.join("metrics.json"), &report)?;
    Ok(report)
}

/// Full pipeline: generate → (train → evaluate) × repeats. Repeat r
/// adds r to the model and training seeds; `LSDE_THREADS` caps how many
/// repeats run concurrently. Writes metrics.json (all repeats plus
/// mean/std) and metrics.csv into `out`, and returns the summary.
pub fn run(cfg: &ExperimentConfig, out: &Path, repeat: usize) -> CliResult<RunSummary> {
    if repeat == 0 {
        return Err(CliError {
            stage: "run",
            source: lsde::Error::InvalidInput("--repeat must be at least 1".into()),
        });
    }
    let ds = generate(cfg, out)?;
    let threads = parallel_repeats();
    let mut outcomes: Vec<Option<CliResult<MetricsReport>>> = Vec::new();
    outcomes.resize_with(repeat, || None);
    let indices: Vec<usize> = (0..repeat).collect();
    for chunk in indices.chunks(threads.max(1)) {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &r in chunk {
                let cfg_ref = &*cfg;
                let ds_ref = &ds;
                let out_ref = out;
                handles.push((r, scope.spawn(move || run_repeat(cfg_ref, ds_ref, out_ref, r))));
            }
            for (r, handle) in handles {
                outcomes[r] = Some(handle.join().expect("repeat thread panicked"));
            }
        });
    }
    let mut repeats = Vec::with_capacity(repeat);
    for outcome in outcomes {
        repeats.push(outcome.expect("all repeats attempted")?);
    }

    let summary = summarize(&repeats);
    write_json("evaluate", &out.join("metrics.json"), &summary)?;
    let mut csv = String::from("metric,mean,std\n");
    for (name, mean, std) in [
        ("l_latent", summary.mean.l_latent, summary.std.l_latent),
        ("l_mu", summary.mean.l_mu, summary.std.l_mu),
        (
            "reconstruction_mse",
            summary.mean.reconstruction_mse,
            summary.std.reconstruction_mse,
        ),
        ("crlb", summary.mean.crlb, summary.std.crlb),
    ] {
        csv.push_str(&format!("{name},{mean},{std}\n"));
    }
    stage(
        "evaluate",
        std::fs::write(out.join("metrics.csv"), csv).map_err(lsde::Error::from),
    )?;
    Ok(summary)
}

/// One-line summary in the style of a results table row.
pub fn table_row(cfg: &ExperimentConfig, summary: &RunSummary) -> String {
    let label = format!(
        "{}-n{}",
        map_kind_label(cfg.dataset.map.kind),
        cfg.dataset.map.ambient_dim
    );
    format!(
        "{label},{},{:.6},{:.6},{:.6},{:.6e}",
        cfg.dataset.sde,
        summary.mean.l_latent,
        summary.mean.l_mu,
        summary.mean.crlb,
        summary.mean.reconstruction_mse
    )
}

pub const TABLE_HEADER: &str = "dataset,sde,l_latent,l_mu,crlb,reconstruction_mse";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DimsearchMode {
    /// Train with a learnable diagonal diffusion and count the
    /// significant diagonals.
    DiagHeuristic,
    /// Compare exact ambient increment likelihoods of linear candidate
    /// maps (linear datasets only).
    LinearLikelihood,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DimsearchRow {
    pub candidate: usize,
    /// Sorted |D_i| for diag_heuristic.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagonals: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suggested: Option<usize>,
    /// Total ambient log-likelihood for linear_likelihood (−∞ encodes a
    /// support violation).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loglik: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DimsearchReport {
    pub mode: DimsearchMode,
    pub rows: Vec<DimsearchRow>,
    pub selected: usize,
}

/// Latent dimension search over candidate sizes.
pub fn dimsearch(
    cfg: &ExperimentConfig,
    out: &Path,
    mode: DimsearchMode,
    candidates: &[usize],
) -> CliResult<DimsearchReport> {
    if candidates.is_empty() {
        return Err(CliError {
            stage: "dimsearch",
            source: lsde::Error::InvalidInput("no candidate sizes given".into()),
        });
    }
    let ds = generate(cfg, out)?;
    let report = match mode {
        DimsearchMode::DiagHeuristic => dimsearch_diag(cfg, &ds, candidates)?,
        DimsearchMode::LinearLikelihood => dimsearch_linear(&ds, candidates)?,
    };
    write_json("dimsearch", &out.join("dimsearch.json"), &report)?;
    Ok(report)
}

/// Train an oversized model with a learnable diagonal diffusion per
/// candidate; the suggested dimension counts diagonals within a factor
/// 10 of the leading one. The overall selection comes from the largest
/// candidate (the oversized-guess workflow).
fn dimsearch_diag(
    cfg: &ExperimentConfig,
    ds: &PairedDataset,
    candidates: &[usize],
) -> CliResult<DimsearchReport> {
    let mut rows = Vec::new();
    let mut selected = 0;
    let mut largest = 0;
    for &j in candidates {
        let mut model_cfg = cfg.model.clone();
        model_cfg.latent_dim = j;
        model_cfg.diffusion_diag = true;
        let mut model = stage("dimsearch", VaeModel::new(model_cfg))?;
        stage("dimsearch", vae::train(&mut model, ds, &cfg.training))?;
        let diag_report = eval::diffusion_diag_report(&model.diffusion());
        if j >= largest {
            largest = j;
            selected = diag_report.suggested_dim;
        }
        rows.push(DimsearchRow {
            candidate: j,
            diagonals: Some(diag_report.sorted_magnitudes),
            suggested: Some(diag_report.suggested_dim),
            loglik: None,
        });
    }
    Ok(DimsearchReport {
        mode: DimsearchMode::DiagHeuristic,
        rows,
        selected,
    })
}

/// Exact-likelihood comparison for linear datasets: candidate j uses
/// the first j columns of the generating map (j ≤ d), or the map padded
/// with redundant in-span columns (j > d); each candidate's affine
/// latent drift is fitted by least squares and the ambient increment
/// likelihood is scored with the degenerate Gaussian density.
fn dimsearch_linear(ds: &PairedDataset, candidates: &[usize]) -> CliResult<DimsearchReport> {
    if ds.meta.map.kind != MapKind::Linear {
        return Err(CliError {
            stage: "dimsearch",
            source: lsde::Error::InvalidInput(format!(
                "linear_likelihood mode requires a dataset generated by a linear map; \
                 this dataset used {}",
                map_kind_label(ds.meta.map.kind)
            )),
        });
    }
    let map = stage("dimsearch", AmbientMap::from_config(&ds.meta.map))?;
    let a = map
        .linear_matrix()
        .expect("linear map exposes its matrix")
        .clone();
    let d = a.ncols();
    let pad_stream = Stream::new(ds.meta.seed).derive(DIMSEARCH_PAD_DOMAIN);

    let mut rows = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for &j in candidates {
        if j == 0 {
            return Err(CliError {
                stage: "dimsearch",
                source: lsde::Error::InvalidInput("candidate size 0 is meaningless".into()),
            });
        }
        let a_j = if j <= d {
            a.columns(0, j).into_owned()
        } else {
            // Redundant extra columns inside the true column space, so
            // wider candidates share the support but pay a volume
            // penalty in the pseudo-determinant.
            let g_stream = pad_stream.derive(j as u64);
            let g = DMatrix::from_fn(d, j - d, |r, c| g_stream.gaussian((r * (j - d) + c) as u64));
            let extra = &a * &g;
            let mut wide = DMatrix::zeros(a.nrows(), j);
            wide.columns_mut(0, d).copy_from(&a);
            wide.columns_mut(d, j - d).copy_from(&extra);
            wide
        };
        let ll = stage("dimsearch", candidate_loglik(&a_j, ds))?;
        if best.map_or(true, |(_, b)| ll > b) {
            best = Some((j, ll));
        }
        rows.push(DimsearchRow {
            candidate: j,
            diagonals: None,
            suggested: None,
            loglik: Some(ll),
        });
    }
    Ok(DimsearchReport {
        mode: DimsearchMode::LinearLikelihood,
        rows,
        selected: best.expect("candidates nonempty").0,
    })
}

/// Fit an affine latent drift by least squares in the candidate's
/// latent coordinates, then score the ambient increments.
fn candidate_loglik(a_j: &DMatrix<f64>, ds: &PairedDataset) -> lsde::Result<f64> {
    let j = a_j.ncols();
    let n_pairs = ds.len();

    // Minimum-norm latent reconstruction via the pseudo-inverse.
    let svd = a_j.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let sv = &svd.singular_values;
    let sv_max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let mut sv_inv = DMatrix::zeros(vt.nrows(), u.ncols());
    for i in 0..sv.len().min(sv_inv.nrows()) {
        if sv[i] > eval::RANK_TOL * sv_max {
            sv_inv[(i, i)] = 1.0 / sv[i];
        }
    }
    let a_pinv = vt.transpose() * sv_inv * u.transpose();

    let zeta_t = &a_pinv * &ds.x_t;
    let zeta_s = &a_pinv * &ds.x_s;

    // Affine least squares for the drift: increments/Δt ≈ W·ζ + u₀.
    let mut design = DMatrix::zeros(j + 1, n_pairs);
    design.view_mut((0, 0), (j, n_pairs)).copy_from(&zeta_t);
    for p in 0..n_pairs {
        design[(j, p)] = 1.0;
    }
    let mut target = DMatrix::zeros(j, n_pairs);
    for p in 0..n_pairs {
        for i in 0..j {
            target[(i, p)] = (zeta_s[(i, p)] - zeta_t[(i, p)]) / ds.dts[p];
        }
    }
    let gram = &design * design.transpose();
    let gram_pinv = gram
        .svd(true, true)
        .pseudo_inverse(eval::RANK_TOL)
        .map_err(|e| lsde::Error::DegenerateData(format!("drift fit failed: {e}")))?;
    let wa = &target * design.transpose() * gram_pinv;
    let w = wa.columns(0, j).into_owned();
    let u0 = wa.column(j).into_owned();

    eval::linear_loglik(
        a_j,
        |z: &DVector<f64>| &w * z + &u0,
        &DMatrix::identity(j, j),
        &ds.x_t,
        &ds.x_s,
        &ds.dts,
    )
}

/// Reducibility report for a catalog SDE as CSV plus a status line.
pub fn lamperti_check(sde_name: &str, base: Option<Vec<f64>>) -> CliResult<String> {
    let spec = stage("lamperti-check", lsde::sde::catalog(sde_name))?;
    let base = match base {
        Some(values) => {
            if values.len() != spec.dim {
                return Err(CliError {
                    stage: "lamperti-check",
                    source: lsde::Error::InvalidInput(format!(
                        "base point has {} coordinates, '{}' is {}-dimensional",
                        values.len(),
                        sde_name,
                        spec.dim
                    )),
                });
            }
            DVector::from_vec(values)
        }
        None => stage("lamperti-check", lsde::sde::default_initial_state(sde_name))?,
    };
    let probes = lsde::lamperti::default_probes(&spec, &base);
    let report = stage("lamperti-check", lsde::lamperti::check_reducible(&spec, &probes))?;

    let mut out = String::from("point,t,curl_residual,symmetric,positive_definite\n");
    for probe in &report.probes {
        let coords = probe
            .point
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            coords, probe.t, probe.curl_residual, probe.symmetric, probe.positive_definite
        ));
    }
    out.push_str(&format!(
        "# reducible: {} (max residual {:.3e}, tolerance {:.1e})\n",
        report.reducible, report.max_residual, report.curl_tol
    ));
    Ok(out)
}

/// Outputs used by the `train`/`evaluate` subcommands when run
/// standalone against an existing dataset directory.
pub fn load_dataset_dir(dir: &Path) -> CliResult<PairedDataset> {
    stage("generate", datasets::load_dataset(dir))
}

pub fn load_model_base(base: &Path) -> CliResult<VaeModel> {
    stage("train", vae::load_model(base))
}

pub fn single_metrics_row(cfg_label: &str, sde: &str, report: &MetricsReport) -> String {
    format!(
        "{cfg_label},{sde},{:.6},{:.6},{:.6},{:.6e}",
        report.l_latent, report.l_mu, report.crlb, report.reconstruction_mse
    )
}
