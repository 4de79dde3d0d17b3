//! Minimal dense-network toolkit: MLPs with exact hand-written
//! reverse-mode gradients, Adam with exponential learning-rate decay,
//! and flat parameter (de)serialization.
//!
//! Reverse mode is written per layer (dense affine + pointwise
//! activation) rather than as a general tape: the architectures here are
//! fixed, and the explicit form keeps gradient flow auditable and
//! deterministic. All math is f64. Batched variants treat matrix columns
//! as samples so full-batch training runs as matrix products.

use crate::error::{Error, Result};
use crate::io;
use crate::rng::Stream;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

const INIT_DOMAIN: u64 = 0x11A7;

/// Slope of the negative branch of leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    LeakyRelu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(x),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative at the pre-activation value.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(x),
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Numerically stable log(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus: the x with softplus(x) = y (y > 0).
#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    // log(e^y − 1), stable for small and large y.
    y + (-(-y).exp_m1()).ln()
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Scaled normal, std = sqrt(2 / ((1 + slope²)·fan_in)) — suited to
    /// leaky-ReLU bodies.
    Kaiming,
    /// Normal with std = gain·sqrt(2 / (fan_in + fan_out)).
    Xavier { gain: f64 },
    /// All parameters zero (used by tests and explicit constructions).
    Zeros,
}

/// Dense multi-layer perceptron. `widths = [in, h…, out]`; the activation
/// follows every affine layer except the last, so a two-width MLP is a
/// plain affine map.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// weights[l] has shape widths[l+1] × widths[l].
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub seed: u64,
}

/// Per-parameter gradients shape-matched to an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros(mlp: &Mlp) -> Self {
        MlpGrads {
            weights: mlp
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: mlp.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// Append all gradient entries in the canonical flat order
    /// (layer by layer: weights row-major, then bias).
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    out.push(w[(i, j)]);
                }
            }
            out.extend(b.iter());
        }
    }
}

impl Mlp {
    /// Build with the given initialization; biases start at zero.
    /// Weight draws are keyed on (seed, layer, entry index), so
    /// construction is a pure function of its arguments.
    pub fn new(widths: Vec<usize>, activation: Activation, init: Init, seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let stream = Stream::new(seed).derive(INIT_DOMAIN);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_out, fan_in) = (widths[l + 1], widths[l]);
            let std = match init {
                Init::Kaiming => (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt(),
                Init::Xavier { gain } => gain * (2.0 / (fan_in + fan_out) as f64).sqrt(),
                Init::Zeros => 0.0,
            };
            let layer_stream = stream.derive(l as u64);
            weights.push(DMatrix::from_fn(fan_out, fan_in, |i, j| {
                std * layer_stream.gaussian((i * fan_in + j) as u64)
            }));
            biases.push(DVector::zeros(fan_out));
        }
        Mlp {
            widths,
            activation,
            weights,
            biases,
            seed,
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    fn check_input(&self, rows: usize) -> Result<()> {
        if rows != self.input_width() {
            return Err(Error::InvalidInput(format!(
                "input width {} does not match MLP input width {}",
                rows,
                self.input_width()
            )));
        }
        Ok(())
    }

    /// Forward pass for a batch (columns are samples).
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x.nrows())?;
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for l in 0..=last {
            let mut a = &self.weights[l] * &h;
            for mut col in a.column_iter_mut() {
                col += &self.biases[l];
            }
            if l < last {
                a.apply(|v| *v = self.activation.apply(*v));
            }
            h = a;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(out.column(0).into_owned())
    }

    /// Reverse pass for a batch: gradients of Σ_samples ⟨upstream, f(x)⟩.
    ///
    /// Returns (∂/∂x as a matrix of columns, parameter gradients). The
    /// forward activations are recomputed here rather than cached across
    /// calls.
    pub fn backward_batch(
        &self,
        x: &DMatrix<f64>,
        upstream: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, MlpGrads)> {
        self.check_input(x.nrows())?;
        if upstream.nrows() != self.output_width() || upstream.ncols() != x.ncols() {
            return Err(Error::InvalidInput(format!(
                "upstream shape {}×{} does not match output {}×{}",
                upstream.nrows(),
                upstream.ncols(),
                self.output_width(),
                x.ncols()
            )));
        }
        let last = self.weights.len() - 1;
        // Recompute pre-activations and post-activation inputs per layer.
        let mut inputs = Vec::with_capacity(last + 1); // H_{l-1} fed to layer l
        let mut preacts = Vec::with_capacity(last + 1);
        let mut h = x.clone();
        for l in 0..=last {
            inputs.push(h.clone());
            let mut a = &self.weights[l] * &h;
            for mut col in a.column_iter_mut() {
                col += &self.biases[l];
            }
            preacts.push(a.clone());
            if l < last {
                a.apply(|v| *v = self.activation.apply(*v));
            }
            h = a;
        }

        let mut grads = MlpGrads::zeros(self);
        // G = ∂loss/∂(pre-activation of layer l), starting at the linear output.
        let mut g = upstream.clone();
        for l in (0..=last).rev() {
            grads.weights[l] = &g * inputs[l].transpose();
            grads.biases[l] = DVector::from_fn(g.nrows(), |i, _| g.row(i).sum());
            let mut g_input = self.weights[l].transpose() * &g;
            if l > 0 {
                // Chain through the activation of the previous layer.
                let pre = &preacts[l - 1];
                g_input.zip_apply(pre, |gv, av| *gv *= self.activation.derivative(av));
            }
            g = g_input;
        }
        Ok((g, grads))
    }

    pub fn backward(
        &self,
        x: &DVector<f64>,
        upstream: &DVector<f64>,
    ) -> Result<(DVector<f64>, MlpGrads)> {
        let (gx, grads) = self.backward_batch(
            &DMatrix::from_column_slice(x.len(), 1, x.as_slice()),
            &DMatrix::from_column_slice(upstream.len(), 1, upstream.as_slice()),
        )?;
        Ok((gx.column(0).into_owned(), grads))
    }

    /// Append parameters in the canonical flat order.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    out.push(w[(i, j)]);
                }
            }
            out.extend(b.iter());
        }
    }

    /// Read parameters back from a flat slice, advancing `cursor`.
    pub fn unflatten_from(&mut self, flat: &[f64], cursor: &mut usize) {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    w[(i, j)] = flat[*cursor];
                    *cursor += 1;
                }
            }
            for i in 0..b.len() {
                b[i] = flat[*cursor];
                *cursor += 1;
            }
        }
    }
}

/// Adam hyperparameters; the effective rate at `epoch` is lr·decay^epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.999,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update in place. `epoch` selects the decayed learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], epoch: usize) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::TrainingDiverged {
                epoch,
                detail: format!("non-finite gradient element at flat index {i}"),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let lr = c.lr_at(epoch);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grads[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MlpHeader {
    widths: Vec<usize>,
    activation: Activation,
    seed: u64,
}

/// Save an MLP as `<base>.json` (header) + `<base>.bin` (flat parameters).
pub fn save_mlp(base: &Path, mlp: &Mlp) -> Result<()> {
    let header = MlpHeader {
        widths: mlp.widths.clone(),
        activation: mlp.activation,
        seed: mlp.seed,
    };
    std::fs::write(
        base.with_extension("json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    let mut flat = Vec::with_capacity(mlp.n_params());
    mlp.flatten_into(&mut flat);
    io::write_matrix(
        &base.with_extension("bin"),
        &DMatrix::from_row_slice(1, flat.len(), &flat),
    )?;
    Ok(())
}

/// Load an MLP saved by [`save_mlp`].
pub fn load_mlp(base: &Path) -> Result<Mlp> {
    let header: MlpHeader =
        serde_json::from_str(&std::fs::read_to_string(base.with_extension("json"))?)?;
    let mut mlp = Mlp::new(header.widths, header.activation, Init::Zeros, header.seed);
    let blob = io::read_matrix(&base.with_extension("bin"))?;
    if blob.len() != mlp.n_params() {
        return Err(Error::BadFormat(format!(
            "{}: parameter blob has {} entries, header implies {}",
            base.display(),
            blob.len(),
            mlp.n_params()
        )));
    }
    let flat: Vec<f64> = blob.iter().copied().collect();
    let mut cursor = 0;
    mlp.unflatten_from(&flat, &mut cursor);
    Ok(mlp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softplus_closed_form_at_zero() {
        assert_abs_diff_eq!(softplus(0.0), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(Activation::Softplus.derivative(0.0), 0.5, epsilon = 1e-15);
        // Inverse round trip over several scales.
        for &y in &[1e-6, 0.01, 0.69, 1.0, 5.0, 40.0] {
            assert_abs_diff_eq!(softplus(softplus_inverse(y)), y, epsilon = 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn identity_net_passes_through() {
        let mut mlp = Mlp::new(vec![3, 3], Activation::Identity, Init::Zeros, 0);
        mlp.weights[0] = DMatrix::identity(3, 3);
        let x = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        assert_eq!(mlp.forward(&x).unwrap(), x);
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let (gx, _) = mlp.backward(&x, &u).unwrap();
        assert_eq!(gx, u);
    }

    #[test]
    fn width_mismatch_is_invalid_input() {
        let mlp = Mlp::new(vec![2, 2], Activation::Identity, Init::Zeros, 0);
        assert!(matches!(
            mlp.forward(&DVector::zeros(3)),
            Err(Error::InvalidInput(_))
        ));
    }

    /// Central-difference gradient check of ⟨u, f(x)⟩ for all parameters
    /// and the input, at step 1e−5, relative tolerance 1e−4.
    fn gradient_check(mlp: &Mlp, x: &DVector<f64>, u: &DVector<f64>) {
        let (gx, grads) = mlp.backward(x, u).unwrap();
        let mut analytic = Vec::new();
        grads.flatten_into(&mut analytic);
        analytic.extend(gx.iter());

        let mut flat = Vec::new();
        mlp.flatten_into(&mut flat);
        let loss = |m: &Mlp, xv: &DVector<f64>| m.forward(xv).unwrap().dot(u);

        let h = 1e-5;
        let mut numeric = Vec::new();
        for k in 0..flat.len() {
            let mut plus = mlp.clone();
            let mut minus = mlp.clone();
            let mut fp = flat.clone();
            let mut fm = flat.clone();
            fp[k] += h;
            fm[k] -= h;
            let (mut cp, mut cm) = (0, 0);
            plus.unflatten_from(&fp, &mut cp);
            minus.unflatten_from(&fm, &mut cm);
            numeric.push((loss(&plus, x) - loss(&minus, x)) / (2.0 * h));
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            numeric.push((loss(mlp, &xp) - loss(mlp, &xm)) / (2.0 * h));
        }

        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / denom <= 1e-4,
                "param {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    #[test]
    fn gradient_check_all_activations() {
        let probe = Stream::new(77);
        for (k, act) in [
            Activation::Softplus,
            Activation::LeakyRelu,
            Activation::Tanh,
            Activation::Identity,
        ]
        .into_iter()
        .enumerate()
        {
            let init = match act {
                Activation::LeakyRelu => Init::Kaiming,
                _ => Init::Xavier { gain: 1.0 },
            };
            let mlp = Mlp::new(vec![3, 5, 4, 2], act, init, 1000 + k as u64);
            let s = probe.derive(k as u64);
            let x = DVector::from_fn(3, |i, _| s.gaussian(i as u64));
            let u = DVector::from_fn(2, |i, _| s.gaussian(100 + i as u64));
            gradient_check(&mlp, &x, &u);
        }
    }

    #[test]
    fn gradient_check_drift_shaped_net() {
        // The drift architecture: width 16, depth 4, softplus, Xavier 0.5.
        let mlp = Mlp::new(
            vec![2, 16, 16, 16, 16, 2],
            Activation::Softplus,
            Init::Xavier { gain: 0.5 },
            3,
        );
        let s = Stream::new(8);
        let x = DVector::from_fn(2, |i, _| s.gaussian(i as u64));
        let u = DVector::from_fn(2, |i, _| s.gaussian(10 + i as u64));
        gradient_check(&mlp, &x, &u);
    }

    #[test]
    fn batch_forward_matches_single() {
        let mlp = Mlp::new(vec![3, 8, 2], Activation::Tanh, Init::Xavier { gain: 1.0 }, 5);
        let s = Stream::new(21);
        let x = DMatrix::from_fn(3, 7, |i, j| s.gaussian((i * 7 + j) as u64));
        let batch = mlp.forward_batch(&x).unwrap();
        for j in 0..7 {
            let single = mlp.forward(&x.column(j).into_owned()).unwrap();
            assert_abs_diff_eq!((batch.column(j) - single).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn batch_backward_matches_summed_singles() {
        let mlp = Mlp::new(vec![2, 6, 3], Activation::Softplus, Init::Xavier { gain: 1.0 }, 9);
        let s = Stream::new(33);
        let x = DMatrix::from_fn(2, 5, |i, j| s.gaussian((i * 5 + j) as u64));
        let u = DMatrix::from_fn(3, 5, |i, j| s.gaussian((100 + i * 5 + j) as u64));
        let (gx_batch, g_batch) = mlp.backward_batch(&x, &u).unwrap();
        let mut g_sum = MlpGrads::zeros(&mlp);
        for j in 0..5 {
            let (gx, g) = mlp
                .backward(&x.column(j).into_owned(), &u.column(j).into_owned())
                .unwrap();
            g_sum.add_assign(&g);
            assert_abs_diff_eq!((gx_batch.column(j) - gx).norm(), 0.0, epsilon = 1e-12);
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        g_batch.flatten_into(&mut a);
        g_sum.flatten_into(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-11);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut st = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        st.step(&mut p, &[0.0; 3], 0).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_hand_evaluated_first_step() {
        // β₁ = β₂ = 0 → first update magnitude lr/(1 + eps).
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            decay: 1.0,
        };
        let mut st = AdamState::new(1, cfg);
        let mut p = vec![0.0];
        st.step(&mut p, &[1.0], 0).unwrap();
        assert_abs_diff_eq!(p[0], -0.1 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn lr_decay_arithmetic() {
        let cfg = AdamConfig {
            decay: 0.997,
            ..AdamConfig::default()
        };
        assert_abs_diff_eq!(cfg.lr_at(100) / cfg.lr, 0.7405, epsilon = 1e-4);
    }

    #[test]
    fn adam_flags_non_finite_gradients() {
        let mut st = AdamState::new(1, AdamConfig::default());
        let mut p = vec![0.0];
        let err = st.step(&mut p, &[f64::NAN], 4).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { epoch: 4, .. }));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mlp = Mlp::new(vec![2, 4, 1], Activation::Tanh, Init::Xavier { gain: 1.0 }, 11);
            let mut flat = Vec::new();
            mlp.flatten_into(&mut flat);
            let mut st = AdamState::new(flat.len(), AdamConfig::default());
            let s = Stream::new(50);
            for epoch in 0..20 {
                let g: Vec<f64> = (0..flat.len())
                    .map(|i| s.gaussian((epoch * 1000 + i) as u64))
                    .collect();
                st.step(&mut flat, &g, epoch as usize).unwrap();
            }
            flat
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mlp = Mlp::new(vec![4, 8, 3], Activation::LeakyRelu, Init::Kaiming, 99);
        let base = dir.path().join("net");
        save_mlp(&base, &mlp).unwrap();
        let back = load_mlp(&base).unwrap();
        assert_eq!(back.widths, mlp.widths);
        assert_eq!(back.activation, mlp.activation);
        let x = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.4]);
        assert_eq!(
            mlp.forward(&x).unwrap().as_slice(),
            back.forward(&x).unwrap().as_slice()
        );
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let mlp = Mlp::new(vec![3, 5, 2], Activation::Softplus, Init::Xavier { gain: 1.0 }, 7);
        let mut flat = Vec::new();
        mlp.flatten_into(&mut flat);
        assert_eq!(flat.len(), mlp.n_params());
        let mut clone = Mlp::new(vec![3, 5, 2], Activation::Softplus, Init::Zeros, 0);
        let mut cursor = 0;
        clone.unflatten_from(&flat, &mut cursor);
        assert_eq!(cursor, flat.len());
        let x = DVector::from_vec(vec![1.0, 2.0, -0.5]);
        assert_eq!(
            mlp.forward(&x).unwrap().as_slice(),
            clone.forward(&x).unwrap().as_slice()
        );
    }
}
