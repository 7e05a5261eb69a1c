//! Score functions: the exact Gaussian oracle for toy problems and the
//! trainable network, both behind a common evaluation trait.
//!
//! A score function receives the perturbed grid `V`, the noisy conditioner
//! `Y` (both `F x K'`), and the ascending diffusion times of the last
//! `B <= K'` frames. It returns the score for exactly those frames
//! (`F x B`); earlier frames are treated as clean.

mod checkpoint;
mod net;

pub use checkpoint::{Checkpoint, CheckpointHeader, CheckpointError, FORMAT_VERSION};
pub use net::{
    net_backward, net_forward, net_value_and_grad, time_features, NetConfig, ParamLayout,
    ParamVec, GATE_INIT_BIAS, IN_CHANNELS, OUT_CHANNELS,
};

use crate::sde::{SdeError, SdeParams};
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use std::cell::Cell;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid score config: {0}")]
    InvalidConfig(String),
    #[error("conditional variance must be >= 0, got {0}")]
    NegativeVariance(f64),
    #[error("score undefined: a^2 v + sigma^2 = {0} at t = {1}")]
    DegenerateDenominator(f64, f64),
    #[error(transparent)]
    Sde(#[from] SdeError),
}

/// Evaluable score model.
pub trait ScoreFn {
    /// Score of the last `times.len()` frames of `(v, y)`.
    fn score(
        &self,
        v: ArrayView2<Complex64>,
        y: ArrayView2<Complex64>,
        times: &[f64],
    ) -> Result<Array2<Complex64>, ScoreError>;
}

/// Exact score for per-bin Gaussian toy problems where `X0 | Y` is complex
/// Gaussian with mean `mean_offset + coeff_y * y` and total variance `var`.
///
/// The perturbed marginal is then Gaussian per bin and the score is linear:
/// `score = -(x - (a*m + b*y)) / (a^2 var + sigma^2)`.
#[derive(Debug, Clone)]
pub struct AnalyticScore {
    pub params: SdeParams,
    pub coeff_y: f64,
    pub mean_offset: Complex64,
    pub var: f64,
}

impl AnalyticScore {
    pub fn new(
        params: SdeParams,
        coeff_y: f64,
        mean_offset: Complex64,
        var: f64,
    ) -> Result<Self, ScoreError> {
        if var < 0.0 || !var.is_finite() {
            return Err(ScoreError::NegativeVariance(var));
        }
        Ok(Self { params, coeff_y, mean_offset, var })
    }

    /// Oracle for a clean-equals-noisy toy: `X0 = Y` exactly, up to `var`.
    pub fn tied_to_noisy(params: SdeParams, var: f64) -> Result<Self, ScoreError> {
        Self::new(params, 1.0, Complex64::new(0.0, 0.0), var)
    }

    /// Conditional mean of `X0` given the observed bin `y`.
    pub fn cond_mean(&self, y: Complex64) -> Complex64 {
        self.mean_offset + y * self.coeff_y
    }
}

impl ScoreFn for AnalyticScore {
    fn score(
        &self,
        v: ArrayView2<Complex64>,
        y: ArrayView2<Complex64>,
        times: &[f64],
    ) -> Result<Array2<Complex64>, ScoreError> {
        if v.dim() != y.dim() {
            return Err(ScoreError::ShapeMismatch(format!(
                "v is {:?}, y is {:?}",
                v.dim(),
                y.dim()
            )));
        }
        let (f_dim, k_frames) = v.dim();
        let b = times.len();
        if b > k_frames {
            return Err(ScoreError::ShapeMismatch(format!(
                "time grid length {b} exceeds {k_frames} frames"
            )));
        }
        let mut out = Array2::zeros((f_dim, b));
        for (j, &t) in times.iter().enumerate() {
            let col = k_frames - b + j;
            let (a, bcoef) = self.params.mean_coeffs(t)?;
            let sigma = self.params.sigma(t)?;
            let denom = a * a * self.var + sigma * sigma;
            if denom <= 0.0 {
                return Err(ScoreError::DegenerateDenominator(denom, t));
            }
            for fi in 0..f_dim {
                let yv = y[[fi, col]];
                let mu = self.cond_mean(yv) * a + yv * bcoef;
                out[[fi, j]] = -(v[[fi, col]] - mu) / denom;
            }
        }
        Ok(out)
    }
}

/// Trained network behind the score contract. The clean frame is estimated
/// as a learned per-bin blend of the network prediction and the
/// kernel-inverted input `v_inv = (v - b*y) / a`,
///
/// `x0_eff = (1 - gate) * net(V, Y, t) + gate * v_inv`,
///
/// and the score follows from the Gaussian kernel:
/// `score = (a*x0_eff + b*y - v) / sigma^2`, per buffer frame. Keeping the
/// network output on the clean-signal scale keeps its targets O(1) across
/// the whole time grid. The gate logit is a learned function of the frame's
/// diffusion time and the bin's log-energy, so nearly-clean strong bins can
/// pass straight through while weak bins rely on the network.
#[derive(Debug, Clone)]
pub struct LearnedScore {
    pub cfg: NetConfig,
    pub theta: ParamVec,
    pub sde: SdeParams,
}

/// Per-bin gate value and the pieces needed for its gradient.
#[derive(Debug, Clone, Copy)]
pub struct GateEval {
    pub gamma: f64,
    /// log(|v_inv|^2 + floor), the energy feature of the logit.
    pub log_energy: f64,
}

impl LearnedScore {
    pub fn new(cfg: NetConfig, theta: ParamVec, sde: SdeParams) -> Result<Self, ScoreError> {
        cfg.validate()?;
        if theta.len() != cfg.param_count() {
            return Err(ScoreError::InvalidConfig(format!(
                "checkpoint has {} parameters, config needs {}",
                theta.len(),
                cfg.param_count()
            )));
        }
        Ok(Self { cfg, theta, sde })
    }

    /// Kernel factors `(a, b, sigma^2)` per grid time, shared by the score
    /// map and by the training-loss chain rule.
    pub fn kernel_factors(&self, times: &[f64]) -> Result<Vec<(f64, f64, f64)>, ScoreError> {
        times
            .iter()
            .map(|&t| {
                let (a, b) = self.sde.mean_coeffs(t)?;
                let sigma = self.sde.sigma(t)?;
                let s2 = sigma * sigma;
                if s2 <= 0.0 {
                    return Err(ScoreError::DegenerateDenominator(s2, t));
                }
                Ok((a, b, s2))
            })
            .collect()
    }

    /// Kernel-inverted input for the buffer columns: `(v - b*y) / a`.
    pub fn kernel_inverted(
        &self,
        v: ArrayView2<Complex64>,
        y: ArrayView2<Complex64>,
        factors: &[(f64, f64, f64)],
    ) -> Array2<Complex64> {
        let (f_dim, k_frames) = v.dim();
        let b = factors.len();
        let mut out = Array2::zeros((f_dim, b));
        for (j, &(a, bc, _)) in factors.iter().enumerate() {
            let col = k_frames - b + j;
            for fi in 0..f_dim {
                out[[fi, j]] = (v[[fi, col]] - y[[fi, col]] * bc) / a;
            }
        }
        out
    }

    /// Per-bin gate: `sigmoid((w0.e + b0) + (w1.e + b1) * log(|v_inv|^2))`.
    pub fn gate_grid(&self, v_inv: &Array2<Complex64>, times: &[f64]) -> Array2<GateEval> {
        let layout = self.cfg.layout();
        let w0 = &self.theta.data[layout.range_of("gate.w0").expect("gate.w0")];
        let b0 = self.theta.data[layout.range_of("gate.b0").expect("gate.b0").start];
        let w1 = &self.theta.data[layout.range_of("gate.w1").expect("gate.w1")];
        let b1 = self.theta.data[layout.range_of("gate.b1").expect("gate.b1").start];
        let (f_dim, b) = v_inv.dim();
        let mut out =
            Array2::from_elem((f_dim, b), GateEval { gamma: 0.0, log_energy: 0.0 });
        for (j, &t) in times.iter().enumerate() {
            let feats = time_features(t, self.cfg.time_embed_dim);
            let base = b0 + w0.iter().zip(&feats).map(|(w, f)| w * f).sum::<f64>();
            let slope = b1 + w1.iter().zip(&feats).map(|(w, f)| w * f).sum::<f64>();
            for fi in 0..f_dim {
                let log_energy = (v_inv[[fi, j]].norm_sqr() + 1e-8).ln();
                let logit = base + slope * log_energy;
                let gamma = 1.0 / (1.0 + (-logit).exp());
                out[[fi, j]] = GateEval { gamma, log_energy };
            }
        }
        out
    }
}

impl ScoreFn for LearnedScore {
    fn score(
        &self,
        v: ArrayView2<Complex64>,
        y: ArrayView2<Complex64>,
        times: &[f64],
    ) -> Result<Array2<Complex64>, ScoreError> {
        let x0_hat = net_forward(&self.cfg, &self.theta, v, y, times)?;
        let factors = self.kernel_factors(times)?;
        let v_inv = self.kernel_inverted(v, y, &factors);
        let gates = self.gate_grid(&v_inv, times);
        let (f_dim, k_frames) = v.dim();
        let b = times.len();
        let mut out = Array2::zeros((f_dim, b));
        for (j, &(a, bc, s2)) in factors.iter().enumerate() {
            let col = k_frames - b + j;
            for fi in 0..f_dim {
                let g = gates[[fi, j]].gamma;
                let x0_eff = x0_hat[[fi, j]] * (1.0 - g) + v_inv[[fi, j]] * g;
                let mu_hat = x0_eff * a + y[[fi, col]] * bc;
                out[[fi, j]] = (mu_hat - v[[fi, col]]) / s2;
            }
        }
        Ok(out)
    }
}

/// Wrapper counting evaluations; used by the call-budget checks and reports.
pub struct CountingScore<'a, S: ScoreFn + ?Sized> {
    inner: &'a S,
    calls: Cell<u64>,
}

impl<'a, S: ScoreFn + ?Sized> CountingScore<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.get()
    }
}

impl<S: ScoreFn + ?Sized> ScoreFn for CountingScore<'_, S> {
    fn score(
        &self,
        v: ArrayView2<Complex64>,
        y: ArrayView2<Complex64>,
        times: &[f64],
    ) -> Result<Array2<Complex64>, ScoreError> {
        self.calls.set(self.calls.get() + 1);
        self.inner.score(v, y, times)
    }
}
