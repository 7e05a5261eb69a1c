//! Denoising score matching training: loss, Adam, EMA shadow, epoch loop.
//!
//! The optimized objective is the plain DSM loss `mean |s + z/sigma|^2` over
//! all (bin, frame, batch) elements, where `s` is the assembled score of the
//! learned model. The network itself predicts the clean frame; the chain
//! through the score map contributes a per-column factor `a_t / sigma_t^2`
//! to the cotangent.

use crate::dbuffer::{make_training_batch, BufferError, TimeGrid, TrainExample};
use crate::score::{
    net_value_and_grad, Checkpoint, CheckpointError, CheckpointHeader, GateEval, LearnedScore,
    NetConfig, ParamVec, ScoreError, FORMAT_VERSION,
};
use crate::sde::SdeParams;
use crate::spectral::StftConfig;
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sigma must be positive everywhere in the loss, found {0}")]
    ZeroSigma(f64),
    #[error(
        "non-finite loss at iteration {iteration} (batch {batch_index}): grid {grid:?}, sigma range [{sigma_min}, {sigma_max}]"
    )]
    NonFiniteLoss {
        iteration: u64,
        batch_index: usize,
        grid: Vec<f64>,
        sigma_min: f64,
        sigma_max: f64,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Training chunk length K (frames).
    pub k_frames: usize,
    /// Buffer length B (reverse steps).
    pub buffer: usize,
    /// Optional gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            ema_decay: 0.999,
            epochs: 250,
            seed: 0,
            k_frames: 128,
            buffer: 20,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(TrainError::InvalidConfig(format!(
                "ema_decay must be in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.buffer == 0 || self.buffer > self.k_frames {
            return Err(TrainError::InvalidConfig(format!(
                "need 1 <= buffer <= k_frames, got buffer={} k_frames={}",
                self.buffer, self.k_frames
            )));
        }
        Ok(())
    }
}

/// Denoising score matching loss: mean squared modulus of `s + z/sigma`.
pub fn dsm_loss(
    score_out: ArrayView2<Complex64>,
    z: ArrayView2<Complex64>,
    sigmas: ArrayView2<f64>,
) -> Result<f64, TrainError> {
    let (loss, _) = dsm_loss_and_cotangent(score_out, z, sigmas)?;
    Ok(loss)
}

/// Loss plus its gradient w.r.t. the score output, packed as complex
/// `(dL/dRe, dL/dIm)` per element.
pub fn dsm_loss_and_cotangent(
    score_out: ArrayView2<Complex64>,
    z: ArrayView2<Complex64>,
    sigmas: ArrayView2<f64>,
) -> Result<(f64, Array2<Complex64>), TrainError> {
    if score_out.dim() != z.dim() || score_out.dim() != sigmas.dim() {
        return Err(TrainError::ShapeMismatch(format!(
            "score {:?}, z {:?}, sigmas {:?}",
            score_out.dim(),
            z.dim(),
            sigmas.dim()
        )));
    }
    let n = score_out.len() as f64;
    let mut loss = 0.0;
    let mut cot = Array2::zeros(score_out.dim());
    for ((s, zv), (&sig, c)) in score_out
        .iter()
        .zip(z.iter())
        .zip(sigmas.iter().zip(cot.iter_mut()))
    {
        if !(sig > 0.0) {
            return Err(TrainError::ZeroSigma(sig));
        }
        let resid = s + zv / sig;
        loss += resid.norm_sqr();
        *c = resid * (2.0 / n);
    }
    Ok((loss / n, cot))
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Standard bias-corrected Adam update, in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(theta.len(), grad.len());
    assert_eq!(theta.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..theta.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * grad[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Exponential moving average of the parameters, used at inference.
#[derive(Debug, Clone)]
pub struct EmaShadow {
    pub shadow: ParamVec,
}

impl EmaShadow {
    pub fn new(theta: &ParamVec) -> Self {
        Self { shadow: theta.clone() }
    }

    /// `shadow <- d*shadow + (1-d)*theta`.
    pub fn update(&mut self, theta: &ParamVec, decay: f64) {
        for (s, &t) in self.shadow.data.iter_mut().zip(&theta.data) {
            *s = decay * *s + (1.0 - decay) * t;
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossTraceRow {
    pub iteration: u64,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

/// Full optimizer state carried across epochs.
pub struct TrainState {
    pub theta: ParamVec,
    pub ema: EmaShadow,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
}

impl TrainState {
    pub fn new(net_cfg: &NetConfig, seed: u64) -> Self {
        let theta = net_cfg.init_params(seed, true);
        let ema = EmaShadow::new(&theta);
        let adam = AdamState::new(theta.len());
        Self { theta, ema, adam, rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)), iteration: 0 }
    }

    /// Restore parameters and optimizer moments from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, seed: u64) -> Result<Self, TrainError> {
        let theta = ckpt.param_vec("theta")?;
        let ema = EmaShadow { shadow: ckpt.param_vec("ema")? };
        let mut adam = AdamState::new(theta.len());
        if let (Ok(m), Ok(v)) = (ckpt.param_vec("adam.m"), ckpt.param_vec("adam.v")) {
            adam.m = m.data;
            adam.v = v.data;
            adam.step = ckpt.header.trained_steps;
        }
        Ok(Self {
            theta,
            ema,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
            iteration: ckpt.header.trained_steps,
        })
    }
}

/// Loss and parameter gradient of one training example through the full
/// chain (network -> assembled score -> DSM loss).
pub fn example_loss_and_grad(
    net_cfg: &NetConfig,
    theta: &ParamVec,
    sde: &SdeParams,
    ex: &TrainExample,
) -> Result<(f64, ParamVec), TrainError> {
    let model = LearnedScore::new(net_cfg.clone(), theta.clone(), sde.clone())?;
    let times = ex.grid.steps();
    let factors = model.kernel_factors(times)?;
    let v_inv = model.kernel_inverted(ex.v.view(), ex.y.view(), &factors);
    let gates = model.gate_grid(&v_inv, times);
    let (f_dim, k_frames) = ex.v.dim();
    let b = times.len();

    let mut loss_out = 0.0;
    let mut d_base = vec![0.0f64; b];
    let mut d_slope = vec![0.0f64; b];
    let (_, mut grad) = net_value_and_grad(
        net_cfg,
        theta,
        ex.v.view(),
        ex.y.view(),
        times,
        |x0_hat| {
            // Assemble the score, evaluate the loss, and chain the cotangent
            // back onto the network output and the gate parameters.
            let mut score = Array2::zeros((f_dim, b));
            for (j, &(a, bc, s2)) in factors.iter().enumerate() {
                let col = k_frames - b + j;
                for fi in 0..f_dim {
                    let g = gates[[fi, j]].gamma;
                    let x0_eff = x0_hat[[fi, j]] * (1.0 - g) + v_inv[[fi, j]] * g;
                    let mu_hat = x0_eff * a + ex.y[[fi, col]] * bc;
                    score[[fi, j]] = (mu_hat - ex.v[[fi, col]]) / s2;
                }
            }
            match dsm_loss_and_cotangent(score.view(), ex.z.view(), ex.sigmas.view()) {
                Ok((loss, mut cot)) => {
                    loss_out = loss;
                    for (j, &(a, _, s2)) in factors.iter().enumerate() {
                        let scale = a / s2;
                        for fi in 0..f_dim {
                            let GateEval { gamma, log_energy } = gates[[fi, j]];
                            // d score / d gamma = (a/s2) * (v_inv - x0_hat)
                            let d = (v_inv[[fi, j]] - x0_hat[[fi, j]]) * scale;
                            let d_gamma =
                                cot[[fi, j]].re * d.re + cot[[fi, j]].im * d.im;
                            let d_logit = d_gamma * gamma * (1.0 - gamma);
                            d_base[j] += d_logit;
                            d_slope[j] += d_logit * log_energy;
                            cot[[fi, j]] *= scale * (1.0 - gamma);
                        }
                    }
                    cot
                }
                Err(_) => {
                    loss_out = f64::NAN;
                    Array2::zeros((f_dim, b))
                }
            }
        },
    )?;

    // Gate parameter gradients: logit = (w0.e + b0) + (w1.e + b1)*log_energy.
    let layout = net_cfg.layout();
    let r_w0 = layout.range_of("gate.w0").expect("gate.w0");
    let r_b0 = layout.range_of("gate.b0").expect("gate.b0");
    let r_w1 = layout.range_of("gate.w1").expect("gate.w1");
    let r_b1 = layout.range_of("gate.b1").expect("gate.b1");
    for (j, &t) in times.iter().enumerate() {
        let feats = crate::score::time_features(t, net_cfg.time_embed_dim);
        for (e, &fv) in feats.iter().enumerate() {
            grad.data[r_w0.start + e] += d_base[j] * fv;
            grad.data[r_w1.start + e] += d_slope[j] * fv;
        }
        grad.data[r_b0.start] += d_base[j];
        grad.data[r_b1.start] += d_slope[j];
    }
    Ok((loss_out, grad))
}

/// One pass over the dataset: batch -> forward -> loss -> backward -> Adam
/// -> EMA, recording one trace row per iteration.
pub fn train_epoch(
    state: &mut TrainState,
    dataset: &[(Array2<Complex64>, Array2<Complex64>)],
    net_cfg: &NetConfig,
    sde: &SdeParams,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<LossTraceRow>, TrainError> {
    cfg.validate()?;
    let batches = dataset.len().div_ceil(cfg.batch_size).max(1);
    let mut trace = Vec::with_capacity(batches);
    for batch_index in 0..batches {
        let start = Instant::now();
        let batch = make_training_batch(
            dataset,
            cfg.k_frames,
            cfg.buffer,
            cfg.batch_size,
            sde,
            &mut state.rng,
        )?;
        let mut grad_acc = ParamVec::zeros(state.theta.len());
        let mut loss_acc = 0.0;
        for ex in &batch {
            let (loss, grad) = example_loss_and_grad(net_cfg, &state.theta, sde, ex)?;
            if !loss.is_finite() {
                let (smin, smax) = ex
                    .sigmas
                    .iter()
                    .fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
                return Err(TrainError::NonFiniteLoss {
                    iteration: state.iteration,
                    batch_index,
                    grid: ex.grid.steps().to_vec(),
                    sigma_min: smin,
                    sigma_max: smax,
                });
            }
            loss_acc += loss;
            for (g, v) in grad_acc.data.iter_mut().zip(&grad.data) {
                *g += v;
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for g in grad_acc.data.iter_mut() {
            *g *= inv;
        }
        let mut grad_norm = grad_acc.data.iter().map(|g| g * g).sum::<f64>().sqrt();
        if let Some(clip) = cfg.grad_clip {
            if grad_norm > clip {
                let scale = clip / grad_norm;
                for g in grad_acc.data.iter_mut() {
                    *g *= scale;
                }
                grad_norm = clip;
            }
        }
        adam_step(&mut state.theta.data, &grad_acc.data, &mut state.adam, cfg.lr);
        state.ema.update(&state.theta, cfg.ema_decay);
        state.iteration += 1;
        trace.push(LossTraceRow {
            iteration: state.iteration,
            epoch,
            loss: loss_acc * inv,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1000.0,
        });
    }
    Ok(trace)
}

/// Append trace rows to a CSV file, writing the header if the file is new.
pub fn append_trace_csv(path: &Path, rows: &[LossTraceRow]) -> Result<(), TrainError> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
    let mut out = String::new();
    if fresh {
        out.push_str("iteration,epoch,loss,grad_norm,wall_ms\n");
    }
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.12e},{:.12e},{:.3}\n",
            r.iteration, r.epoch, r.loss, r.grad_norm, r.wall_ms
        ));
    }
    f.write_all(out.as_bytes())
        .map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

/// Package the current training state as a checkpoint.
pub fn make_checkpoint(
    state: &TrainState,
    net_cfg: &NetConfig,
    sde: &SdeParams,
    stft: &StftConfig,
    grid: &TimeGrid,
    k_frames: usize,
) -> Checkpoint {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        net: net_cfg.clone(),
        sde: sde.clone(),
        stft: stft.clone(),
        grid: grid.steps().to_vec(),
        k_frames,
        trained_steps: state.adam.step,
    };
    let mut ckpt = Checkpoint { header, arrays: Vec::new() };
    ckpt.push_params("theta", &state.theta);
    ckpt.push_params("ema", &state.ema.shadow);
    ckpt.push_params("adam.m", &ParamVec { data: state.adam.m.clone() });
    ckpt.push_params("adam.v", &ParamVec { data: state.adam.v.clone() });
    ckpt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dbuffer::build_perturbed_input;
    use ndarray::Array2;
    use rand::prelude::*;

    fn grids(f: usize, k: usize, seed: u64) -> (Array2<Complex64>, Array2<Complex64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array2::from_shape_fn((f, k), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let b = Array2::from_shape_fn((f, k), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        (a, b)
    }

    #[test]
    fn dsm_loss_zero_at_optimum() {
        let (z, _) = grids(4, 3, 1);
        let sigmas = Array2::from_elem((4, 3), 0.5);
        let optimal = Array2::from_shape_fn((4, 3), |(f, j)| -z[[f, j]] / sigmas[[f, j]]);
        let loss = dsm_loss(optimal.view(), z.view(), sigmas.view()).unwrap();
        assert!(loss < 1e-28);
    }

    #[test]
    fn dsm_loss_sigma_scaling() {
        let (z, _) = grids(4, 3, 2);
        let zero = Array2::zeros((4, 3));
        let s1 = Array2::from_elem((4, 3), 0.3);
        let s2 = Array2::from_elem((4, 3), 0.6);
        let l1 = dsm_loss(zero.view(), z.view(), s1.view()).unwrap();
        let l2 = dsm_loss(zero.view(), z.view(), s2.view()).unwrap();
        assert!((l1 / l2 - 4.0).abs() < 1e-12, "doubling sigma quarters the zero-score loss");
    }

    #[test]
    fn dsm_loss_rejects_zero_sigma() {
        let (z, _) = grids(2, 2, 3);
        let zero = Array2::zeros((2, 2));
        let mut sig = Array2::from_elem((2, 2), 0.5);
        sig[[1, 1]] = 0.0;
        assert!(matches!(
            dsm_loss(zero.view(), z.view(), sig.view()),
            Err(TrainError::ZeroSigma(_))
        ));
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut theta = vec![1.0, -2.0, 0.5];
        let grad = vec![0.0; 3];
        let mut state = AdamState::new(3);
        adam_step(&mut theta, &grad, &mut state, 0.1);
        assert_eq!(theta, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut theta = vec![1.0];
        let g = 0.5;
        let mut state = AdamState::new(1);
        adam_step(&mut theta, &[g], &mut state, 0.1);
        let m_hat = (1.0 - ADAM_BETA1) * g / (1.0 - ADAM_BETA1);
        let v_hat = (1.0 - ADAM_BETA2) * g * g / (1.0 - ADAM_BETA2);
        let expect = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + ADAM_EPS);
        assert!((theta[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        let mut theta = vec![0.0];
        let mut state = AdamState::new(1);
        let mut prev = theta[0];
        let mut last_step = 0.0;
        for _ in 0..500 {
            adam_step(&mut theta, &[2.0], &mut state, 0.01);
            let step = prev - theta[0];
            assert!(step > 0.0, "movement is monotone against the gradient");
            last_step = step;
            prev = theta[0];
        }
        assert!((last_step - 0.01).abs() < 1e-4, "step magnitude approaches lr, got {last_step}");
    }

    #[test]
    fn ema_recursion_exact() {
        let start = [0.0, 4.0];
        let theta = ParamVec { data: vec![2.0, -1.0] };
        let mut ema = EmaShadow { shadow: ParamVec { data: start.to_vec() } };
        let d = 0.9;
        let n = 25;
        for _ in 0..n {
            ema.update(&theta, d);
        }
        for i in 0..2 {
            let expect = theta.data[i] + d.powi(n) * (start[i] - theta.data[i]);
            assert!((ema.shadow.data[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_decay_zero_tracks_theta() {
        let theta = ParamVec { data: vec![3.0, 7.0] };
        let mut ema = EmaShadow { shadow: ParamVec { data: vec![0.0, 0.0] } };
        ema.update(&theta, 0.0);
        assert_eq!(ema.shadow.data, theta.data);
    }

    fn tiny_setup() -> (NetConfig, SdeParams, TrainConfig) {
        let net = NetConfig { channels: 4, depth: 1, kernel: 3, time_embed_dim: 8 };
        let sde = SdeParams::bbed_paper();
        let cfg = TrainConfig {
            lr: 3e-3,
            batch_size: 2,
            ema_decay: 0.9,
            epochs: 1,
            seed: 5,
            k_frames: 12,
            buffer: 4,
            grad_clip: None,
        };
        (net, sde, cfg)
    }

    #[test]
    fn loss_gradient_matches_finite_differences_end_to_end() {
        let (net, sde, _) = tiny_setup();
        let mut theta = net.init_params(8, false);
        let (x0, y) = grids(8, 12, 21);
        let grid = TimeGrid::linear(4, sde.t_eps, sde.t_rev).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = build_perturbed_input(x0.view(), y.view(), &grid, &sde, &mut rng).unwrap();

        let (_, grad) = example_loss_and_grad(&net, &theta, &sde, &ex).unwrap();
        let mut coord_rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-3;
        // 50 random coordinates plus every skip-gate coordinate.
        let gate_range = net.layout().range_of("gate.w0").unwrap().start..theta.len();
        let coords: Vec<usize> = (0..50)
            .map(|_| coord_rng.gen_range(0..theta.len()))
            .chain(gate_range)
            .collect();
        for i in coords {
            let orig = theta.data[i];
            theta.data[i] = orig + h;
            let (lp, _) = example_loss_and_grad(&net, &theta, &sde, &ex).unwrap();
            theta.data[i] = orig - h;
            let (lm, _) = example_loss_and_grad(&net, &theta, &sde, &ex).unwrap();
            theta.data[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grad.data[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-4, "coord {i}: fd={fd} analytic={an}");
        }
    }

    #[test]
    fn overfit_single_example_halves_loss() {
        let (net, sde, mut cfg) = tiny_setup();
        cfg.batch_size = 1;
        let (clean, noisy) = grids(8, 12, 31);
        let dataset = vec![(clean, noisy)];
        let mut state = TrainState::new(&net, cfg.seed);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let rows = train_epoch(&mut state, &dataset, &net, &sde, &cfg, 0).unwrap();
            let loss = rows.last().unwrap().loss;
            first.get_or_insert(loss);
            last = loss;
        }
        let first = first.unwrap();
        assert!(
            last <= 0.5 * first,
            "expected >= 50% reduction, got {first} -> {last}"
        );
    }

    #[test]
    fn training_deterministic_under_seed() {
        let (net, sde, cfg) = tiny_setup();
        let dataset = vec![grids(8, 10, 41), grids(8, 14, 42)];
        let run = || {
            let mut state = TrainState::new(&net, cfg.seed);
            let mut losses = Vec::new();
            for epoch in 0..3 {
                let rows = train_epoch(&mut state, &dataset, &net, &sde, &cfg, epoch).unwrap();
                losses.extend(rows.into_iter().map(|r| r.loss));
            }
            (losses, state.theta)
        };
        let (l1, t1) = run();
        let (l2, t2) = run();
        assert_eq!(l1, l2, "loss traces are bitwise identical");
        assert_eq!(t1.data, t2.data);
    }

    #[test]
    fn ema_shadow_never_feeds_gradients() {
        // Corrupting the shadow must not change the parameter trajectory.
        let (net, sde, cfg) = tiny_setup();
        let dataset = vec![grids(8, 10, 61)];
        let run = |poison: bool| {
            let mut state = TrainState::new(&net, cfg.seed);
            if poison {
                for s in state.ema.shadow.data.iter_mut() {
                    *s = 42.0;
                }
            }
            for epoch in 0..3 {
                train_epoch(&mut state, &dataset, &net, &sde, &cfg, epoch).unwrap();
            }
            state.theta
        };
        assert_eq!(run(false).data, run(true).data);
    }

    #[test]
    fn checkpoint_roundtrip_resumes_without_jump() {
        let (net, sde, cfg) = tiny_setup();
        let dataset = vec![grids(8, 10, 51)];
        let mut state = TrainState::new(&net, cfg.seed);
        let mut before = 0.0;
        for epoch in 0..5 {
            let rows = train_epoch(&mut state, &dataset, &net, &sde, &cfg, epoch).unwrap();
            before = rows.last().unwrap().loss;
        }
        let grid = TimeGrid::linear(cfg.buffer, sde.t_eps, sde.t_rev).unwrap();
        let ckpt = make_checkpoint(&state, &net, &sde, &StftConfig::default(), &grid, cfg.k_frames);
        let bytes = ckpt.to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = TrainState::from_checkpoint(&loaded, cfg.seed).unwrap();
        let rows = train_epoch(&mut resumed, &dataset, &net, &sde, &cfg, 5).unwrap();
        let after = rows.first().unwrap().loss;
        assert!(
            after < before * 10.0,
            "resume continues without a >10x jump: {before} -> {after}"
        );
    }
}
