//! Online speech enhancement with a sliding-window diffusion buffer.
//!
//! The buffer holds the last `B` STFT frames of a noisy stream at ascending
//! diffusion times. Each incoming frame triggers exactly one score-model
//! evaluation and one reverse step per buffered frame, so a frame leaving
//! the buffer has been denoised through the full reverse schedule. Latency
//! is `B` hops; compute per hop is a single network call.
//!
//! Crate layout:
//! - [`spectral`]: STFT/ISTFT, magnitude compression, WAV I/O.
//! - [`sde`]: forward SDE parameterizations (OUVE, BBED), closed-form
//!   perturbation-kernel moments, state sampling, reverse Euler–Maruyama step.
//! - [`score`]: the score function — an analytic Gaussian oracle and a small
//!   trainable network with per-frame time conditioning, plus checkpoints.
//! - [`dbuffer`]: perturbed-input construction, training batches, and the
//!   online streaming state machine.
//! - [`train`]: denoising score matching loss, Adam, EMA, training loop.
//! - [`stream`]: utterance-based baseline, RTF/latency measurement, the
//!   end-to-end enhancement job.
//! - [`metrics`]: SI-SDR and segmental SNR.
//! - [`synth`]: synthetic clean/noisy pair generator for desk-scale runs.
//! - [`verify`]: independent numerical oracles (quadrature, RK4, Monte Carlo,
//!   replay, finite differences) and the named check suite.

pub mod config;
pub mod dbuffer;
pub mod metrics;
pub mod sde;
pub mod score;
pub mod spectral;
pub mod stream;
pub mod synth;
pub mod train;
pub mod verify;
pub mod wav;

pub use dbuffer::{BufferState, TimeGrid, TrainExample};
pub use sde::{KernelMoments, SdeKind, SdeParams};
pub use score::{AnalyticScore, LearnedScore, NetConfig, ScoreFn};
pub use spectral::{AudioClip, ComplexSpectrogram, StftConfig};
