//! Time-domain audio <-> compressed complex STFT conversion.
//!
//! Frames are aligned causally: an implied zero prefix of
//! `window_len - hop` samples precedes the signal, so frame `k` (0-based)
//! is complete exactly when `(k + 1) * hop` real samples have arrived.
//! One new frame per hop, which is what the streaming loop consumes.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("empty signal")]
    EmptySignal,
    #[error("invalid stft config: {0}")]
    InvalidConfig(String),
    #[error("decompress first: operation requires an uncompressed spectrogram")]
    Compressed,
    #[error("already compressed")]
    AlreadyCompressed,
    #[error("already decompressed")]
    AlreadyDecompressed,
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
}

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SpectralError> {
        if sample_rate == 0 {
            return Err(SpectralError::InvalidConfig("sample_rate must be > 0".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(SpectralError::NonFiniteSample(i));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Analysis/synthesis parameters shared by all spectrogram consumers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub compress_beta: f64,
    pub compress_alpha: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 510,
            hop: 256,
            fft_len: 510,
            compress_beta: 0.15,
            compress_alpha: 0.5,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), SpectralError> {
        if self.hop == 0 || self.hop > self.window_len {
            return Err(SpectralError::InvalidConfig(format!(
                "hop must satisfy 0 < hop <= window_len, got hop={} window_len={}",
                self.hop, self.window_len
            )));
        }
        if self.fft_len < self.window_len {
            return Err(SpectralError::InvalidConfig(format!(
                "fft_len ({}) must be >= window_len ({})",
                self.fft_len, self.window_len
            )));
        }
        if self.fft_len % 2 != 0 {
            return Err(SpectralError::InvalidConfig(format!(
                "fft_len must be even, got {}",
                self.fft_len
            )));
        }
        if !(self.compress_beta > 0.0) {
            return Err(SpectralError::InvalidConfig("compress_beta must be > 0".into()));
        }
        if !(self.compress_alpha > 0.0 && self.compress_alpha <= 1.0) {
            return Err(SpectralError::InvalidConfig(
                "compress_alpha must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Number of frequency rows in the one-sided spectrum.
    pub fn num_freqs(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Hop duration in milliseconds.
    pub fn hop_ms(&self, sample_rate: u32) -> f64 {
        1000.0 * self.hop as f64 / sample_rate as f64
    }

    /// Periodic Hann window of length `window_len`.
    pub fn window(&self) -> Vec<f64> {
        let n = self.window_len as f64;
        (0..self.window_len)
            .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n).cos()))
            .collect()
    }

    /// Frames produced for a signal of `len` samples (one per started hop).
    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }
}

/// F x K grid of complex STFT coefficients. `compressed` tracks whether the
/// magnitude-compression map has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Array2<Complex64>,
    pub compressed: bool,
}

impl ComplexSpectrogram {
    pub fn new(data: Array2<Complex64>, compressed: bool) -> Self {
        Self { data, compressed }
    }

    pub fn num_freqs(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.data.ncols()
    }
}

/// Forward STFT. Frame `k` (0-based) covers padded samples
/// `[k*hop, k*hop + window_len)` where the padded signal is
/// `[0; window_len-hop] ++ samples ++ [0; K*hop - len]`.
pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<ComplexSpectrogram, SpectralError> {
    cfg.validate()?;
    if clip.samples.is_empty() {
        return Err(SpectralError::EmptySignal);
    }
    let len = clip.samples.len();
    let num_frames = cfg.num_frames(len);
    let prefix = cfg.window_len - cfg.hop;
    let padded_len = prefix + num_frames * cfg.hop + (cfg.window_len - cfg.hop);
    let mut padded = vec![0.0f64; padded_len];
    padded[prefix..prefix + len].copy_from_slice(&clip.samples);

    let window = cfg.window();
    let num_freqs = cfg.num_freqs();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_len];
    let mut data = Array2::zeros((num_freqs, num_frames));

    for k in 0..num_frames {
        let start = k * cfg.hop;
        for i in 0..cfg.window_len {
            buf[i] = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        for b in buf.iter_mut().skip(cfg.window_len) {
            *b = Complex64::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        for (f, &v) in buf.iter().take(num_freqs).enumerate() {
            data[[f, k]] = v;
        }
    }
    Ok(ComplexSpectrogram::new(data, false))
}

/// Inverse STFT via least-squares weighted overlap-add. Returns `K*hop`
/// samples, aligned so sample `n` corresponds to input sample `n` of the
/// clip that produced the spectrogram.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig) -> Result<AudioClip, SpectralError> {
    cfg.validate()?;
    if spec.compressed {
        return Err(SpectralError::Compressed);
    }
    let num_freqs = cfg.num_freqs();
    if spec.num_freqs() != num_freqs {
        return Err(SpectralError::InvalidConfig(format!(
            "spectrogram has {} rows, config expects {}",
            spec.num_freqs(),
            num_freqs
        )));
    }
    let num_frames = spec.num_frames();
    let window = cfg.window();
    let prefix = cfg.window_len - cfg.hop;
    let padded_len = prefix + num_frames * cfg.hop + (cfg.window_len - cfg.hop);
    let mut acc = vec![0.0f64; padded_len];
    let mut denom = vec![0.0f64; padded_len];

    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(cfg.fft_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_len];
    let scale = 1.0 / cfg.fft_len as f64;

    for k in 0..num_frames {
        // Rebuild the full Hermitian spectrum from the one-sided rows.
        for f in 0..num_freqs {
            buf[f] = spec.data[[f, k]];
        }
        for f in num_freqs..cfg.fft_len {
            buf[f] = spec.data[[cfg.fft_len - f, k]].conj();
        }
        ifft.process(&mut buf);
        let start = k * cfg.hop;
        for i in 0..cfg.window_len {
            let x = buf[i].re * scale;
            acc[start + i] += window[i] * x;
            denom[start + i] += window[i] * window[i];
        }
    }

    let out_len = num_frames * cfg.hop;
    let mut samples = vec![0.0f64; out_len];
    for (n, s) in samples.iter_mut().enumerate() {
        let p = n + prefix;
        if denom[p] > 1e-12 {
            *s = acc[p] / denom[p];
        }
    }
    AudioClip::new(samples, 16_000)
}

fn compress_value(v: Complex64, beta: f64, alpha: f64) -> Complex64 {
    let mag = v.norm();
    if mag == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        v * (beta * mag.powf(alpha - 1.0))
    }
}

fn decompress_value(v: Complex64, beta: f64, alpha: f64) -> Complex64 {
    let mag = v.norm();
    if mag == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        // Inverse of beta*|v|^alpha with phase preserved.
        v * ((mag / beta).powf(1.0 / alpha) / mag)
    }
}

/// Elementwise magnitude compression `v -> beta*|v|^alpha * e^{i angle(v)}`.
pub fn compress(
    spec: &ComplexSpectrogram,
    cfg: &StftConfig,
) -> Result<ComplexSpectrogram, SpectralError> {
    if spec.compressed {
        return Err(SpectralError::AlreadyCompressed);
    }
    let data = spec
        .data
        .map(|&v| compress_value(v, cfg.compress_beta, cfg.compress_alpha));
    Ok(ComplexSpectrogram::new(data, true))
}

/// Inverse of [`compress`].
pub fn decompress(
    spec: &ComplexSpectrogram,
    cfg: &StftConfig,
) -> Result<ComplexSpectrogram, SpectralError> {
    if !spec.compressed {
        return Err(SpectralError::AlreadyDecompressed);
    }
    let data = spec
        .data
        .map(|&v| decompress_value(v, cfg.compress_beta, cfg.compress_alpha));
    Ok(ComplexSpectrogram::new(data, false))
}

/// Shared FFT plan for repeated single-frame analysis in the streaming path.
pub struct FrameAnalyzer {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn rustfft::Fft<f64>>,
}

impl FrameAnalyzer {
    pub fn new(cfg: StftConfig) -> Result<Self, SpectralError> {
        cfg.validate()?;
        let window = cfg.window();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_len);
        Ok(Self { cfg, window, fft })
    }

    /// Analyze one frame from `window_len` samples (already aligned).
    pub fn analyze(&self, samples: &[f64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.cfg.fft_len];
        for i in 0..self.cfg.window_len.min(samples.len()) {
            buf[i] = Complex64::new(samples[i] * self.window[i], 0.0);
        }
        self.fft.process(&mut buf);
        buf.truncate(self.cfg.num_freqs());
        buf
    }
}
