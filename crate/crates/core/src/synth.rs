//! Synthetic clean/noisy pair generator: amplitude-modulated harmonic tone
//! complexes plus colored noise at a drawn SNR. A desk-scale stand-in for a
//! recorded corpus.

use crate::spectral::AudioClip;
use crate::wav::{self, WavError, SAMPLE_RATE};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("manifest serialization failed: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub num_pairs: usize,
    pub duration_s: f64,
    pub seed: u64,
    /// SNR range in dB, drawn uniformly per pair.
    pub snr_db: (f64, f64),
    /// Fundamental frequency range in Hz.
    pub f0_hz: (f64, f64),
    /// Amplitude-modulation rate range in Hz.
    pub am_hz: (f64, f64),
    /// One-pole noise-color coefficient range.
    pub noise_alpha: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_pairs: 100,
            duration_s: 1.2,
            seed: 0,
            snr_db: (0.0, 15.0),
            f0_hz: (110.0, 280.0),
            am_hz: (1.5, 6.0),
            noise_alpha: (0.8, 0.95),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.num_pairs == 0 {
            return Err(SynthError::InvalidSpec("num_pairs must be >= 1".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(SynthError::InvalidSpec("duration_s must be > 0".into()));
        }
        if self.snr_db.1 < self.snr_db.0 {
            return Err(SynthError::InvalidSpec("snr_db range is inverted".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub clean: String,
    pub noisy: String,
    pub snr_db: f64,
    pub f0_hz: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub pairs: Vec<ManifestEntry>,
}

/// One synthetic pair, clean and noisy at the exact requested SNR.
pub fn make_pair(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (AudioClip, AudioClip, f64, f64) {
    let n = (spec.duration_s * SAMPLE_RATE as f64).round() as usize;
    let f0 = rng.gen_range(spec.f0_hz.0..spec.f0_hz.1);
    let am_hz = rng.gen_range(spec.am_hz.0..=spec.am_hz.1);
    let am_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let n_harm = ((4000.0 / f0).floor() as usize).clamp(1, 10);
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();

    let mut clean = vec![0.0f64; n];
    for (i, s) in clean.iter_mut().enumerate() {
        let t = i as f64 / SAMPLE_RATE as f64;
        let am = 0.55 + 0.45 * (std::f64::consts::TAU * am_hz * t + am_phase).sin();
        let mut v = 0.0;
        for (h, &ph) in phases.iter().enumerate() {
            let freq = f0 * (h + 1) as f64;
            v += (std::f64::consts::TAU * freq * t + ph).sin() / (h + 1) as f64;
        }
        *s = am * v;
    }
    let peak = clean.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-9);
    let gain = 0.3 / peak;
    for s in clean.iter_mut() {
        *s *= gain;
    }

    // Colored noise: one-pole lowpass over white Gaussian.
    let alpha: f64 = rng.gen_range(spec.noise_alpha.0..=spec.noise_alpha.1);
    let mut noise = vec![0.0f64; n];
    let mut prev = 0.0;
    let scale = (1.0 - alpha * alpha).sqrt();
    for v in noise.iter_mut() {
        let w: f64 = rng.sample(StandardNormal);
        prev = alpha * prev + scale * w;
        *v = prev;
    }

    let snr_db = rng.gen_range(spec.snr_db.0..=spec.snr_db.1);
    let p_clean: f64 = clean.iter().map(|v| v * v).sum();
    let p_noise: f64 = noise.iter().map(|v| v * v).sum();
    let g = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut noisy: Vec<f64> = clean.iter().zip(&noise).map(|(c, w)| c + g * w).collect();

    // Keep PCM16 headroom without touching the SNR: scale both signals.
    let peak = noisy.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.97 {
        let s = 0.97 / peak;
        for v in noisy.iter_mut() {
            *v *= s;
        }
        for v in clean.iter_mut() {
            *v *= s;
        }
    }

    (
        AudioClip { samples: clean, sample_rate: SAMPLE_RATE },
        AudioClip { samples: noisy, sample_rate: SAMPLE_RATE },
        snr_db,
        f0,
    )
}

/// Generate `num_pairs` WAV pairs plus `manifest.json` in `out_dir`.
pub fn make_synth_data(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest, SynthError> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|source| SynthError::Io { path: out_dir.display().to_string(), source })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs = Vec::with_capacity(spec.num_pairs);
    for i in 0..spec.num_pairs {
        let (clean, noisy, snr_db, f0) = make_pair(spec, &mut rng);
        let clean_name = format!("clean_{i:04}.wav");
        let noisy_name = format!("noisy_{i:04}.wav");
        wav::write_wav(&out_dir.join(&clean_name), &clean)?;
        wav::write_wav(&out_dir.join(&noisy_name), &noisy)?;
        pairs.push(ManifestEntry { clean: clean_name, noisy: noisy_name, snr_db, f0_hz: f0 });
    }
    let manifest = Manifest { spec: spec.clone(), pairs };
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|source| SynthError::Io { path: path.display().to_string(), source })?;
    Ok(manifest)
}

/// Load a generated dataset back as (clean, noisy) clips.
pub fn load_dataset(dir: &Path) -> Result<Vec<(AudioClip, AudioClip, ManifestEntry)>, SynthError> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path)
        .map_err(|source| SynthError::Io { path: path.display().to_string(), source })?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    let mut out = Vec::with_capacity(manifest.pairs.len());
    for entry in manifest.pairs {
        let clean = wav::read_wav(&dir.join(&entry.clean))?;
        let noisy = wav::read_wav(&dir.join(&entry.noisy))?;
        out.push((clean, noisy, entry));
    }
    Ok(out)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

/// Measured SNR of a pair in dB (noise = noisy - clean).
pub fn measured_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let p_clean: f64 = clean.iter().map(|v| v * v).sum();
    let p_noise: f64 = clean.iter().zip(noisy).map(|(c, n)| (n - c) * (n - c)).sum();
    10.0 * (p_clean / p_noise).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_hits_requested_snr() {
        let spec = SynthSpec { snr_db: (0.0, 0.0), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (clean, noisy, snr, _) = make_pair(&spec, &mut rng);
        assert_eq!(snr, 0.0);
        let measured = measured_snr_db(&clean.samples, &noisy.samples);
        assert!(measured.abs() < 0.01, "pre-quantization SNR is exact, got {measured}");
    }

    #[test]
    fn snr_survives_pcm16_within_tenth_db() {
        let spec = SynthSpec { snr_db: (0.0, 0.0), num_pairs: 1, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        make_synth_data(&spec, dir.path()).unwrap();
        let pairs = load_dataset(dir.path()).unwrap();
        let (clean, noisy, _) = &pairs[0];
        let measured = measured_snr_db(&clean.samples, &noisy.samples);
        assert!(measured.abs() < 0.1, "quantized SNR within +-0.1 dB, got {measured}");
    }

    #[test]
    fn deterministic_under_seed() {
        let spec = SynthSpec { num_pairs: 2, ..Default::default() };
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = make_pair(&spec, &mut r1);
        let b = make_pair(&spec, &mut r2);
        assert_eq!(a.0.samples, b.0.samples);
        assert_eq!(a.1.samples, b.1.samples);
    }

    #[test]
    fn requested_pairs_yield_files_and_manifest() {
        let spec = SynthSpec { num_pairs: 10, duration_s: 0.2, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let manifest = make_synth_data(&spec, dir.path()).unwrap();
        assert_eq!(manifest.pairs.len(), 10);
        let wavs = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().map(|x| x == "wav").unwrap_or(false)
            })
            .count();
        assert_eq!(wavs, 20);
        assert!(manifest_path(dir.path()).exists());
    }
}
