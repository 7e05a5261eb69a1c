//! Reference-based quality metrics: scale-invariant SDR and segmental SNR.
//!
//! Both take already-aligned signals; latency compensation (shifting the
//! enhanced stream back by `B` frames) is the caller's job.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("signals have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("reference has zero energy")]
    ZeroReference,
    #[error("signals are empty")]
    Empty,
}

/// Cap applied where the residual vanishes (identical signals).
pub const SI_SDR_CAP_DB: f64 = 100.0;
pub const SEG_SNR_MIN_DB: f64 = -10.0;
pub const SEG_SNR_MAX_DB: f64 = 35.0;

/// Scale-invariant SDR in dB: project the estimate onto the reference and
/// compare projected energy to residual energy.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64, MetricError> {
    if reference.len() != estimate.len() {
        return Err(MetricError::LengthMismatch(reference.len(), estimate.len()));
    }
    if reference.is_empty() {
        return Err(MetricError::Empty);
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy <= 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let dot: f64 = reference.iter().zip(estimate).map(|(r, e)| r * e).sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let residual: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| {
            let d = e - alpha * r;
            d * d
        })
        .sum();
    if residual <= target_energy * 10f64.powf(-SI_SDR_CAP_DB / 10.0) {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (target_energy / residual).log10()).min(SI_SDR_CAP_DB))
}

/// Segmental SNR in dB: mean over frames of the per-frame SNR, each frame
/// clamped to `[-10, 35]` dB. Frames without reference energy are skipped.
pub fn seg_snr(reference: &[f64], estimate: &[f64], frame_ms: f64, sample_rate: u32) -> Result<f64, MetricError> {
    if reference.len() != estimate.len() {
        return Err(MetricError::LengthMismatch(reference.len(), estimate.len()));
    }
    if reference.is_empty() {
        return Err(MetricError::Empty);
    }
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy <= 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let frame = ((frame_ms / 1000.0) * sample_rate as f64).round().max(1.0) as usize;
    let mut acc = 0.0;
    let mut count = 0usize;
    for (rf, ef) in reference.chunks(frame).zip(estimate.chunks(frame)) {
        let re: f64 = rf.iter().map(|r| r * r).sum();
        if re <= 0.0 {
            continue;
        }
        let err: f64 = rf.iter().zip(ef).map(|(r, e)| (r - e) * (r - e)).sum();
        let snr = if err <= 0.0 {
            SEG_SNR_MAX_DB
        } else {
            (10.0 * (re / err).log10()).clamp(SEG_SNR_MIN_DB, SEG_SNR_MAX_DB)
        };
        acc += snr;
        count += 1;
    }
    if count == 0 {
        return Err(MetricError::ZeroReference);
    }
    Ok(acc / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
    }

    #[test]
    fn identical_signals_hit_cap() {
        let x = noise(16_000, 1);
        assert_eq!(si_sdr(&x, &x).unwrap(), SI_SDR_CAP_DB);
        assert_eq!(seg_snr(&x, &x, 32.0, 16_000).unwrap(), SEG_SNR_MAX_DB);
    }

    #[test]
    fn si_sdr_scale_invariant() {
        let x = noise(8_000, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est: Vec<f64> = x.iter().map(|v| v + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let est2: Vec<f64> = est.iter().map(|v| 2.0 * v).collect();
        let a = si_sdr(&x, &est).unwrap();
        let b = si_sdr(&x, &est2).unwrap();
        assert!((a - b).abs() < 1e-9, "scaling the estimate changes nothing: {a} vs {b}");
    }

    #[test]
    fn equal_power_noise_is_near_zero_db() {
        let x = noise(16_000, 4);
        let n = noise(16_000, 5);
        let px: f64 = x.iter().map(|v| v * v).sum();
        let pn: f64 = n.iter().map(|v| v * v).sum();
        let scale = (px / pn).sqrt();
        let est: Vec<f64> = x.iter().zip(&n).map(|(v, w)| v + scale * w).collect();
        let sdr = si_sdr(&x, &est).unwrap();
        assert!(sdr.abs() < 0.5, "equal-power noise gives ~0 dB, got {sdr}");
    }

    #[test]
    fn zero_reference_rejected() {
        let z = vec![0.0; 100];
        let e = noise(100, 6);
        assert!(matches!(si_sdr(&z, &e), Err(MetricError::ZeroReference)));
        assert!(matches!(seg_snr(&z, &e, 32.0, 16_000), Err(MetricError::ZeroReference)));
    }

    #[test]
    fn seg_snr_pure_noise_hits_floor() {
        // Estimate = reference + enormous noise: every frame clamps at -10 dB.
        let x = noise(16_000, 7);
        let n = noise(16_000, 8);
        let est: Vec<f64> = x.iter().zip(&n).map(|(v, w)| v + 100.0 * w).collect();
        let snr = seg_snr(&x, &est, 32.0, 16_000).unwrap();
        assert!((snr - SEG_SNR_MIN_DB).abs() < 0.2, "got {snr}");
    }

    #[test]
    fn doubling_noise_power_drops_three_db() {
        let x: Vec<f64> = noise(64_000, 9).iter().map(|v| 4.0 * v).collect();
        let n = noise(64_000, 10);
        let est1: Vec<f64> = x.iter().zip(&n).map(|(v, w)| v + w).collect();
        let est2: Vec<f64> = x.iter().zip(&n).map(|(v, w)| v + std::f64::consts::SQRT_2 * w).collect();
        let a = seg_snr(&x, &est1, 32.0, 16_000).unwrap();
        let b = seg_snr(&x, &est2, 32.0, 16_000).unwrap();
        assert!(((a - b) - 3.0102999566398).abs() < 0.15, "delta {}", a - b);
    }

    proptest::proptest! {
        #[test]
        fn si_sdr_invariant_under_positive_scaling(scale in 0.01f64..100.0, seed in 0u64..50) {
            let x = noise(512, seed);
            let e = noise(512, seed + 1000);
            let est: Vec<f64> = x.iter().zip(&e).map(|(v, w)| v + 0.5 * w).collect();
            let scaled: Vec<f64> = est.iter().map(|v| v * scale).collect();
            let a = si_sdr(&x, &est).unwrap();
            let b = si_sdr(&x, &scaled).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-8);
        }

        #[test]
        fn seg_snr_bounded_by_clamps(seed in 0u64..50) {
            let x = noise(2048, seed);
            let e = noise(2048, seed + 500);
            let snr = seg_snr(&x, &e, 32.0, 16_000).unwrap();
            proptest::prop_assert!((SEG_SNR_MIN_DB..=SEG_SNR_MAX_DB).contains(&snr));
        }
    }
}
