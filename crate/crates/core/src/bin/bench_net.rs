use diffusion_buffer::dbuffer::{stream_step, BufferState, TimeGrid};
use diffusion_buffer::metrics::si_sdr;
use diffusion_buffer::score::{ScoreError, ScoreFn};
use diffusion_buffer::sde::SdeParams;
use diffusion_buffer::spectral::{compress, decompress, istft, stft, ComplexSpectrogram, StftConfig};
use diffusion_buffer::stream::aligned_si_sdr;
use diffusion_buffer::synth::{make_pair, SynthSpec};
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::Cell;

/// Oracle with the true clean frames: score = (a*x0 + b*y - v)/sigma^2.
struct CheatScore {
    sde: SdeParams,
    x0: Array2<Complex64>,
    step: Cell<usize>,
}

impl ScoreFn for CheatScore {
    fn score(
        &self,
        v: ArrayView2<Complex64>,
        y: ArrayView2<Complex64>,
        times: &[f64],
    ) -> Result<Array2<Complex64>, ScoreError> {
        let (f_dim, k_frames) = v.dim();
        let b = times.len();
        let n = self.step.get(); // 0-based input column being processed
        self.step.set(n + 1);
        let mut out = Array2::zeros((f_dim, b));
        for (j, &t) in times.iter().enumerate() {
            let col = k_frames - b + j;
            let (a, bc) = self.sde.mean_coeffs(t)?;
            let s = self.sde.sigma(t)?;
            let global = n as i64 - b as i64 + j as i64 + 1;
            for fi in 0..f_dim {
                let x0 = if global >= 0 && (global as usize) < self.x0.ncols() {
                    self.x0[[fi, global as usize]]
                } else {
                    Complex64::new(0.0, 0.0)
                };
                let mu = x0 * a + y[[fi, col]] * bc;
                out[[fi, j]] = (mu - v[[fi, col]]) / (s * s);
            }
        }
        Ok(out)
    }
}

fn main() {
    let stft_cfg = StftConfig::default();
    let mut sde = SdeParams::bbed_paper();
    sde.t_eps = 0.1;
    let b = 20usize;
    let k = 48usize;
    let spec = SynthSpec {
        num_pairs: 36, duration_s: 1.2, seed: 3,
        f0_hz: (140.0, 200.0), am_hz: (1.5, 3.5), noise_alpha: (0.9, 0.9),
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut clips = Vec::new();
    for _ in 0..36 {
        let (c, n, _, _) = make_pair(&spec, &mut rng);
        clips.push((c, n));
    }
    let grid = TimeGrid::linear(b, sde.t_eps, sde.t_rev).unwrap();
    for idx in [30usize, 35] {
        let (clean, noisy) = &clips[idx];
        let comp = compress(&stft(noisy, &stft_cfg).unwrap(), &stft_cfg).unwrap();
        let comp_clean = compress(&stft(clean, &stft_cfg).unwrap(), &stft_cfg).unwrap();
        let cheat = CheatScore { sde: sde.clone(), x0: comp_clean.data.clone(), step: Cell::new(0) };
        let mut state = BufferState::new(comp.num_freqs(), k, grid.clone()).unwrap();
        let mut srng = ChaCha8Rng::seed_from_u64(99);
        let mut out = Array2::zeros(comp.data.dim());
        for col in 0..comp.data.ncols() {
            let frame = stream_step(&mut state, comp.data.column(col), &cheat, &sde, &mut srng).unwrap();
            out.column_mut(col).assign(&frame);
        }
        let dec = decompress(&ComplexSpectrogram::new(out, true), &stft_cfg).unwrap();
        let mut enhanced = istft(&dec, &stft_cfg).unwrap();
        let full_overlap = (comp.data.ncols() - 1) * stft_cfg.hop;
        enhanced.samples.truncate(noisy.samples.len().min(full_overlap));
        let shift = b * stft_cfg.hop;
        let skip = b * stft_cfg.hop;
        let enh = aligned_si_sdr(&clean.samples, &enhanced.samples, shift, skip).unwrap();
        let usable = (enhanced.samples.len() - shift - skip).min(clean.samples.len() - skip);
        let base = si_sdr(&clean.samples[skip..skip + usable], &noisy.samples[skip..skip + usable]).unwrap();
        println!("pair {idx}: noisy {base:.2} dB -> cheat-enhanced {enh:.2} dB");
    }
}
