//! Real-time harness: the utterance-based baseline, per-hop engines, RTF and
//! latency measurement, and the end-to-end enhancement job.

use crate::dbuffer::{stream_step, BufferError, BufferState, TimeGrid};
use crate::metrics::{self, MetricError};
use crate::score::{
    Checkpoint, CheckpointError, CountingScore, LearnedScore, ScoreError, ScoreFn,
};
use crate::sde::{complex_standard_normal, reverse_step, SdeError, SdeParams};
use crate::spectral::{self, SpectralError, StftConfig};
use crate::wav::{self, WavError};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("incompatible checkpoint:\n{}", .diffs.join("\n"))]
    IncompatibleCheckpoint { diffs: Vec<String> },
    #[error("need more steps than warmup: got {steps}, warmup {warmup}")]
    TooFewSteps { steps: usize, warmup: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Utterance-based baseline: initialize the whole spectrogram at the reverse
/// starting point and take `n_steps` reverse steps over a uniform grid from
/// `t_rev` down through `t_eps` to 0, calling the score once per step on the
/// entire grid. The final step is noiseless.
pub fn vanilla_enhance<S: ScoreFn + ?Sized, R: Rng + ?Sized>(
    y: ArrayView2<Complex64>,
    score_fn: &S,
    params: &SdeParams,
    n_steps: usize,
    rng: &mut R,
) -> Result<Array2<Complex64>, StreamError> {
    if n_steps < 1 {
        return Err(StreamError::InvalidArg("n_steps must be >= 1".into()));
    }
    let (f_dim, k_frames) = y.dim();
    let sigma_t = params.sigma(params.t_rev)?;
    let mut x = y.to_owned();
    for v in x.iter_mut() {
        *v += complex_standard_normal(rng) * sigma_t;
    }
    // Ascending grid eps..t_rev, walked downwards; the step off eps lands at 0.
    let grid = TimeGrid::linear(n_steps, params.t_eps, params.t_rev)?;
    for s in 0..n_steps {
        let idx = n_steps - 1 - s;
        let t_from = grid.steps()[idx];
        let t_to = if idx == 0 { 0.0 } else { grid.steps()[idx - 1] };
        let times = vec![t_from; k_frames];
        let score = score_fn.score(x.view(), y, &times)?;
        if score.dim() != (f_dim, k_frames) {
            return Err(StreamError::InvalidArg(format!(
                "score output is {:?}, expected ({f_dim}, {k_frames})",
                score.dim()
            )));
        }
        let add_noise = idx != 0;
        for k in 0..k_frames {
            let col = x.column(k).to_owned();
            let stepped = reverse_step(
                params,
                score.column(k),
                col.view(),
                y.column(k),
                t_from,
                t_to,
                rng,
                add_noise,
            )?;
            x.column_mut(k).assign(&stepped);
        }
    }
    Ok(x)
}

/// Per-step timing summary plus the latency bookkeeping.
#[derive(Debug, Clone)]
pub struct RtfReport {
    pub per_step_ms: Vec<f64>,
    pub mean_step_ms: f64,
    pub median_step_ms: f64,
    pub hop_ms: f64,
    /// mean step time / hop duration.
    pub rtf: f64,
    pub rtf_median: f64,
    /// Buffer length B (frames of algorithmic delay).
    pub buffer_frames: usize,
    /// B * h_s.
    pub algorithmic_latency_ms: f64,
    /// Algorithmic latency + one hop + mean compute per hop.
    pub io_latency_ms: f64,
    pub score_calls: u64,
    pub steps_measured: usize,
}

impl RtfReport {
    fn from_times(
        mut times_ms: Vec<f64>,
        hop_ms: f64,
        buffer_frames: usize,
        score_calls: u64,
    ) -> Self {
        let mean = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
        let mut sorted = times_ms.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        times_ms.shrink_to_fit();
        let algorithmic = buffer_frames as f64 * hop_ms;
        Self {
            steps_measured: times_ms.len(),
            mean_step_ms: mean,
            median_step_ms: median,
            hop_ms,
            rtf: mean / hop_ms,
            rtf_median: median / hop_ms,
            buffer_frames,
            algorithmic_latency_ms: algorithmic,
            io_latency_ms: algorithmic + hop_ms + mean,
            score_calls,
            per_step_ms: times_ms,
        }
    }
}

/// Anything that consumes one frame per hop.
pub trait HopEngine {
    fn step(&mut self, frame: ArrayView1<Complex64>) -> Result<Array1<Complex64>, StreamError>;
    fn score_calls(&self) -> u64;
    /// Frames of algorithmic delay this engine imposes.
    fn delay_frames(&self) -> usize;
}

/// Diffusion-buffer engine: one score call per hop.
pub struct DbEngine<'a> {
    pub state: BufferState,
    score_fn: &'a dyn ScoreFn,
    params: SdeParams,
    rng: ChaCha8Rng,
    calls: u64,
}

impl<'a> DbEngine<'a> {
    pub fn new(
        num_freqs: usize,
        k_frames: usize,
        grid: TimeGrid,
        score_fn: &'a dyn ScoreFn,
        params: SdeParams,
        seed: u64,
    ) -> Result<Self, StreamError> {
        let state = BufferState::new(num_freqs, k_frames, grid)?;
        Ok(Self { state, score_fn, params, rng: ChaCha8Rng::seed_from_u64(seed), calls: 0 })
    }
}

impl HopEngine for DbEngine<'_> {
    fn step(&mut self, frame: ArrayView1<Complex64>) -> Result<Array1<Complex64>, StreamError> {
        let counted = CountingScore::new(self.score_fn);
        let out = stream_step(&mut self.state, frame, &counted, &self.params, &mut self.rng)?;
        self.calls += counted.calls();
        Ok(out)
    }

    fn score_calls(&self) -> u64 {
        self.calls
    }

    fn delay_frames(&self) -> usize {
        self.state.grid.len()
    }
}

/// Simulation of the per-hop cost a vanilla (utterance-based) model would
/// incur on streamed data: every hop re-runs all `n_steps` reverse steps on
/// the rolling `K`-frame chunk, so the score is called `n_steps` times per
/// hop instead of once.
pub struct VanillaPerHopEngine<'a> {
    window: Array2<Complex64>,
    n_steps: usize,
    score_fn: &'a dyn ScoreFn,
    params: SdeParams,
    rng: ChaCha8Rng,
    calls: u64,
}

impl<'a> VanillaPerHopEngine<'a> {
    pub fn new(
        num_freqs: usize,
        k_frames: usize,
        n_steps: usize,
        score_fn: &'a dyn ScoreFn,
        params: SdeParams,
        seed: u64,
    ) -> Result<Self, StreamError> {
        if n_steps < 1 {
            return Err(StreamError::InvalidArg("n_steps must be >= 1".into()));
        }
        Ok(Self {
            window: Array2::zeros((num_freqs, k_frames)),
            n_steps,
            score_fn,
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            calls: 0,
        })
    }
}

impl HopEngine for VanillaPerHopEngine<'_> {
    fn step(&mut self, frame: ArrayView1<Complex64>) -> Result<Array1<Complex64>, StreamError> {
        let k = self.window.ncols();
        for f in 0..self.window.nrows() {
            for i in 0..k - 1 {
                self.window[[f, i]] = self.window[[f, i + 1]];
            }
            self.window[[f, k - 1]] = frame[f];
        }
        let counted = CountingScore::new(self.score_fn);
        let out = vanilla_enhance(
            self.window.view(),
            &counted,
            &self.params,
            self.n_steps,
            &mut self.rng,
        )?;
        self.calls += counted.calls();
        Ok(out.column(k - 1).to_owned())
    }

    fn score_calls(&self) -> u64 {
        self.calls
    }

    fn delay_frames(&self) -> usize {
        0
    }
}

/// Wall-clock timing of an engine over a frame stream, excluding `warmup`
/// initial steps. Timing uses the monotonic clock; the measurement loop is
/// single-threaded.
pub fn measure_rtf<E: HopEngine>(
    engine: &mut E,
    frames: &Array2<Complex64>,
    warmup: usize,
    hop_ms: f64,
) -> Result<(RtfReport, Array2<Complex64>), StreamError> {
    let total = frames.ncols();
    if total <= warmup {
        return Err(StreamError::TooFewSteps { steps: total, warmup });
    }
    let mut out = Array2::zeros(frames.dim());
    let mut times = Vec::with_capacity(total - warmup);
    for k in 0..total {
        let t0 = Instant::now();
        let frame = engine.step(frames.column(k))?;
        let dt = t0.elapsed().as_secs_f64() * 1000.0;
        out.column_mut(k).assign(&frame);
        if k >= warmup {
            times.push(dt);
        }
    }
    let report =
        RtfReport::from_times(times, hop_ms, engine.delay_frames(), engine.score_calls());
    Ok((report, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnhanceMode {
    Db,
    Vanilla,
}

impl std::fmt::Display for EnhanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnhanceMode::Db => write!(f, "db"),
            EnhanceMode::Vanilla => write!(f, "vanilla"),
        }
    }
}

/// Where the score comes from for a job.
pub enum JobScore {
    /// Learned model from a checkpoint (EMA parameters unless told otherwise).
    Learned(Box<LearnedScore>),
    /// Analytic Gaussian oracle tied to the noisy input.
    Oracle { score: crate::score::AnalyticScore },
}

impl JobScore {
    pub fn as_score_fn(&self) -> &dyn ScoreFn {
        match self {
            JobScore::Learned(m) => m.as_ref(),
            JobScore::Oracle { score } => score,
        }
    }
}

pub struct JobSpec {
    pub mode: EnhanceMode,
    pub params: SdeParams,
    pub stft: StftConfig,
    pub grid: TimeGrid,
    /// Streaming context window (frames) for db mode.
    pub k_frames: usize,
    /// Reverse steps for vanilla mode.
    pub n_steps: usize,
    pub seed: u64,
    pub warmup_steps: usize,
}

#[derive(Debug, Clone)]
pub struct JobReport {
    pub mode: EnhanceMode,
    pub input_frames: usize,
    pub rtf: Option<RtfReport>,
    pub score_calls: u64,
    pub si_sdr_vs_input_db: Option<f64>,
    pub si_sdr_vs_reference_db: Option<f64>,
    pub seg_snr_vs_reference_db: Option<f64>,
    pub out_samples: usize,
}

impl JobReport {
    /// Key-value text block for the report file / stdout.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("mode: {}\n", self.mode));
        s.push_str(&format!("input_frames: {}\n", self.input_frames));
        s.push_str(&format!("score_calls: {}\n", self.score_calls));
        s.push_str(&format!("out_samples: {}\n", self.out_samples));
        if let Some(r) = &self.rtf {
            s.push_str(&format!("hop_ms: {:.3}\n", r.hop_ms));
            s.push_str(&format!("mean_step_ms: {:.3}\n", r.mean_step_ms));
            s.push_str(&format!("median_step_ms: {:.3}\n", r.median_step_ms));
            s.push_str(&format!("rtf: {:.4}\n", r.rtf));
            s.push_str(&format!("rtf_median: {:.4}\n", r.rtf_median));
            s.push_str(&format!("buffer_frames: {}\n", r.buffer_frames));
            s.push_str(&format!("algorithmic_latency_ms: {:.3}\n", r.algorithmic_latency_ms));
            s.push_str(&format!("io_latency_ms: {:.3}\n", r.io_latency_ms));
        }
        if let Some(v) = self.si_sdr_vs_input_db {
            s.push_str(&format!("si_sdr_vs_input_db: {v:.3}\n"));
        }
        if let Some(v) = self.si_sdr_vs_reference_db {
            s.push_str(&format!("si_sdr_vs_reference_db: {v:.3}\n"));
        }
        if let Some(v) = self.seg_snr_vs_reference_db {
            s.push_str(&format!("seg_snr_vs_reference_db: {v:.3}\n"));
        }
        s
    }

    pub fn write_text(&self, path: &Path) -> Result<(), StreamError> {
        std::fs::write(path, self.to_text())
            .map_err(|source| StreamError::Io { path: path.display().to_string(), source })
    }

    pub fn write_timings_csv(&self, path: &Path) -> Result<(), StreamError> {
        let mut s = String::from("step,ms\n");
        if let Some(r) = &self.rtf {
            for (i, ms) in r.per_step_ms.iter().enumerate() {
                s.push_str(&format!("{i},{ms:.6}\n"));
            }
        }
        std::fs::write(path, s)
            .map_err(|source| StreamError::Io { path: path.display().to_string(), source })
    }
}

/// Check a checkpoint against the requested operating point; returns every
/// differing field so a refusal names what disagrees.
pub fn validate_checkpoint(
    ckpt: &Checkpoint,
    requested_buffer: Option<usize>,
    requested_sde: Option<&SdeParams>,
    requested_stft: Option<&StftConfig>,
) -> Result<(), StreamError> {
    let mut diffs = Vec::new();
    if let Some(b) = requested_buffer {
        if ckpt.header.grid.len() != b {
            diffs.push(format!(
                "  grid length: checkpoint {} vs requested {b}",
                ckpt.header.grid.len()
            ));
        }
    }
    if let Some(sde) = requested_sde {
        if ckpt.header.sde.kind != sde.kind {
            diffs.push(format!(
                "  sde.kind: checkpoint {} vs requested {}",
                ckpt.header.sde.kind, sde.kind
            ));
        }
        for (name, a, b) in [
            ("sde.gamma", ckpt.header.sde.gamma, sde.gamma),
            ("sde.c", ckpt.header.sde.c, sde.c),
            ("sde.k_base", ckpt.header.sde.k_base, sde.k_base),
            ("sde.t_eps", ckpt.header.sde.t_eps, sde.t_eps),
            ("sde.t_rev", ckpt.header.sde.t_rev, sde.t_rev),
        ] {
            if (a - b).abs() > 1e-12 {
                diffs.push(format!("  {name}: checkpoint {a} vs requested {b}"));
            }
        }
    }
    if let Some(stft) = requested_stft {
        if &ckpt.header.stft != stft {
            diffs.push(format!(
                "  stft: checkpoint {:?} vs requested {:?}",
                ckpt.header.stft, stft
            ));
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(StreamError::IncompatibleCheckpoint { diffs })
    }
}

/// Full pipeline: wav -> stft -> compress -> enhance -> decompress -> istft
/// -> wav, with RTF and quality metrics.
pub fn run_enhancement_job(
    input_wav: &Path,
    reference_wav: Option<&Path>,
    score: &JobScore,
    spec: &JobSpec,
    out_wav: Option<&Path>,
) -> Result<JobReport, StreamError> {
    let clip = wav::read_wav(input_wav)?;
    let spectro = spectral::stft(&clip, &spec.stft)?;
    let comp = spectral::compress(&spectro, &spec.stft)?;
    let f_dim = comp.num_freqs();
    let frames = comp.num_frames();
    let hop_ms = spec.stft.hop_ms(clip.sample_rate);
    let score_fn = score.as_score_fn();

    let (enhanced_comp, rtf, score_calls, delay_frames) = match spec.mode {
        EnhanceMode::Db => {
            let mut engine = DbEngine::new(
                f_dim,
                spec.k_frames,
                spec.grid.clone(),
                score_fn,
                spec.params.clone(),
                spec.seed,
            )?;
            let warmup = spec.warmup_steps.min(frames.saturating_sub(1));
            let (report, out) = measure_rtf(&mut engine, &comp.data, warmup, hop_ms)?;
            let calls = report.score_calls;
            let delay = spec.grid.len();
            (out, Some(report), calls, delay)
        }
        EnhanceMode::Vanilla => {
            let counted = CountingScore::new(score_fn);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let out =
                vanilla_enhance(comp.data.view(), &counted, &spec.params, spec.n_steps, &mut rng)?;
            (out, None, counted.calls(), 0)
        }
    };

    let enhanced_spec = spectral::ComplexSpectrogram::new(enhanced_comp, true);
    let decompressed = spectral::decompress(&enhanced_spec, &spec.stft)?;
    let mut out_clip = spectral::istft(&decompressed, &spec.stft)?;
    // The final hop has single-window coverage whose taper tail amplifies
    // any spectral modification; on a live stream those samples are finished
    // by the next frame, so a finite file drops them.
    let full_overlap = (frames.saturating_sub(1)) * spec.stft.hop;
    out_clip.samples.truncate(clip.samples.len().min(full_overlap));

    if let Some(path) = out_wav {
        wav::write_wav(path, &out_clip)?;
    }

    // Latency compensation: shift the output back by the B-frame delay, then
    // skip another B frames of warm-up before comparing.
    let shift = delay_frames * spec.stft.hop;
    let skip = delay_frames * spec.stft.hop;
    let si_sdr_vs_input = aligned_si_sdr(&clip.samples, &out_clip.samples, shift, skip).ok();
    let (si_ref, seg_ref) = if let Some(ref_path) = reference_wav {
        let reference = wav::read_wav(ref_path)?;
        let si = aligned_si_sdr(&reference.samples, &out_clip.samples, shift, skip).ok();
        let seg = aligned_seg_snr(&reference.samples, &out_clip.samples, shift, skip).ok();
        (si, seg)
    } else {
        (None, None)
    };

    Ok(JobReport {
        mode: spec.mode,
        input_frames: frames,
        rtf,
        score_calls,
        si_sdr_vs_input_db: si_sdr_vs_input,
        si_sdr_vs_reference_db: si_ref,
        seg_snr_vs_reference_db: seg_ref,
        out_samples: out_clip.samples.len(),
    })
}

/// SI-SDR after shifting the estimate back by `shift` samples and skipping
/// the first `skip` reference samples (warm-up region).
pub fn aligned_si_sdr(
    reference: &[f64],
    estimate: &[f64],
    shift: usize,
    skip: usize,
) -> Result<f64, MetricError> {
    let (r, e) = align(reference, estimate, shift, skip)?;
    metrics::si_sdr(r, e)
}

pub fn aligned_seg_snr(
    reference: &[f64],
    estimate: &[f64],
    shift: usize,
    skip: usize,
) -> Result<f64, MetricError> {
    let (r, e) = align(reference, estimate, shift, skip)?;
    metrics::seg_snr(r, e, 32.0, 16_000)
}

fn align<'a>(
    reference: &'a [f64],
    estimate: &'a [f64],
    shift: usize,
    skip: usize,
) -> Result<(&'a [f64], &'a [f64]), MetricError> {
    let est = &estimate[(shift + skip).min(estimate.len())..];
    let usable = est.len().min(reference.len().saturating_sub(skip));
    if usable == 0 {
        return Err(MetricError::Empty);
    }
    Ok((&reference[skip..skip + usable], &est[..usable]))
}
