//! The diffusion buffer: perturbed-input construction, training examples,
//! and the online inference state machine.
//!
//! Layout convention (0-based columns of an `F x K` grid): the buffer is the
//! last `B` columns, local slot `j` (1-based) living at column `K - B + j - 1`
//! and holding a frame at diffusion time `t_j`. Columns left of the buffer
//! are finished estimates at time 0.
//!
//! Randomness contract: a stream step consumes, in order, one complex normal
//! per bin for the appended frame, then one per bin for every reverse update
//! with noise (slots `j = 2..=B`, ascending). The offline replay oracle in
//! `verify` reproduces this schedule exactly, which is what makes the
//! streaming/offline equivalence check bit-exact.

use crate::score::{ScoreError, ScoreFn};
use crate::sde::{complex_standard_normal, reverse_step, SdeError, SdeParams};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("buffer length {b} exceeds chunk length {k}")]
    BufferTooLong { b: usize, k: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in incoming frame {frame}")]
    NonFiniteInput { frame: u64 },
    #[error("stream source failed at frame {position}: {message}")]
    Source { position: u64, message: String },
    #[error("dataset has no usable utterances")]
    EmptyDataset,
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Sde(#[from] SdeError),
}

/// Ascending diffusion times `t_1 < ... < t_B`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    steps: Vec<f64>,
}

impl TimeGrid {
    pub fn new(steps: Vec<f64>) -> Result<Self, BufferError> {
        if steps.is_empty() {
            return Err(BufferError::InvalidGrid("grid must be nonempty".into()));
        }
        if !steps[0].is_finite() || steps[0] <= 0.0 {
            return Err(BufferError::InvalidGrid(format!("t_1 must be > 0, got {}", steps[0])));
        }
        for w in steps.windows(2) {
            if !(w[1] > w[0]) {
                return Err(BufferError::InvalidGrid(format!(
                    "steps must be strictly ascending, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { steps })
    }

    /// Fixed inference grid: linear spacing from `eps` to `t_rev`
    /// (a single-step grid sits at `t_rev`).
    pub fn linear(b: usize, eps: f64, t_rev: f64) -> Result<Self, BufferError> {
        if b == 0 {
            return Err(BufferError::InvalidGrid("grid must be nonempty".into()));
        }
        if b == 1 {
            return Self::new(vec![t_rev]);
        }
        let steps = (0..b)
            .map(|j| eps + (t_rev - eps) * j as f64 / (b - 1) as f64)
            .collect();
        Self::new(steps)
    }

    /// Training grid: `B - 1` i.i.d. draws uniform on `(eps, t_rev]`, sorted
    /// ascending, with `t_1 = eps` prepended. Ties are resampled.
    pub fn sample_training<R: Rng + ?Sized>(
        b: usize,
        eps: f64,
        t_rev: f64,
        rng: &mut R,
    ) -> Result<Self, BufferError> {
        if b == 0 {
            return Err(BufferError::InvalidGrid("grid must be nonempty".into()));
        }
        loop {
            let mut steps = Vec::with_capacity(b);
            steps.push(eps);
            for _ in 1..b {
                // 1 - u maps [0,1) onto (0,1], closing the interval at t_rev.
                let u: f64 = rng.gen();
                steps.push(eps + (t_rev - eps) * (1.0 - u));
            }
            steps[1..].sort_by(|a, b| a.partial_cmp(b).unwrap());
            if steps.windows(2).all(|w| w[1] > w[0]) {
                return Self::new(steps);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    /// Time of slot `j` (1-based); `j = 0` is the clean level 0.
    pub fn time_of(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.steps[j - 1]
        }
    }

    pub fn t_last(&self) -> f64 {
        *self.steps.last().unwrap()
    }
}

/// Rolling inference state: the perturbed window `v`, the aligned noisy
/// window `y_c`, and the grid.
#[derive(Debug, Clone)]
pub struct BufferState {
    pub v: Array2<Complex64>,
    pub y_c: Array2<Complex64>,
    pub frames_received: u64,
    pub grid: TimeGrid,
    /// Reverse steps applied to each column so far (debug bookkeeping).
    pub step_counts: Vec<u32>,
    /// Step count of the most recently emitted frame; `B` once warmed up.
    pub last_emitted_steps: u32,
}

impl BufferState {
    /// Zero-initialized state over a `K`-frame window.
    pub fn new(num_freqs: usize, k_frames: usize, grid: TimeGrid) -> Result<Self, BufferError> {
        if grid.len() > k_frames {
            return Err(BufferError::BufferTooLong { b: grid.len(), k: k_frames });
        }
        Ok(Self {
            v: Array2::zeros((num_freqs, k_frames)),
            y_c: Array2::zeros((num_freqs, k_frames)),
            frames_received: 0,
            grid,
            step_counts: vec![0; k_frames],
            last_emitted_steps: 0,
        })
    }

    pub fn num_freqs(&self) -> usize {
        self.v.nrows()
    }

    pub fn k_frames(&self) -> usize {
        self.v.ncols()
    }

    /// Structured snapshot for the debug log / replay tooling.
    pub fn snapshot(&self) -> StateSnapshot {
        let pack = |grid: &Array2<Complex64>| -> Vec<Vec<[f64; 2]>> {
            (0..grid.ncols())
                .map(|k| (0..grid.nrows()).map(|f| [grid[[f, k]].re, grid[[f, k]].im]).collect())
                .collect()
        };
        StateSnapshot {
            frames_received: self.frames_received,
            grid: self.grid.steps().to_vec(),
            step_counts: self.step_counts.clone(),
            v: pack(&self.v),
            y_c: pack(&self.y_c),
        }
    }

    /// Append this state as one JSON line.
    pub fn dump_jsonl<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        let line = serde_json::to_string(&self.snapshot()).expect("snapshot serializes");
        writeln!(w, "{line}")
    }
}

/// One per-step state dump: columns are frame-major, bins as `[re, im]`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StateSnapshot {
    pub frames_received: u64,
    pub grid: Vec<f64>,
    pub step_counts: Vec<u32>,
    pub v: Vec<Vec<[f64; 2]>>,
    pub y_c: Vec<Vec<[f64; 2]>>,
}

/// One training example built from Eq.-of-motion sampling over the window.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub v: Array2<Complex64>,
    pub y: Array2<Complex64>,
    pub x0: Array2<Complex64>,
    /// Noise draws for the buffer columns, `F x B`.
    pub z: Array2<Complex64>,
    /// Kernel std devs per buffer column, broadcast over frequency, `F x B`.
    pub sigmas: Array2<f64>,
    pub grid: TimeGrid,
}

/// Materialize the perturbed input: the first `K - B` columns copy `x0`, the
/// last `B` columns are forward-kernel samples at the grid times. Columns are
/// drawn left to right, bins top to bottom (the documented rng schedule).
pub fn build_perturbed_input<R: Rng + ?Sized>(
    x0: ArrayView2<Complex64>,
    y: ArrayView2<Complex64>,
    grid: &TimeGrid,
    params: &SdeParams,
    rng: &mut R,
) -> Result<TrainExample, BufferError> {
    if x0.dim() != y.dim() {
        return Err(BufferError::ShapeMismatch(format!(
            "x0 is {:?}, y is {:?}",
            x0.dim(),
            y.dim()
        )));
    }
    let (f_dim, k_frames) = x0.dim();
    let b = grid.len();
    if b > k_frames {
        return Err(BufferError::BufferTooLong { b, k: k_frames });
    }
    let mut v = x0.to_owned();
    let mut z = Array2::zeros((f_dim, b));
    let mut sigmas = Array2::zeros((f_dim, b));
    for j in 1..=b {
        let col = k_frames - b + j - 1;
        let t = grid.time_of(j);
        let moments = params.moments(t)?;
        for fi in 0..f_dim {
            let zv = complex_standard_normal(rng);
            let mu = x0[[fi, col]] * moments.mean_coeff_x0 + y[[fi, col]] * moments.mean_coeff_y;
            v[[fi, col]] = mu + zv * moments.sigma;
            z[[fi, j - 1]] = zv;
            sigmas[[fi, j - 1]] = moments.sigma;
        }
    }
    Ok(TrainExample { v, y: y.to_owned(), x0: x0.to_owned(), z, sigmas, grid: grid.clone() })
}

/// Draw a training batch: sample a pair, pad both spectrograms with `K - 1`
/// leading zero frames (initialization mimicry), crop `K` frames uniformly,
/// draw a fresh grid, and build the perturbed input.
pub fn make_training_batch<R: Rng + ?Sized>(
    dataset: &[(Array2<Complex64>, Array2<Complex64>)],
    k_frames: usize,
    b: usize,
    batch_size: usize,
    params: &SdeParams,
    rng: &mut R,
) -> Result<Vec<TrainExample>, BufferError> {
    let usable: Vec<&(Array2<Complex64>, Array2<Complex64>)> = dataset
        .iter()
        .filter(|(clean, noisy)| {
            let ok = clean.ncols() >= 1 && clean.dim() == noisy.dim();
            if !ok {
                log::warn!("skipping utterance with shape {:?}/{:?}", clean.dim(), noisy.dim());
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(BufferError::EmptyDataset);
    }
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let (clean, noisy) = usable[rng.gen_range(0..usable.len())];
        let (f_dim, n) = clean.dim();
        // Padded length is (K-1) + n; valid crop starts span [0, n-1].
        let start = rng.gen_range(0..n);
        let mut x0 = Array2::zeros((f_dim, k_frames));
        let mut y = Array2::zeros((f_dim, k_frames));
        for k in 0..k_frames {
            let padded_idx = start + k;
            if padded_idx >= k_frames - 1 {
                let src = padded_idx - (k_frames - 1);
                if src < n {
                    x0.column_mut(k).assign(&clean.column(src));
                    y.column_mut(k).assign(&noisy.column(src));
                }
            }
        }
        let grid = TimeGrid::sample_training(b, params.t_eps, params.t_rev, rng)?;
        batch.push(build_perturbed_input(x0.view(), y.view(), &grid, params, rng)?);
    }
    Ok(batch)
}

/// One step of the online state machine:
///
/// 1. capture the frame that finished on the previous step (column `K - B`),
/// 2. shift both windows left and append the incoming noisy frame, the
///    perturbed copy receiving `sigma_{t_B}` noise,
/// 3. evaluate the score once over the whole window,
/// 4. advance every buffer slot one grid interval (`t_j -> t_{j-1}`), the
///    final step to time 0 taken without noise,
/// 5. return the captured frame.
///
/// The emitted sequence therefore lags the input by exactly `B` frames.
pub fn stream_step<S: ScoreFn + ?Sized, R: Rng + ?Sized>(
    state: &mut BufferState,
    r: ndarray::ArrayView1<Complex64>,
    score_fn: &S,
    params: &SdeParams,
    rng: &mut R,
) -> Result<Array1<Complex64>, BufferError> {
    let f_dim = state.num_freqs();
    let k_frames = state.k_frames();
    let b = state.grid.len();
    if r.len() != f_dim {
        return Err(BufferError::ShapeMismatch(format!(
            "incoming frame has {} bins, state has {f_dim}",
            r.len()
        )));
    }
    if r.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(BufferError::NonFiniteInput { frame: state.frames_received });
    }

    let finished = state.v.column(k_frames - b).to_owned();
    state.last_emitted_steps = state.step_counts[k_frames - b];

    shift_left(&mut state.v);
    shift_left(&mut state.y_c);
    state.step_counts.rotate_left(1);
    state.step_counts[k_frames - 1] = 0;
    state.y_c.column_mut(k_frames - 1).assign(&r);
    let sigma_last = params.sigma(state.grid.t_last())?;
    for fi in 0..f_dim {
        state.v[[fi, k_frames - 1]] = r[fi] + complex_standard_normal(rng) * sigma_last;
    }

    let score = score_fn.score(state.v.view(), state.y_c.view(), state.grid.steps())?;
    if score.dim() != (f_dim, b) {
        return Err(BufferError::ShapeMismatch(format!(
            "score output is {:?}, expected ({f_dim}, {b})",
            score.dim()
        )));
    }

    for j in 1..=b {
        let col = k_frames - b + j - 1;
        let t_from = state.grid.time_of(j);
        let t_to = state.grid.time_of(j - 1);
        let x = state.v.column(col).to_owned();
        let y = state.y_c.column(col).to_owned();
        let stepped = reverse_step(
            params,
            score.column(j - 1),
            x.view(),
            y.view(),
            t_from,
            t_to,
            rng,
            j != 1,
        )?;
        state.v.column_mut(col).assign(&stepped);
        state.step_counts[col] += 1;
    }

    state.frames_received += 1;
    Ok(finished)
}

fn shift_left(grid: &mut Array2<Complex64>) {
    let k = grid.ncols();
    for mut row in grid.axis_iter_mut(Axis(0)) {
        for i in 0..k - 1 {
            row[i] = row[i + 1];
        }
    }
}

/// Outcome of streaming a whole source through the buffer.
#[derive(Debug, Clone)]
pub struct StreamOutcome {
    /// One output frame per input frame; frame `i` is the estimate of input
    /// frame `i - B` (the first `B` frames are warm-up).
    pub enhanced: Array2<Complex64>,
    pub score_calls: u64,
    pub warmup_frames: usize,
}

/// Run [`stream_step`] over every frame of a source. The score model is
/// called exactly once per incoming frame.
pub fn enhance_stream<S, R, I, E>(
    source: I,
    num_freqs: usize,
    k_frames: usize,
    grid: TimeGrid,
    score_fn: &S,
    params: &SdeParams,
    rng: &mut R,
) -> Result<StreamOutcome, BufferError>
where
    S: ScoreFn + ?Sized,
    R: Rng + ?Sized,
    I: IntoIterator<Item = Result<Array1<Complex64>, E>>,
    E: std::fmt::Display,
{
    let warmup = grid.len();
    let mut state = BufferState::new(num_freqs, k_frames, grid)?;
    let counted = crate::score::CountingScore::new(score_fn);
    let mut out_cols: Vec<Array1<Complex64>> = Vec::new();
    for (i, frame) in source.into_iter().enumerate() {
        let frame = frame.map_err(|e| BufferError::Source {
            position: i as u64,
            message: e.to_string(),
        })?;
        out_cols.push(stream_step(&mut state, frame.view(), &counted, params, rng)?);
    }
    let mut enhanced = Array2::zeros((num_freqs, out_cols.len()));
    for (i, col) in out_cols.iter().enumerate() {
        enhanced.column_mut(i).assign(col);
    }
    Ok(StreamOutcome { enhanced, score_calls: counted.calls(), warmup_frames: warmup })
}

/// Adapt a spectrogram into a frame source for [`enhance_stream`].
pub fn spectrogram_frames(
    data: &Array2<Complex64>,
) -> impl Iterator<Item = Result<Array1<Complex64>, std::convert::Infallible>> + '_ {
    (0..data.ncols()).map(move |k| Ok(data.column(k).to_owned()))
}
