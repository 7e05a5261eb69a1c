//! Small convolutional encoder-decoder used as the trainable score backbone.
//!
//! Input is a 4-channel real tensor (Re/Im of the perturbed input V and of
//! the noisy conditioner Y) over (frequency x frame). Down/up stages stride
//! only the frequency axis, so every layer keeps per-frame alignment and the
//! per-frame time embedding can be added at every conditioned stage. The
//! output is cropped to the last `B` frames.
//!
//! Forward and reverse-mode backward are written out by hand; gradients are
//! pinned by finite-difference checks in the tests and in `verify`.

use super::ScoreError;
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const IN_CHANNELS: usize = 4;
pub const OUT_CHANNELS: usize = 2;

/// Architecture hyperparameters. `depth == 0` degenerates to a single linear
/// convolution (useful for closed-form gradient checks).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    /// Base channel count; stage `d` uses `channels << d`.
    pub channels: usize,
    /// Number of down/up stages.
    pub depth: usize,
    /// Square kernel size (odd).
    pub kernel: usize,
    /// Sinusoidal time-feature dimension (even).
    pub time_embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { channels: 16, depth: 2, kernel: 3, time_embed_dim: 16 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if self.channels == 0 {
            return Err(ScoreError::InvalidConfig("channels must be >= 1".into()));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(ScoreError::InvalidConfig("kernel must be odd".into()));
        }
        if self.time_embed_dim % 2 != 0 || self.time_embed_dim == 0 {
            return Err(ScoreError::InvalidConfig("time_embed_dim must be even".into()));
        }
        Ok(())
    }

    /// Frames an output column can depend on: every conv adds
    /// `(kernel-1)/2` frames of context per side.
    pub fn receptive_frames(&self) -> usize {
        let convs = if self.depth == 0 { 1 } else { 2 * self.depth + 3 };
        2 * convs * ((self.kernel - 1) / 2) + 1
    }

    pub fn layout(&self) -> ParamLayout {
        let mut layout = ParamLayout { entries: Vec::new(), total: 0 };
        let k = self.kernel;
        let e = self.time_embed_dim;
        if self.depth == 0 {
            layout.push("head.w", vec![OUT_CHANNELS, IN_CHANNELS, k, k]);
            layout.push("head.b", vec![OUT_CHANNELS]);
            push_gate(&mut layout, e);
            return layout;
        }
        let c = self.channels;
        layout.push("stem.w", vec![c, IN_CHANNELS, k, k]);
        layout.push("stem.b", vec![c]);
        layout.push("stem.emb.w", vec![c, e]);
        layout.push("stem.emb.b", vec![c]);
        for d in 1..=self.depth {
            let (ci, co) = (c << (d - 1), c << d);
            layout.push(&format!("down{d}.w"), vec![co, ci, k, k]);
            layout.push(&format!("down{d}.b"), vec![co]);
            layout.push(&format!("down{d}.emb.w"), vec![co, e]);
            layout.push(&format!("down{d}.emb.b"), vec![co]);
        }
        let cm = c << self.depth;
        layout.push("mid.w", vec![cm, cm, k, k]);
        layout.push("mid.b", vec![cm]);
        layout.push("mid.emb.w", vec![cm, e]);
        layout.push("mid.emb.b", vec![cm]);
        for d in (1..=self.depth).rev() {
            let (ci, co) = (c << d, c << (d - 1));
            layout.push(&format!("up{d}.w"), vec![co, ci, k, k]);
            layout.push(&format!("up{d}.b"), vec![co]);
            layout.push(&format!("up{d}.emb.w"), vec![co, e]);
            layout.push(&format!("up{d}.emb.b"), vec![co]);
        }
        layout.push("head.w", vec![OUT_CHANNELS, c, k, k]);
        layout.push("head.b", vec![OUT_CHANNELS]);
        push_gate(&mut layout, e);
        layout
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Seeded parameter initialization: He-normal conv weights, small
    /// embedding projections, zero biases. `zero_head` starts the output
    /// layer at zero so an untrained net emits exactly zero.
    pub fn init_params(&self, seed: u64, zero_head: bool) -> ParamVec {
        let layout = self.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0f64; layout.total];
        for entry in &layout.entries {
            let slice = &mut data[entry.offset..entry.offset + entry.len()];
            if entry.name == "gate.b0" {
                slice[0] = GATE_INIT_BIAS;
                continue;
            }
            if entry.name.ends_with(".b") || entry.name.starts_with("gate.") {
                continue;
            }
            if entry.name == "head.w" && zero_head {
                continue;
            }
            let std = if entry.name.ends_with("emb.w") {
                0.1
            } else {
                // [co, ci, k, k]: fan-in = ci * k * k
                let fan_in: usize = entry.shape[1..].iter().product();
                (2.0 / fan_in as f64).sqrt()
            };
            for v in slice.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v = n * std;
            }
        }
        ParamVec { data }
    }
}

/// Parameters of the per-bin skip gate, consumed by the score assembly
/// rather than by the convolutional forward map: the gate logit is an
/// affine function of the time features plus a time-modulated multiple of
/// the local log-energy.
fn push_gate(layout: &mut ParamLayout, e: usize) {
    layout.push("gate.w0", vec![e]);
    layout.push("gate.b0", vec![1]);
    layout.push("gate.w1", vec![e]);
    layout.push("gate.b1", vec![1]);
}

/// Gate bias at init: sigmoid(-2) puts ~12% weight on the input skip.
pub const GATE_INIT_BIAS: f64 = -2.0;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    fn push(&mut self, name: &str, shape: Vec<usize>) {
        let len: usize = shape.iter().product();
        self.entries.push(ParamEntry { name: name.to_string(), offset: self.total, shape });
        self.total += len;
    }

    pub fn range_of(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.offset..e.offset + e.len())
    }
}

/// Flat parameter vector; the layout map names the segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec {
    pub data: Vec<f64>,
}

impl ParamVec {
    pub fn zeros(len: usize) -> Self {
        Self { data: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Dense (channels x freq x frames) activation block, frame axis contiguous.
#[derive(Debug, Clone)]
struct Feat {
    c: usize,
    f: usize,
    t: usize,
    data: Vec<f64>,
}

impl Feat {
    fn zeros(c: usize, f: usize, t: usize) -> Self {
        Self { c, f, t, data: vec![0.0; c * f * t] }
    }

    #[inline]
    fn row(&self, c: usize, f: usize) -> &[f64] {
        let base = (c * self.f + f) * self.t;
        &self.data[base..base + self.t]
    }

    #[inline]
    fn row_mut(&mut self, c: usize, f: usize) -> &mut [f64] {
        let base = (c * self.f + f) * self.t;
        &mut self.data[base..base + self.t]
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: &mut Feat) {
    for v in x.data.iter_mut() {
        *v *= sigmoid(*v);
    }
}

/// d silu / dx given the pre-activation value.
#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn conv_forward(x: &Feat, w: &[f64], b: &[f64], c_out: usize, k: usize, stride_f: usize) -> Feat {
    let p = k / 2;
    let f_out = x.f / stride_f;
    let mut out = Feat::zeros(c_out, f_out, x.t);
    for co in 0..c_out {
        for fo in 0..f_out {
            out.row_mut(co, fo).fill(b[co]);
        }
        for ci in 0..x.c {
            for kf in 0..k {
                for fo in 0..f_out {
                    let fi = (fo * stride_f + kf) as isize - p as isize;
                    if fi < 0 || fi >= x.f as isize {
                        continue;
                    }
                    let xbase = (ci * x.f + fi as usize) * x.t;
                    let obase = (co * f_out + fo) * x.t;
                    for kt in 0..k {
                        let wv = w[((co * x.c + ci) * k + kf) * k + kt];
                        if wv == 0.0 {
                            continue;
                        }
                        let dt = kt as isize - p as isize;
                        let (o0, x0, n) = shifted_range(x.t, dt);
                        let (xs, os) = (xbase + x0, obase + o0);
                        // out[t] += w * x[t + dt], edges zero-padded
                        for i in 0..n {
                            out.data[os + i] += wv * x.data[xs + i];
                        }
                    }
                }
            }
        }
    }
    out
}

/// For `out[t] += x[t + dt]`: returns (out offset, x offset, run length).
#[inline]
fn shifted_range(len: usize, dt: isize) -> (usize, usize, usize) {
    if dt >= 0 {
        let d = dt as usize;
        (0, d, len - d)
    } else {
        let d = (-dt) as usize;
        (d, 0, len - d)
    }
}

fn conv_backward(
    x: &Feat,
    w: &[f64],
    dout: &Feat,
    k: usize,
    stride_f: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Feat {
    let p = k / 2;
    let mut dx = Feat::zeros(x.c, x.f, x.t);
    for co in 0..dout.c {
        for fo in 0..dout.f {
            db[co] += dout.row(co, fo).iter().sum::<f64>();
        }
        for ci in 0..x.c {
            for kf in 0..k {
                for fo in 0..dout.f {
                    let fi = (fo * stride_f + kf) as isize - p as isize;
                    if fi < 0 || fi >= x.f as isize {
                        continue;
                    }
                    let xbase = (ci * x.f + fi as usize) * x.t;
                    let dxbase = xbase;
                    let dbase = (co * dout.f + fo) * x.t;
                    for kt in 0..k {
                        let widx = ((co * x.c + ci) * k + kf) * k + kt;
                        let wv = w[widx];
                        let dt = kt as isize - p as isize;
                        let (o0, x0, n) = shifted_range(x.t, dt);
                        let (xs, os) = (x0, o0);
                        let mut acc = 0.0;
                        for i in 0..n {
                            let g = dout.data[dbase + os + i];
                            acc += g * x.data[xbase + xs + i];
                            dx.data[dxbase + xs + i] += wv * g;
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    dx
}

fn upsample2(x: &Feat) -> Feat {
    let mut out = Feat::zeros(x.c, x.f * 2, x.t);
    for c in 0..x.c {
        for f in 0..out.f {
            out.row_mut(c, f).copy_from_slice(x.row(c, f / 2));
        }
    }
    out
}

fn upsample2_backward(dout: &Feat) -> Feat {
    let mut dx = Feat::zeros(dout.c, dout.f / 2, dout.t);
    for c in 0..dout.c {
        for f in 0..dx.f {
            let base = (c * dx.f + f) * dx.t;
            for sub in 0..2 {
                let r = dout.row(c, 2 * f + sub);
                for (i, &g) in r.iter().enumerate() {
                    dx.data[base + i] += g;
                }
            }
        }
    }
    dx
}

/// Sinusoidal features of a diffusion time: interleaved sin/cos over a
/// geometric frequency ladder. Injective on [0, 1] because the slowest
/// component is monotone there.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let omega = if half == 1 {
            1.0
        } else {
            (1000.0f64).powf(i as f64 / (half - 1) as f64)
        };
        out.push((omega * t).sin());
        out.push((omega * t).cos());
    }
    out
}

/// Per-frame embedding matrix `[dim, K]` for the full frame axis: the last
/// `times.len()` frames carry the grid times, everything before is clean
/// (t = 0).
fn frame_embedding(times: &[f64], k_frames: usize, dim: usize) -> Vec<f64> {
    let b = times.len();
    let mut e = vec![0.0; dim * k_frames];
    for kf in 0..k_frames {
        let t = if kf >= k_frames - b { times[kf - (k_frames - b)] } else { 0.0 };
        let feats = time_features(t, dim);
        for (d, &v) in feats.iter().enumerate() {
            e[d * k_frames + kf] = v;
        }
    }
    e
}

/// `add[c, t] = W e + b`, broadcast over frequency during the stage add.
fn embed_project(w: &[f64], b: &[f64], emb: &[f64], c: usize, dim: usize, k_frames: usize) -> Vec<f64> {
    let mut add = vec![0.0; c * k_frames];
    for ci in 0..c {
        let arow = &mut add[ci * k_frames..(ci + 1) * k_frames];
        arow.fill(b[ci]);
        for d in 0..dim {
            let wv = w[ci * dim + d];
            let erow = &emb[d * k_frames..(d + 1) * k_frames];
            for (a, &ev) in arow.iter_mut().zip(erow) {
                *a += wv * ev;
            }
        }
    }
    add
}

fn add_broadcast(x: &mut Feat, add: &[f64]) {
    for c in 0..x.c {
        let arow = &add[c * x.t..(c + 1) * x.t];
        for f in 0..x.f {
            let row = x.row_mut(c, f);
            for (v, &a) in row.iter_mut().zip(arow) {
                *v += a;
            }
        }
    }
}

struct StageTape {
    /// Pre-activation (input to silu).
    pre: Feat,
    /// Post-activation (input to the next conv).
    post: Feat,
}

struct Tape {
    input: Feat,
    stages: Vec<StageTape>,
    /// Post-activation features feeding each up-stage skip connection,
    /// indexed by level (0 = stem output).
    emb: Vec<f64>,
    k_frames: usize,
}

pub(crate) struct Network<'a> {
    cfg: &'a NetConfig,
    theta: &'a ParamVec,
    layout: ParamLayout,
}

impl<'a> Network<'a> {
    pub fn new(cfg: &'a NetConfig, theta: &'a ParamVec) -> Result<Self, ScoreError> {
        cfg.validate()?;
        let layout = cfg.layout();
        if theta.len() != layout.total {
            return Err(ScoreError::InvalidConfig(format!(
                "parameter vector has {} values, layout expects {}",
                theta.len(),
                layout.total
            )));
        }
        Ok(Self { cfg, theta, layout })
    }

    fn seg(&self, name: &str) -> &[f64] {
        let r = self.layout.range_of(name).expect("segment name");
        &self.theta.data[r]
    }

    fn check_dims(&self, f: usize, k_frames: usize, b: usize) -> Result<(), ScoreError> {
        if b == 0 || b > k_frames {
            return Err(ScoreError::ShapeMismatch(format!(
                "time grid length {b} must be in 1..={k_frames}"
            )));
        }
        if self.cfg.depth > 0 && f % (1 << self.cfg.depth) != 0 {
            return Err(ScoreError::InvalidConfig(format!(
                "freq dim {f} not divisible by 2^depth ({})",
                1 << self.cfg.depth
            )));
        }
        Ok(())
    }

    fn forward_tape(
        &self,
        v: ArrayView2<Complex64>,
        y: ArrayView2<Complex64>,
        times: &[f64],
    ) -> Result<(Array2<Complex64>, Tape), ScoreError> {
        if v.dim() != y.dim() {
            return Err(ScoreError::ShapeMismatch(format!(
                "v is {:?}, y is {:?}",
                v.dim(),
                y.dim()
            )));
        }
        let (f_dim, k_frames) = v.dim();
        let b = times.len();
        self.check_dims(f_dim, k_frames, b)?;

        let mut input = Feat::zeros(IN_CHANNELS, f_dim, k_frames);
        for fi in 0..f_dim {
            for t in 0..k_frames {
                let base = fi * k_frames + t;
                input.data[base] = v[[fi, t]].re;
                input.data[f_dim * k_frames + base] = v[[fi, t]].im;
                input.data[2 * f_dim * k_frames + base] = y[[fi, t]].re;
                input.data[3 * f_dim * k_frames + base] = y[[fi, t]].im;
            }
        }

        let emb = frame_embedding(times, k_frames, self.cfg.time_embed_dim);
        let mut stages = Vec::new();
        let k = self.cfg.kernel;
        let e = self.cfg.time_embed_dim;

        let final_feat = if self.cfg.depth == 0 {
            conv_forward(&input, self.seg("head.w"), self.seg("head.b"), OUT_CHANNELS, k, 1)
        } else {
            let run_stage = |x: &Feat, name: &str, c_out: usize, stride: usize,
                                 skip: Option<&Feat>,
                                 stages: &mut Vec<StageTape>|
             -> Feat {
                let mut z = conv_forward(
                    x,
                    self.seg(&format!("{name}.w")),
                    self.seg(&format!("{name}.b")),
                    c_out,
                    k,
                    stride,
                );
                if let Some(s) = skip {
                    for (zv, sv) in z.data.iter_mut().zip(&s.data) {
                        *zv += sv;
                    }
                }
                let add = embed_project(
                    self.seg(&format!("{name}.emb.w")),
                    self.seg(&format!("{name}.emb.b")),
                    &emb,
                    c_out,
                    e,
                    k_frames,
                );
                add_broadcast(&mut z, &add);
                let pre = z.clone();
                silu(&mut z);
                stages.push(StageTape { pre, post: z.clone() });
                z
            };

            let c = self.cfg.channels;
            let mut cur = run_stage(&input, "stem", c, 1, None, &mut stages);
            let mut skips = vec![cur.clone()];
            for d in 1..=self.cfg.depth {
                cur = run_stage(&cur, &format!("down{d}"), c << d, 2, None, &mut stages);
                if d < self.cfg.depth {
                    skips.push(cur.clone());
                }
            }
            cur = run_stage(&cur, "mid", c << self.cfg.depth, 1, None, &mut stages);
            for d in (1..=self.cfg.depth).rev() {
                let up = upsample2(&cur);
                cur = run_stage(&up, &format!("up{d}"), c << (d - 1), 1, Some(&skips[d - 1]), &mut stages);
            }
            conv_forward(&cur, self.seg("head.w"), self.seg("head.b"), OUT_CHANNELS, k, 1)
        };

        // Crop the last B frames and repack as complex.
        let mut out = Array2::zeros((f_dim, b));
        for fi in 0..f_dim {
            for (j, t) in (k_frames - b..k_frames).enumerate() {
                out[[fi, j]] = Complex64::new(
                    final_feat.row(0, fi)[t],
                    final_feat.row(1, fi)[t],
                );
            }
        }
        Ok((out, Tape { input, stages, emb, k_frames }))
    }

    fn backward(
        &self,
        tape: &Tape,
        cotangent: ArrayView2<Complex64>,
    ) -> Result<ParamVec, ScoreError> {
        let f_dim = tape.input.f;
        let k_frames = tape.k_frames;
        let b = cotangent.ncols();
        if cotangent.nrows() != f_dim || b > k_frames {
            return Err(ScoreError::ShapeMismatch(format!(
                "cotangent is {:?}, expected ({f_dim}, <= {k_frames})",
                cotangent.dim()
            )));
        }
        let mut grad = ParamVec::zeros(self.layout.total);
        let k = self.cfg.kernel;
        let e = self.cfg.time_embed_dim;

        // Un-crop: gradient of the full-head output is zero outside the window.
        let mut dhead = Feat::zeros(OUT_CHANNELS, f_dim, k_frames);
        for fi in 0..f_dim {
            for (j, t) in (k_frames - b..k_frames).enumerate() {
                let g = cotangent[[fi, j]];
                dhead.row_mut(0, fi)[t] = g.re;
                dhead.row_mut(1, fi)[t] = g.im;
            }
        }

        if self.cfg.depth == 0 {
            let r_w = self.layout.range_of("head.w").unwrap();
            let r_b = self.layout.range_of("head.b").unwrap();
            let (mut dw, mut db) = (vec![0.0; r_w.len()], vec![0.0; r_b.len()]);
            conv_backward(&tape.input, self.seg("head.w"), &dhead, k, 1, &mut dw, &mut db);
            grad.data[r_w].copy_from_slice(&dw);
            grad.data[r_b].copy_from_slice(&db);
            return Ok(grad);
        }

        // Stage order on the tape: stem, down1.., mid, up_depth..up1.
        let depth = self.cfg.depth;
        let head_input = &tape.stages.last().unwrap().post;

        let r_w = self.layout.range_of("head.w").unwrap();
        let r_b = self.layout.range_of("head.b").unwrap();
        let (mut dw, mut db) = (vec![0.0; r_w.len()], vec![0.0; r_b.len()]);
        let mut dcur = conv_backward(head_input, self.seg("head.w"), &dhead, k, 1, &mut dw, &mut db);
        grad.data[r_w].copy_from_slice(&dw);
        grad.data[r_b].copy_from_slice(&db);

        // Backprop a conditioned stage: silu -> embedding -> (skip) -> conv.
        // Returns the gradient w.r.t. the conv input plus the stage's dz,
        // which doubles as the gradient of any skip added into the stage.
        let backprop_stage = |grad: &mut ParamVec,
                                  stage: &StageTape,
                                  name: &str,
                                  conv_input: &Feat,
                                  stride: usize,
                                  dout: &Feat|
         -> (Feat, Feat) {
            // Through silu.
            let mut dz = Feat::zeros(dout.c, dout.f, dout.t);
            for (i, g) in dout.data.iter().enumerate() {
                dz.data[i] = g * silu_grad(stage.pre.data[i]);
            }
            // Embedding gradients: reduce over frequency, then affine backward.
            let mut dadd = vec![0.0; dz.c * dz.t];
            for ci in 0..dz.c {
                for fi in 0..dz.f {
                    let row = dz.row(ci, fi);
                    let arow = &mut dadd[ci * dz.t..(ci + 1) * dz.t];
                    for (a, &g) in arow.iter_mut().zip(row) {
                        *a += g;
                    }
                }
            }
            {
                let r_ew = self.layout.range_of(&format!("{name}.emb.w")).unwrap();
                let r_eb = self.layout.range_of(&format!("{name}.emb.b")).unwrap();
                for ci in 0..dz.c {
                    let arow = &dadd[ci * dz.t..(ci + 1) * dz.t];
                    for d in 0..e {
                        let erow = &tape.emb[d * k_frames..(d + 1) * k_frames];
                        let mut acc = 0.0;
                        for (a, &ev) in arow.iter().zip(erow) {
                            acc += a * ev;
                        }
                        grad.data[r_ew.start + ci * e + d] += acc;
                    }
                    grad.data[r_eb.start + ci] += arow.iter().sum::<f64>();
                }
            }
            // Through the conv.
            let r_w = self.layout.range_of(&format!("{name}.w")).unwrap();
            let r_b = self.layout.range_of(&format!("{name}.b")).unwrap();
            let (mut dw, mut db) = (vec![0.0; r_w.len()], vec![0.0; r_b.len()]);
            let dx = conv_backward(
                conv_input,
                self.seg(&format!("{name}.w")),
                &dz,
                k,
                stride,
                &mut dw,
                &mut db,
            );
            for (g, v) in grad.data[r_w].iter_mut().zip(&dw) {
                *g += v;
            }
            for (g, v) in grad.data[r_b].iter_mut().zip(&db) {
                *g += v;
            }
            // dz is also the gradient w.r.t. any skip added into this stage.
            (dx, dz)
        };

        // Rebuild stage indices: 0 = stem, 1..=depth = down_d,
        // depth+1 = mid, depth+2.. = up_depth..up1.
        let stem_idx = 0;
        let down_idx = |d: usize| d;
        let mid_idx = depth + 1;
        let up_idx = |d: usize| depth + 1 + (depth - d + 1);

        // Up stages, last executed first (we already consumed head).
        let mut dskips: Vec<Option<Feat>> = vec![None; depth];
        for d in 1..=depth {
            let idx = up_idx(d);
            let stage = &tape.stages[idx];
            // conv input was upsample2 of the previous level's output.
            let prev_post = if d == depth {
                &tape.stages[mid_idx].post
            } else {
                &tape.stages[up_idx(d + 1)].post
            };
            let up_in = upsample2(prev_post);
            let (dup, dz) = backprop_stage(&mut grad, stage, &format!("up{d}"), &up_in, 1, &dcur);
            dskips[d - 1] = Some(dz);
            dcur = upsample2_backward(&dup);
        }

        // Mid.
        {
            let stage = &tape.stages[mid_idx];
            let prev_post = &tape.stages[down_idx(depth)].post;
            let (dx, _) = backprop_stage(&mut grad, stage, "mid", prev_post, 1, &dcur);
            dcur = dx;
        }

        // Down stages, deepest first. Skip gradients re-enter where the
        // forward consumed the same post-activation.
        for d in (1..=depth).rev() {
            let stage = &tape.stages[down_idx(d)];
            let prev_post = if d == 1 {
                &tape.stages[stem_idx].post
            } else {
                &tape.stages[down_idx(d - 1)].post
            };
            if d < depth {
                if let Some(ds) = dskips[d].take() {
                    for (g, v) in dcur.data.iter_mut().zip(&ds.data) {
                        *g += v;
                    }
                }
            }
            let (dx, _) = backprop_stage(&mut grad, stage, &format!("down{d}"), prev_post, 2, &dcur);
            dcur = dx;
        }

        // Stem (skip from up1 lands on its output).
        {
            if let Some(ds) = dskips[0].take() {
                for (g, v) in dcur.data.iter_mut().zip(&ds.data) {
                    *g += v;
                }
            }
            let stage = &tape.stages[stem_idx];
            let (_, _) = backprop_stage(&mut grad, stage, "stem", &tape.input, 1, &dcur);
        }

        Ok(grad)
    }
}

/// Deterministic forward map: `(V, Y, t_grid) -> F x B` complex output.
pub fn net_forward(
    cfg: &NetConfig,
    theta: &ParamVec,
    v: ArrayView2<Complex64>,
    y: ArrayView2<Complex64>,
    times: &[f64],
) -> Result<Array2<Complex64>, ScoreError> {
    let net = Network::new(cfg, theta)?;
    net.forward_tape(v, y, times).map(|(out, _)| out)
}

/// Exact reverse-mode gradient of `net_forward` w.r.t. the parameters,
/// contracted against `cotangent`.
pub fn net_backward(
    cfg: &NetConfig,
    theta: &ParamVec,
    v: ArrayView2<Complex64>,
    y: ArrayView2<Complex64>,
    times: &[f64],
    cotangent: ArrayView2<Complex64>,
) -> Result<ParamVec, ScoreError> {
    let net = Network::new(cfg, theta)?;
    let (_, tape) = net.forward_tape(v, y, times)?;
    net.backward(&tape, cotangent)
}

/// Forward plus gradient in one pass (shares the tape).
pub fn net_value_and_grad(
    cfg: &NetConfig,
    theta: &ParamVec,
    v: ArrayView2<Complex64>,
    y: ArrayView2<Complex64>,
    times: &[f64],
    cotangent_of: impl FnOnce(&Array2<Complex64>) -> Array2<Complex64>,
) -> Result<(Array2<Complex64>, ParamVec), ScoreError> {
    let net = Network::new(cfg, theta)?;
    let (out, tape) = net.forward_tape(v, y, times)?;
    let cot = cotangent_of(&out);
    let grad = net.backward(&tape, cot.view())?;
    Ok((out, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(f: usize, k: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((f, k), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn tiny_cfg() -> NetConfig {
        NetConfig { channels: 4, depth: 1, kernel: 3, time_embed_dim: 8 }
    }

    #[test]
    fn param_count_default_under_budget() {
        let cfg = NetConfig::default();
        assert!(cfg.param_count() <= 200_000, "params: {}", cfg.param_count());
    }

    #[test]
    fn zero_head_outputs_zero() {
        let cfg = tiny_cfg();
        let theta = cfg.init_params(3, true);
        let v = random_grid(8, 12, 1);
        let y = random_grid(8, 12, 2);
        let out = net_forward(&cfg, &theta, v.view(), y.view(), &[0.1, 0.4, 0.9]).unwrap();
        assert!(out.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let theta = cfg.init_params(5, false);
        let v = random_grid(8, 12, 1);
        let y = random_grid(8, 12, 2);
        let t = [0.1, 0.4, 0.9];
        let a = net_forward(&cfg, &theta, v.view(), y.view(), &t).unwrap();
        let b = net_forward(&cfg, &theta, v.view(), y.view(), &t).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_shape_is_f_by_b() {
        let cfg = tiny_cfg();
        let theta = cfg.init_params(5, false);
        let v = random_grid(16, 20, 1);
        let y = random_grid(16, 20, 2);
        let out = net_forward(&cfg, &theta, v.view(), y.view(), &[0.2, 0.5, 0.7, 0.9]).unwrap();
        assert_eq!(out.dim(), (16, 4));
    }

    #[test]
    fn grid_longer_than_frames_rejected() {
        let cfg = tiny_cfg();
        let theta = cfg.init_params(5, false);
        let v = random_grid(8, 4, 1);
        let y = random_grid(8, 4, 2);
        let times = vec![0.1; 5];
        assert!(net_forward(&cfg, &theta, v.view(), y.view(), &times).is_err());
    }

    #[test]
    fn receptive_field_probe() {
        let cfg = tiny_cfg(); // 5 convs -> 5 frames of context per side
        let rf_side = (cfg.receptive_frames() - 1) / 2;
        assert_eq!(rf_side, 5);
        let theta = cfg.init_params(7, false);
        let (f, k) = (8, 24);
        let v = random_grid(f, k, 1);
        let y = random_grid(f, k, 2);
        let times = [0.1, 0.5, 0.9];
        let base = net_forward(&cfg, &theta, v.view(), y.view(), &times).unwrap();

        // Output frame j=2 sits at global column k-1 = 23. Perturbing a column
        // farther than rf_side cannot change it; perturbing inside must.
        let mut v_far = v.clone();
        v_far[[3, 23 - rf_side - 1]] += Complex64::new(10.0, -5.0);
        let out_far = net_forward(&cfg, &theta, v_far.view(), y.view(), &times).unwrap();
        for fi in 0..f {
            assert_eq!(out_far[[fi, 2]], base[[fi, 2]], "outside receptive field");
        }

        let mut v_near = v.clone();
        v_near[[3, 23 - rf_side + 1]] += Complex64::new(10.0, -5.0);
        let out_near = net_forward(&cfg, &theta, v_near.view(), y.view(), &times).unwrap();
        assert!((0..f).any(|fi| out_near[[fi, 2]] != base[[fi, 2]]), "inside receptive field");
    }

    #[test]
    fn time_features_injective_on_grid() {
        let dim = 8;
        let grid: Vec<f64> = (1..=20).map(|i| 0.03 + 0.0485 * i as f64).collect();
        for (i, &a) in grid.iter().enumerate() {
            for &b in grid.iter().skip(i + 1) {
                let ea = time_features(a, dim);
                let eb = time_features(b, dim);
                let d2: f64 = ea.iter().zip(&eb).map(|(x, y)| (x - y).powi(2)).sum();
                assert!(d2 > 1e-12, "embeddings collide for t={a}, t={b}");
            }
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let cfg = tiny_cfg();
        let theta = cfg.init_params(5, false);
        let v = random_grid(8, 12, 1);
        let y = random_grid(8, 12, 2);
        let t = [0.1, 0.4, 0.9];
        let cot = Array2::zeros((8, 3));
        let grad = net_backward(&cfg, &theta, v.view(), y.view(), &t, cot.view()).unwrap();
        assert!(grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cotangent_shape_mismatch_rejected() {
        let cfg = tiny_cfg();
        let theta = cfg.init_params(5, false);
        let v = random_grid(8, 12, 1);
        let y = random_grid(8, 12, 2);
        let t = [0.1, 0.4, 0.9];
        let cot = Array2::zeros((7, 3));
        assert!(net_backward(&cfg, &theta, v.view(), y.view(), &t, cot.view()).is_err());
    }

    /// Scalar objective for finite differences: Re/Im-weighted sum of the
    /// network output, which makes the cotangent a constant grid.
    fn probe_loss(out: &Array2<Complex64>) -> f64 {
        out.iter().enumerate().map(|(i, c)| (i as f64 * 0.01 + 0.3) * (c.re + 0.5 * c.im)).sum()
    }

    fn probe_cotangent(dim: (usize, usize)) -> Array2<Complex64> {
        let (f, b) = dim;
        Array2::from_shape_fn((f, b), |(fi, j)| {
            let i = fi * b + j;
            Complex64::new(i as f64 * 0.01 + 0.3, 0.5 * (i as f64 * 0.01 + 0.3))
        })
    }

    fn fd_check(cfg: &NetConfig, n_coords: usize, seed: u64) {
        let mut theta = cfg.init_params(seed, false);
        let v = random_grid(8, 12, 100 + seed);
        let y = random_grid(8, 12, 200 + seed);
        let t = [0.1, 0.4, 0.9];
        let out = net_forward(cfg, &theta, v.view(), y.view(), &t).unwrap();
        let cot = probe_cotangent(out.dim());
        let grad = net_backward(cfg, &theta, v.view(), y.view(), &t, cot.view()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
        let h = 1e-3;
        for _ in 0..n_coords {
            let i = rng.gen_range(0..theta.len());
            let orig = theta.data[i];
            theta.data[i] = orig + h;
            let fp = probe_loss(&net_forward(cfg, &theta, v.view(), y.view(), &t).unwrap());
            theta.data[i] = orig - h;
            let fm = probe_loss(&net_forward(cfg, &theta, v.view(), y.view(), &t).unwrap());
            theta.data[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let an = grad.data[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "coord {i}: fd={fd} analytic={an}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_depth1() {
        fd_check(&tiny_cfg(), 50, 11);
    }

    #[test]
    fn gradient_matches_finite_differences_depth2() {
        let cfg = NetConfig { channels: 2, depth: 2, kernel: 3, time_embed_dim: 4 };
        fd_check(&cfg, 40, 13);
    }

    #[test]
    fn depth0_gradient_matches_linear_closed_form() {
        // depth 0 is a single conv: out = sum_i w_i * x_i + b, so the
        // gradient of the probe loss is the correlation of the cotangent
        // with the corresponding input patches.
        let cfg = NetConfig { channels: 1, depth: 0, kernel: 3, time_embed_dim: 2 };
        let theta = cfg.init_params(17, false);
        let (f, k) = (6, 9);
        let v = random_grid(f, k, 31);
        let y = random_grid(f, k, 32);
        let t = [0.2, 0.8];
        let out = net_forward(&cfg, &theta, v.view(), y.view(), &t).unwrap();
        let cot = probe_cotangent(out.dim());
        let grad = net_backward(&cfg, &theta, v.view(), y.view(), &t, cot.view()).unwrap();

        // Closed form for the bias of output channel 0 (real part): the sum
        // of the real cotangent over the cropped window.
        let layout = cfg.layout();
        let r_b = layout.range_of("head.b").unwrap();
        let expect_b0: f64 = cot.iter().map(|c| c.re).sum();
        let expect_b1: f64 = cot.iter().map(|c| c.im).sum();
        assert!((grad.data[r_b.start] - expect_b0).abs() < 1e-10);
        assert!((grad.data[r_b.start + 1] - expect_b1).abs() < 1e-10);

        // Closed form for one weight: w[out=0][in=2][kf=1][kt=1] multiplies
        // y.re at the same (f, t); gradient = sum over window of cot.re * y.re.
        let r_w = layout.range_of("head.w").unwrap();
        let widx = ((0 * IN_CHANNELS + 2) * 3 + 1) * 3 + 1;
        let mut expect = 0.0;
        for fi in 0..f {
            for (j, tcol) in (k - 2..k).enumerate() {
                expect += cot[[fi, j]].re * y[[fi, tcol]].re;
            }
        }
        assert!((grad.data[r_w.start + widx] - expect).abs() < 1e-10);
    }
}
