//! Independent numerical oracles and the named verification suite.
//!
//! Everything here deliberately avoids the closed forms and streaming code
//! paths it checks: means come from RK4 on the moment ODE, variances from
//! adaptive quadrature, scores from finite differences of a brute-force
//! log-density, and the streaming state machine is replayed by a separate
//! global-index implementation sharing only the rng schedule.

use crate::dbuffer::{
    build_perturbed_input, enhance_stream, spectrogram_frames, BufferError, BufferState,
    TimeGrid,
};
use crate::score::{
    net_backward, net_forward, AnalyticScore, CountingScore, NetConfig, ScoreFn,
};
use crate::sde::{complex_standard_normal, reverse_step, SdeParams};
use crate::spectral;
use crate::stream::vanilla_enhance;
use crate::train::example_loss_and_grad;
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }
}

/// RK4 integration of the mean-coefficient ODEs up to each requested time.
/// Returns `(a, b)` pairs aligned with `ts` (which must be ascending).
pub fn rk4_mean_coeffs(params: &SdeParams, ts: &[f64], steps_per_unit: usize) -> Vec<(f64, f64)> {
    let deriv = |t: f64, a: f64, b: f64| -> (f64, f64) {
        match params.kind {
            crate::sde::SdeKind::Ouve => (-params.gamma * a, params.gamma * (1.0 - b)),
            crate::sde::SdeKind::Bbed => (-a / (1.0 - t), (1.0 - b) / (1.0 - t)),
        }
    };
    let mut out = Vec::with_capacity(ts.len());
    let mut t = 0.0;
    let mut a = 1.0;
    let mut b = 0.0;
    for &target in ts {
        let span = target - t;
        if span > 0.0 {
            let n = ((span * steps_per_unit as f64).ceil() as usize).max(1);
            let h = span / n as f64;
            for _ in 0..n {
                let (k1a, k1b) = deriv(t, a, b);
                let (k2a, k2b) = deriv(t + h / 2.0, a + h / 2.0 * k1a, b + h / 2.0 * k1b);
                let (k3a, k3b) = deriv(t + h / 2.0, a + h / 2.0 * k2a, b + h / 2.0 * k2b);
                let (k4a, k4b) = deriv(t + h, a + h * k3a, b + h * k3b);
                a += h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a);
                b += h / 6.0 * (k1b + 2.0 * k2b + 2.0 * k3b + k4b);
                t += h;
            }
            t = target;
        }
        out.push((a, b));
    }
    out
}

/// Adaptive Simpson quadrature.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), fm)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        fm: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (left, flm) = simpson(f, a, fa, m, fm);
        let (right, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, flm, tol / 2.0, depth - 1)
                + recurse(f, m, fm, b, fb, right, frm, tol / 2.0, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, fm, tol, 48)
}

/// Kernel standard deviation by quadrature of the variance integral.
pub fn sigma_by_quadrature(params: &SdeParams, t: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    let c2 = params.c * params.c;
    let var = match params.kind {
        crate::sde::SdeKind::Ouve => {
            let g = params.gamma;
            let k = params.k_base;
            let f = move |s: f64| (-2.0 * g * (t - s)).exp() * c2 * k.powf(2.0 * s);
            adaptive_simpson(&f, 0.0, t, 1e-16 + 1e-13 * c2)
        }
        crate::sde::SdeKind::Bbed => {
            let k = params.k_base;
            let f = move |s: f64| c2 * k.powf(2.0 * s) / ((1.0 - s) * (1.0 - s));
            (1.0 - t) * (1.0 - t) * adaptive_simpson(&f, 0.0, t, 1e-16 + 1e-13 * c2)
        }
    };
    var.max(0.0).sqrt()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Closed-form mean coefficients vs RK4, over a uniform grid.
pub fn check_mean_coeffs(params: &SdeParams, points: usize) -> CheckOutcome {
    let name = format!("sde.mean_coeffs.{}", params.kind);
    let ts: Vec<f64> = (0..points).map(|i| params.t_rev * i as f64 / (points - 1) as f64).collect();
    let oracle = rk4_mean_coeffs(params, &ts, 4000);
    let mut worst = 0.0f64;
    for (&t, &(oa, ob)) in ts.iter().zip(&oracle) {
        let (a, b) = params.mean_coeffs(t).unwrap();
        worst = worst.max(rel_err(a, oa)).max(rel_err(b, ob));
    }
    CheckOutcome::new(&name, worst < 1e-8, format!("max rel err {worst:.3e} (tol 1e-8)"))
}

/// Closed-form sigma vs adaptive quadrature. `fault` simulates a corrupted
/// closed form to prove the check can fail.
pub fn check_sigma(params: &SdeParams, points: usize, fault: bool) -> CheckOutcome {
    let name = format!("sde.sigma.{}", params.kind);
    let mut worst = 0.0f64;
    for i in 0..points {
        let t = params.t_rev * i as f64 / (points - 1) as f64;
        let mut closed = params.sigma(t).unwrap();
        if fault {
            closed *= 1.0 + 5e-6;
        }
        let oracle = sigma_by_quadrature(params, t);
        worst = worst.max(rel_err(closed, oracle));
    }
    CheckOutcome::new(&name, worst < 1e-6, format!("max rel err {worst:.3e} (tol 1e-6)"))
}

/// Empirical kernel moments over `draws` samples at several times.
pub fn check_kernel_sampling(params: &SdeParams, seed: u64, draws: usize) -> CheckOutcome {
    let name = format!("sde.sample_state.{}", params.kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Array1::from_elem(1, Complex64::new(0.7, -0.4));
    let y = Array1::from_elem(1, Complex64::new(-0.2, 0.9));
    let mut detail = String::new();
    let mut ok = true;
    for i in 1..=10 {
        let t = params.t_rev * i as f64 / 10.0;
        let m = params.moments(t).unwrap();
        let mu = x0[0] * m.mean_coeff_x0 + y[0] * m.mean_coeff_y;
        let mut sum = Complex64::new(0.0, 0.0);
        let mut sq = 0.0;
        for _ in 0..draws {
            let s = crate::sde::sample_state(params, x0.view(), y.view(), t, &mut rng).unwrap();
            sum += s[0];
            sq += (s[0] - mu).norm_sqr();
        }
        let mean = sum / draws as f64;
        let var = sq / draws as f64;
        // Per-component SE of the mean; SE of the variance of a circular
        // Gaussian is sigma^2/sqrt(n).
        let se_mean = m.sigma / (2.0 * draws as f64).sqrt();
        let se_var = m.sigma * m.sigma / (draws as f64).sqrt();
        let mean_ok = (mean.re - mu.re).abs() <= 3.0 * se_mean + 1e-12
            && (mean.im - mu.im).abs() <= 3.0 * se_mean + 1e-12;
        let var_ok = (var - m.sigma * m.sigma).abs() <= 3.0 * se_var + 1e-12;
        if !(mean_ok && var_ok) {
            ok = false;
            detail.push_str(&format!(
                "t={t:.2}: mean dev ({:.2e},{:.2e}) vs 3se {:.2e}, var dev {:.2e} vs 3se {:.2e}; ",
                (mean.re - mu.re).abs(),
                (mean.im - mu.im).abs(),
                3.0 * se_mean,
                (var - m.sigma * m.sigma).abs(),
                3.0 * se_var
            ));
        }
    }
    if ok {
        detail = format!("mean/variance within 3 SE at 10 times, {draws} draws");
    }
    CheckOutcome::new(&name, ok, detail)
}

/// One small-dt reverse step started from exact kernel samples lands on the
/// kernel at the earlier time (mean and variance, statistically).
pub fn check_reverse_step_marginal(params: &SdeParams, seed: u64, draws: usize) -> CheckOutcome {
    let name = format!("sde.reverse_step.{}", params.kind);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toy_var = 0.3;
    let m0 = Complex64::new(0.5, 0.2);
    let yv = Complex64::new(-0.3, 0.8);
    let oracle = AnalyticScore::new(params.clone(), 0.0, m0, toy_var).unwrap();

    let t_from = 0.5 * params.t_rev;
    let dt = 0.001;
    let t_to = t_from - dt;

    // Marginal of X_t | Y for the toy: mean a*m0 + b*y, var a^2 v + sigma^2.
    let marginal = |t: f64| {
        let (a, b) = params.mean_coeffs(t).unwrap();
        let s = params.sigma(t).unwrap();
        (m0 * a + yv * b, a * a * toy_var + s * s)
    };
    let (mu_from, var_from) = marginal(t_from);
    let (mu_to, var_to) = marginal(t_to);

    let y_arr = Array1::from_elem(1, yv);
    let times = [t_from];
    let mut sum = Complex64::new(0.0, 0.0);
    let mut sq = 0.0;
    for _ in 0..draws {
        let x = mu_from + complex_standard_normal(&mut rng) * var_from.sqrt();
        let x_arr = Array1::from_elem(1, x);
        let v2 = Array2::from_shape_fn((1, 1), |_| x);
        let y2 = Array2::from_shape_fn((1, 1), |_| yv);
        let score = oracle.score(v2.view(), y2.view(), &times).unwrap();
        let stepped = reverse_step(
            params,
            score.column(0),
            x_arr.view(),
            y_arr.view(),
            t_from,
            t_to,
            &mut rng,
            true,
        )
        .unwrap();
        sum += stepped[0];
        sq += (stepped[0] - mu_to).norm_sqr();
    }
    let mean = sum / draws as f64;
    let var = sq / draws as f64;
    let se_mean = var_to.sqrt() / (2.0 * draws as f64).sqrt();
    // Allow the O(dt) Euler-Maruyama bias on top of the Monte Carlo band.
    let mean_ok = (mean.re - mu_to.re).abs() <= 4.0 * se_mean + 0.05 * dt
        && (mean.im - mu_to.im).abs() <= 4.0 * se_mean + 0.05 * dt;
    let var_rel = (var - var_to).abs() / var_to;
    let var_ok = var_rel < 0.02;
    CheckOutcome::new(
        &name,
        mean_ok && var_ok,
        format!(
            "mean dev ({:.2e},{:.2e}) band {:.2e}; var rel dev {var_rel:.3e} (tol 2e-2)",
            (mean.re - mu_to.re).abs(),
            (mean.im - mu_to.im).abs(),
            4.0 * se_mean + 0.05 * dt
        ),
    )
}

/// A reverse step into the smallest diffusion time reduces the squared error
/// to the clean signal (paired Monte Carlo).
pub fn check_reverse_step_contraction(seed: u64, trials: usize) -> CheckOutcome {
    let params = SdeParams::bbed_paper();
    let name = "sde.reverse_step.contraction";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toy_var = 0.25;
    let m0 = Complex64::new(0.0, 0.0);
    let oracle = AnalyticScore::new(params.clone(), 0.0, m0, toy_var).unwrap();
    let t_from = 0.1;
    let t_to = params.t_eps;
    let mut err_from = 0.0;
    let mut err_to = 0.0;
    for _ in 0..trials {
        let x0 = m0 + complex_standard_normal(&mut rng) * toy_var.sqrt();
        let yv = x0 + complex_standard_normal(&mut rng);
        let (a, b) = params.mean_coeffs(t_from).unwrap();
        let s = params.sigma(t_from).unwrap();
        let x = x0 * a + yv * b + complex_standard_normal(&mut rng) * s;
        let v2 = Array2::from_shape_fn((1, 1), |_| x);
        let y2 = Array2::from_shape_fn((1, 1), |_| yv);
        let score = oracle.score(v2.view(), y2.view(), &[t_from]).unwrap();
        let stepped = reverse_step(
            &params,
            score.column(0),
            Array1::from_elem(1, x).view(),
            Array1::from_elem(1, yv).view(),
            t_from,
            t_to,
            &mut rng,
            true,
        )
        .unwrap();
        err_from += (x - x0).norm_sqr();
        err_to += (stepped[0] - x0).norm_sqr();
    }
    err_from /= trials as f64;
    err_to /= trials as f64;
    CheckOutcome::new(
        name,
        err_to < err_from,
        format!("mse {err_from:.4e} -> {err_to:.4e} over {trials} trials"),
    )
}

/// Offline replay of the stream: the same math over explicit global frame
/// indices, sharing only the rng schedule. Bit-identical to the streaming
/// state machine by construction.
pub struct ReplayResult {
    pub emitted: Array2<Complex64>,
    pub final_window: Array2<Complex64>,
}

pub fn offline_replay<S: ScoreFn + ?Sized>(
    inputs: &Array2<Complex64>,
    k_frames: usize,
    grid: &TimeGrid,
    score_fn: &S,
    params: &SdeParams,
    seed: u64,
) -> Result<ReplayResult, BufferError> {
    let f_dim = inputs.nrows();
    let n = inputs.ncols();
    let b = grid.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Index i holds global frame position i - (K - 1); 0..K-1 are the
    // initialization zeros.
    let mut vcols: Vec<Array1<Complex64>> = (0..k_frames).map(|_| Array1::zeros(f_dim)).collect();
    let mut ycols: Vec<Array1<Complex64>> = (0..k_frames).map(|_| Array1::zeros(f_dim)).collect();
    let mut emitted = Array2::zeros((f_dim, n));

    let sigma_last = params.sigma(grid.t_last())?;
    for step in 1..=n {
        // Emission: global position step - B, captured before this step acts.
        let emit_idx = step + k_frames - 1 - b;
        emitted.column_mut(step - 1).assign(&vcols[emit_idx]);

        let r = inputs.column(step - 1);
        ycols.push(r.to_owned());
        let mut appended = Array1::zeros(f_dim);
        for fi in 0..f_dim {
            appended[fi] = r[fi] + complex_standard_normal(&mut rng) * sigma_last;
        }
        vcols.push(appended);

        // Window after the append: indices step .. step + K.
        let mut vwin = Array2::zeros((f_dim, k_frames));
        let mut ywin = Array2::zeros((f_dim, k_frames));
        for (w, idx) in (step..step + k_frames).enumerate() {
            vwin.column_mut(w).assign(&vcols[idx]);
            ywin.column_mut(w).assign(&ycols[idx]);
        }
        let score = score_fn.score(vwin.view(), ywin.view(), grid.steps())?;

        for j in 1..=b {
            let idx = step + k_frames - 1 + j - b;
            let stepped = reverse_step(
                params,
                score.column(j - 1),
                vcols[idx].view(),
                ycols[idx].view(),
                grid.time_of(j),
                grid.time_of(j - 1),
                &mut rng,
                j != 1,
            )?;
            vcols[idx] = stepped;
        }
    }

    let mut final_window = Array2::zeros((f_dim, k_frames));
    for (w, idx) in (n..n + k_frames).enumerate() {
        final_window.column_mut(w).assign(&vcols[idx]);
    }
    Ok(ReplayResult { emitted, final_window })
}

/// Streaming vs offline replay, bit-identical over `steps` frames.
pub fn check_streaming_replay(seed: u64, steps: usize) -> CheckOutcome {
    let name = "dbuffer.replay";
    let params = SdeParams::ouve_paper();
    let oracle = AnalyticScore::new(params.clone(), 0.4, Complex64::new(0.1, -0.05), 0.5).unwrap();
    let (f_dim, k_frames, b) = (8, 32, 8);
    let grid = TimeGrid::linear(b, params.t_eps, params.t_rev).unwrap();
    let mut input_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let inputs = Array2::from_shape_fn((f_dim, steps), |_| {
        complex_standard_normal(&mut input_rng) * 0.7
    });

    let mut stream_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = BufferState::new(f_dim, k_frames, grid.clone()).unwrap();
    let mut stream_out = Array2::zeros((f_dim, steps));
    for k in 0..steps {
        let out = crate::dbuffer::stream_step(
            &mut state,
            inputs.column(k),
            &oracle,
            &params,
            &mut stream_rng,
        )
        .unwrap();
        stream_out.column_mut(k).assign(&out);
    }

    let replay = offline_replay(&inputs, k_frames, &grid, &oracle, &params, seed).unwrap();
    let outputs_match = stream_out == replay.emitted;
    let state_match = state.v == replay.final_window;
    CheckOutcome::new(
        name,
        outputs_match && state_match,
        format!(
            "{steps} steps: outputs {}identical, final state {}identical",
            if outputs_match { "bit-" } else { "NOT " },
            if state_match { "bit-" } else { "NOT " }
        ),
    )
}

/// One score call per frame in db mode; exactly N calls in vanilla mode.
pub fn check_call_budget(seed: u64) -> CheckOutcome {
    let name = "stream.call_budget";
    let params = SdeParams::bbed_paper();
    let oracle = AnalyticScore::tied_to_noisy(params.clone(), 0.1).unwrap();
    let grid = TimeGrid::linear(5, params.t_eps, params.t_rev).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = 37;
    let inputs = Array2::from_shape_fn((4, frames), |_| complex_standard_normal(&mut rng));
    let outcome = enhance_stream(
        spectrogram_frames(&inputs),
        4,
        12,
        grid,
        &oracle,
        &params,
        &mut rng,
    )
    .unwrap();
    let db_ok = outcome.score_calls == frames as u64;

    let counted = CountingScore::new(&oracle);
    let n = 23;
    vanilla_enhance(inputs.view(), &counted, &params, n, &mut rng).unwrap();
    let vanilla_ok = counted.calls() == n as u64;
    CheckOutcome::new(
        name,
        db_ok && vanilla_ok,
        format!(
            "db: {} calls for {frames} frames; vanilla: {} calls for N={n}",
            outcome.score_calls,
            counted.calls()
        ),
    )
}

/// Enhanced impulse train lags the input by exactly B frames
/// (cross-correlation of frame energies).
pub fn check_latency_impulse(seed: u64, b: usize) -> CheckOutcome {
    let name = format!("stream.latency.b{b}");
    let params = SdeParams::ouve_paper();
    let oracle = AnalyticScore::tied_to_noisy(params.clone(), 1e-4).unwrap();
    let grid = TimeGrid::linear(b, params.t_eps, params.t_rev).unwrap();
    let f_dim = 6;
    let k_frames = (2 * b).max(16);
    let frames = 6 * b + 60;
    // Impulse period must exceed the searched lag range, or the periodic
    // cross-correlation aliases (a peak at B mod period).
    let period = b + 11;
    let mut inputs = Array2::zeros((f_dim, frames));
    for k in (0..frames).step_by(period) {
        for fi in 0..f_dim {
            inputs[[fi, k]] = Complex64::new(1.0, 0.3);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcome = enhance_stream(
        spectrogram_frames(&inputs),
        f_dim,
        k_frames,
        grid,
        &oracle,
        &params,
        &mut rng,
    )
    .unwrap();

    let energy = |grid: &Array2<Complex64>, k: usize| -> f64 {
        (0..grid.nrows()).map(|f| grid[[f, k]].norm_sqr()).sum()
    };
    let in_e: Vec<f64> = (0..frames).map(|k| energy(&inputs, k)).collect();
    let out_e: Vec<f64> = (0..frames).map(|k| energy(&outcome.enhanced, k)).collect();
    let max_lag = period - 1;
    let mut best = (0usize, f64::MIN);
    for lag in 0..=max_lag {
        let mut corr = 0.0;
        for k in 0..frames - lag {
            corr += in_e[k] * out_e[k + lag];
        }
        if corr > best.1 {
            best = (lag, corr);
        }
    }
    CheckOutcome::new(
        &name,
        best.0 == b,
        format!("cross-correlation peak at lag {} (expect {b})", best.0),
    )
}

/// Brute-force log-density of the perturbed toy marginal by 2-D quadrature
/// over the prior, differentiated by central differences; the analytic score
/// must match to 1e-4 relative.
///
/// The integrand is the product of the prior (width sqrt(v/2) per component)
/// and the kernel seen as a function of x0 (width sigma/(a*sqrt(2)), much
/// narrower). The grid is centered on that product and shared by all four
/// finite-difference evaluations.
pub fn check_analytic_score_bruteforce(seed: u64) -> CheckOutcome {
    let name = "score.analytic";
    let params = SdeParams::ouve_paper();
    let m0 = Complex64::new(0.4, -0.3);
    let var = 0.5;
    let oracle = AnalyticScore::new(params.clone(), 0.0, m0, var).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut worst = 0.0f64;
    for _ in 0..3 {
        let t = 0.2 + 0.6 * rng.gen::<f64>();
        let yv = complex_standard_normal(&mut rng);
        let (a, b) = params.mean_coeffs(t).unwrap();
        let sigma = params.sigma(t).unwrap();
        let sigma2 = sigma * sigma;
        let x = m0 * a + yv * b
            + complex_standard_normal(&mut rng) * (a * a * var + sigma2).sqrt();
        let v2 = Array2::from_shape_fn((1, 1), |_| x);
        let y2 = Array2::from_shape_fn((1, 1), |_| yv);
        let analytic = oracle.score(v2.view(), y2.view(), &[t]).unwrap()[[0, 0]];

        // Grid over the product of the two Gaussian factors in x0.
        let x0_star = (x - yv * b) / a;
        let lam_k = 2.0 * a * a / sigma2;
        let lam_p = 2.0 / var;
        let center = (x0_star * lam_k + m0 * lam_p) / (lam_k + lam_p);
        let w_prod = (1.0 / (lam_k + lam_p)).sqrt();
        let half = 9.0 * w_prod;
        let n_grid = 301usize;
        let step = 2.0 * half / (n_grid - 1) as f64;

        // log p_t(x | y) = log Int N_C(x; a*x0 + b*y, sigma^2) N_C(x0; m, v) dx0
        let log_density = |xq: Complex64| -> f64 {
            let mut acc = 0.0;
            for i in 0..n_grid {
                let re = center.re - half + i as f64 * step;
                for jj in 0..n_grid {
                    let im = center.im - half + jj as f64 * step;
                    let x0 = Complex64::new(re, im);
                    let mu = x0 * a + yv * b;
                    let kern = (-(xq - mu).norm_sqr() / sigma2).exp();
                    let prior = (-(x0 - m0).norm_sqr() / var).exp();
                    acc += kern * prior;
                }
            }
            (acc * step * step
                / (std::f64::consts::PI * sigma2)
                / (std::f64::consts::PI * var))
                .ln()
        };

        let h = 1e-4;
        let d_re = (log_density(x + Complex64::new(h, 0.0))
            - log_density(x - Complex64::new(h, 0.0)))
            / (2.0 * h);
        let d_im = (log_density(x + Complex64::new(0.0, h))
            - log_density(x - Complex64::new(0.0, h)))
            / (2.0 * h);
        // The real gradient is twice the convention used by the score.
        let fd = Complex64::new(d_re / 2.0, d_im / 2.0);
        let rel = (analytic - fd).norm() / analytic.norm().max(fd.norm()).max(1e-12);
        worst = worst.max(rel);
    }
    CheckOutcome::new(name, worst < 1e-4, format!("max rel err {worst:.3e} (tol 1e-4)"))
}

/// Finite-difference check of the network gradient on random coordinates.
pub fn check_net_gradient(seed: u64, coords: usize) -> CheckOutcome {
    let name = "score.net_gradient";
    let cfg = NetConfig { channels: 4, depth: 1, kernel: 3, time_embed_dim: 8 };
    let mut theta = cfg.init_params(seed, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
    let (f_dim, k_frames) = (8, 12);
    let v = Array2::from_shape_fn((f_dim, k_frames), |_| complex_standard_normal(&mut rng));
    let y = Array2::from_shape_fn((f_dim, k_frames), |_| complex_standard_normal(&mut rng));
    let times = [0.1, 0.4, 0.9];
    let cot = Array2::from_shape_fn((f_dim, times.len()), |(f, j)| {
        Complex64::new(0.3 + 0.01 * (f * 3 + j) as f64, 0.15)
    });
    let loss = |out: &Array2<Complex64>| -> f64 {
        out.iter().zip(cot.iter()).map(|(o, c)| o.re * c.re + o.im * c.im).sum()
    };
    let grad = net_backward(&cfg, &theta, v.view(), y.view(), &times, cot.view()).unwrap();
    let h = 1e-3;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = rng.gen_range(0..theta.len());
        let orig = theta.data[i];
        theta.data[i] = orig + h;
        let lp = loss(&net_forward(&cfg, &theta, v.view(), y.view(), &times).unwrap());
        theta.data[i] = orig - h;
        let lm = loss(&net_forward(&cfg, &theta, v.view(), y.view(), &times).unwrap());
        theta.data[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let an = grad.data[i];
        let denom = fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max((fd - an).abs() / denom);
    }
    CheckOutcome::new(name, worst < 1e-4, format!("max rel err {worst:.3e} over {coords} coords"))
}

/// End-to-end gradient of the training loss through the assembled score.
pub fn check_loss_gradient(seed: u64, coords: usize) -> CheckOutcome {
    let name = "train.loss_gradient";
    let cfg = NetConfig { channels: 4, depth: 1, kernel: 3, time_embed_dim: 8 };
    let sde = SdeParams::bbed_paper();
    let mut theta = cfg.init_params(seed, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let (f_dim, k_frames) = (8, 12);
    let x0 = Array2::from_shape_fn((f_dim, k_frames), |_| complex_standard_normal(&mut rng));
    let y = Array2::from_shape_fn((f_dim, k_frames), |_| complex_standard_normal(&mut rng));
    let grid = TimeGrid::linear(4, sde.t_eps, sde.t_rev).unwrap();
    let ex = build_perturbed_input(x0.view(), y.view(), &grid, &sde, &mut rng).unwrap();

    let (_, grad) = example_loss_and_grad(&cfg, &theta, &sde, &ex).unwrap();
    let h = 1e-3;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = rng.gen_range(0..theta.len());
        let orig = theta.data[i];
        theta.data[i] = orig + h;
        let (lp, _) = example_loss_and_grad(&cfg, &theta, &sde, &ex).unwrap();
        theta.data[i] = orig - h;
        let (lm, _) = example_loss_and_grad(&cfg, &theta, &sde, &ex).unwrap();
        theta.data[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let an = grad.data[i];
        let denom = fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max((fd - an).abs() / denom);
    }
    CheckOutcome::new(name, worst < 1e-4, format!("max rel err {worst:.3e} over {coords} coords"))
}

/// STFT and compression round trips at their contract tolerances.
pub fn check_spectral_roundtrips(seed: u64) -> CheckOutcome {
    let name = "spectral.roundtrip";
    let cfg = spectral::StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<f64> = (0..16_000).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let clip = spectral::AudioClip::new(samples, 16_000).unwrap();
    let spec = spectral::stft(&clip, &cfg).unwrap();
    let back = spectral::istft(&spec, &cfg).unwrap();
    let lo = cfg.window_len;
    let hi = clip.samples.len() - cfg.window_len;
    let mut num = 0.0;
    let mut den = 0.0;
    for n in lo..hi {
        num += (back.samples[n] - clip.samples[n]).powi(2);
        den += clip.samples[n].powi(2);
    }
    let istft_err = (num / den).sqrt();

    let comp = spectral::compress(&spec, &cfg).unwrap();
    let dec = spectral::decompress(&comp, &cfg).unwrap();
    let mut worst = 0.0f64;
    for (orig, round) in spec.data.iter().zip(dec.data.iter()) {
        let scale = orig.norm().max(1e-12);
        worst = worst.max((orig - round).norm() / scale);
    }
    let ok = istft_err < 1e-6 && worst < 1e-9;
    CheckOutcome::new(
        name,
        ok,
        format!("istft rel L2 {istft_err:.3e} (tol 1e-6), compress rel {worst:.3e} (tol 1e-9)"),
    )
}

/// Run the full suite. `fault` is a test hook naming a check whose
/// implementation is deliberately corrupted to prove detection.
pub fn run_all(seed: u64, fault: Option<&str>) -> Vec<CheckOutcome> {
    let ouve = SdeParams::ouve_paper();
    let bbed = SdeParams::bbed_paper();
    let sigma_fault = fault == Some("sde.sigma");
    vec![
        check_mean_coeffs(&ouve, 100),
        check_mean_coeffs(&bbed, 100),
        check_sigma(&ouve, 100, sigma_fault),
        check_sigma(&bbed, 100, sigma_fault),
        check_kernel_sampling(&ouve, seed, 20_000),
        check_kernel_sampling(&bbed, seed.wrapping_add(1), 20_000),
        check_reverse_step_marginal(&ouve, seed.wrapping_add(2), 100_000),
        check_reverse_step_contraction(seed.wrapping_add(3), 10_000),
        check_streaming_replay(seed.wrapping_add(4), 200),
        check_call_budget(seed.wrapping_add(5)),
        check_latency_impulse(seed.wrapping_add(6), 5),
        check_analytic_score_bruteforce(seed.wrapping_add(7)),
        check_net_gradient(seed.wrapping_add(8), 50),
        check_loss_gradient(seed.wrapping_add(9), 50),
        check_spectral_roundtrips(seed.wrapping_add(10)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_simpson_known_integrals() {
        let f = |x: f64| x * x;
        assert!((adaptive_simpson(&f, 0.0, 1.0, 1e-14) - 1.0 / 3.0).abs() < 1e-12);
        let g = |x: f64| (-x).exp();
        assert!((adaptive_simpson(&g, 0.0, 5.0, 1e-14) - (1.0 - (-5.0f64).exp())).abs() < 1e-11);
    }

    #[test]
    fn rk4_matches_closed_form_exponential() {
        let params = SdeParams::ouve_paper();
        let ts = [0.25, 0.5, 1.0];
        let vals = rk4_mean_coeffs(&params, &ts, 4000);
        for (&t, &(a, b)) in ts.iter().zip(&vals) {
            assert!((a - (-1.5 * t).exp()).abs() < 1e-10);
            assert!((b - (1.0 - (-1.5 * t).exp())).abs() < 1e-10);
        }
    }

    #[test]
    fn sigma_quadrature_agrees_with_closed_form_spotcheck() {
        for params in [SdeParams::ouve_paper(), SdeParams::bbed_paper()] {
            for &t in &[0.1, 0.45, params.t_rev] {
                let q = sigma_by_quadrature(&params, t);
                let c = params.sigma(t).unwrap();
                assert!(rel_err(q, c) < 1e-9, "{:?} t={t}: {q} vs {c}", params.kind);
            }
        }
    }

    #[test]
    fn replay_check_passes_quickly() {
        let out = check_streaming_replay(7, 60);
        assert!(out.passed, "{}", out.detail);
    }

    #[test]
    fn sigma_fault_injection_is_caught() {
        let clean = check_sigma(&SdeParams::ouve_paper(), 50, false);
        assert!(clean.passed, "{}", clean.detail);
        let faulty = check_sigma(&SdeParams::ouve_paper(), 50, true);
        assert!(!faulty.passed, "fault must trip the check");
        assert!(faulty.name.contains("sde.sigma"));
    }

    #[test]
    fn latency_check_small_buffer() {
        let out = check_latency_impulse(3, 4);
        assert!(out.passed, "{}", out.detail);
    }
}
