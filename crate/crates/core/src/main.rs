//! Command-line entry point: training, enhancement, verification, and
//! synthetic-data generation.
//!
//! Exit codes: 0 ok, 1 usage, 2 validation, 3 runtime.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use diffusion_buffer::config::{AppConfig, ConfigError};
use diffusion_buffer::dbuffer::TimeGrid;
use diffusion_buffer::score::{AnalyticScore, Checkpoint, LearnedScore};
use diffusion_buffer::sde::SdeParams;
use diffusion_buffer::spectral::{self, StftConfig};
use diffusion_buffer::stream::{
    run_enhancement_job, validate_checkpoint, EnhanceMode, JobScore, JobSpec, StreamError,
};
use diffusion_buffer::synth::{make_synth_data, SynthSpec};
use diffusion_buffer::train::{append_trace_csv, make_checkpoint, train_epoch, TrainState};
use diffusion_buffer::verify;
use diffusion_buffer::wav::WavError;
use num_complex::Complex64;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "diffusion-buffer",
    version,
    about = "Online speech enhancement with a sliding-window diffusion buffer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the score network on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Enhance a noisy WAV file.
    Enhance {
        /// Input noisy WAV (PCM16 mono 16 kHz).
        #[arg(long)]
        input: PathBuf,
        /// Clean reference WAV for quality metrics.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Trained checkpoint; mutually exclusive with --oracle.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the analytic Gaussian oracle instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
        /// Oracle conditional variance of the clean signal given the noisy bin.
        #[arg(long, default_value_t = 1e-4)]
        oracle_var: f64,
        /// Oracle conditional-mean coefficient on the noisy bin.
        #[arg(long, default_value_t = 1.0)]
        oracle_coeff: f64,
        #[arg(long, value_parser = ["db", "vanilla"], default_value = "db")]
        mode: String,
        /// Buffer length B (db mode). Must match the checkpoint grid.
        #[arg(long)]
        buffer: Option<usize>,
        /// Reverse steps N (vanilla mode).
        #[arg(long)]
        steps: Option<usize>,
        /// SDE preset for oracle runs: ouve or bbed.
        #[arg(long, value_parser = ["ouve", "bbed"])]
        sde: Option<String>,
        /// Streaming context window in frames (oracle runs).
        #[arg(long)]
        context: Option<usize>,
        /// Enhanced output WAV path.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Report file (key: value text).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-step timing CSV.
        #[arg(long)]
        timings_csv: Option<PathBuf>,
        /// Use raw parameters instead of the EMA shadow.
        #[arg(long)]
        use_theta: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the oracle verification suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test hook: corrupt a named implementation to prove detection.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Generate paired clean/noisy WAVs plus a manifest.
    MakeSynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[arg(long, default_value_t = 1.2)]
        duration_s: f64,
        #[arg(long, default_value_t = 0.0)]
        snr_min: f64,
        #[arg(long, default_value_t = 15.0)]
        snr_max: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        match &e {
            StreamError::InvalidArg(_)
            | StreamError::IncompatibleCheckpoint { .. }
            | StreamError::TooFewSteps { .. } => CliError::Validation(e.to_string()),
            StreamError::Wav(w) => classify_wav(w, e.to_string()),
            StreamError::Spectral(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn classify_wav(w: &WavError, msg: String) -> CliError {
    match w {
        WavError::Io { .. } => CliError::Runtime(msg),
        _ => CliError::Validation(msg),
    }
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(()) => 0,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            3
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, resume, seed } => cmd_train(&config, resume.as_deref(), seed),
        Command::Verify { seed, inject_fault } => cmd_verify(seed, inject_fault.as_deref()),
        Command::MakeSynthData { out, pairs, duration_s, snr_min, snr_max, seed } => {
            let spec = SynthSpec {
                num_pairs: pairs,
                duration_s,
                seed,
                snr_db: (snr_min, snr_max),
                ..SynthSpec::default()
            };
            let manifest =
                make_synth_data(&spec, &out).map_err(|e| CliError::Runtime(e.to_string()))?;
            println!(
                "wrote {} pairs ({} files) and manifest to {}",
                manifest.pairs.len(),
                2 * manifest.pairs.len(),
                out.display()
            );
            Ok(())
        }
        Command::Enhance {
            input,
            reference,
            checkpoint,
            oracle,
            oracle_var,
            oracle_coeff,
            mode,
            buffer,
            steps,
            sde,
            context,
            output,
            report,
            timings_csv,
            use_theta,
            seed,
        } => {
            let mode = match mode.as_str() {
                "db" => EnhanceMode::Db,
                _ => EnhanceMode::Vanilla,
            };
            let requested_sde = match sde.as_deref() {
                Some("ouve") => Some(SdeParams::ouve_paper()),
                Some("bbed") => Some(SdeParams::bbed_paper()),
                _ => None,
            };

            let (score, params, stft, grid, k_frames) = match (&checkpoint, oracle) {
                (Some(path), false) => {
                    let ckpt =
                        Checkpoint::load(path).map_err(|e| CliError::Validation(e.to_string()))?;
                    validate_checkpoint(&ckpt, buffer, requested_sde.as_ref(), None)?;
                    let which = if use_theta { "theta" } else { "ema" };
                    let theta = ckpt
                        .param_vec(which)
                        .map_err(|e| CliError::Validation(e.to_string()))?;
                    let model =
                        LearnedScore::new(ckpt.header.net.clone(), theta, ckpt.header.sde.clone())
                            .map_err(|e| CliError::Validation(e.to_string()))?;
                    let grid = TimeGrid::new(ckpt.header.grid.clone())
                        .map_err(|e| CliError::Validation(e.to_string()))?;
                    (
                        JobScore::Learned(Box::new(model)),
                        ckpt.header.sde.clone(),
                        ckpt.header.stft.clone(),
                        grid,
                        ckpt.header.k_frames,
                    )
                }
                (None, true) => {
                    let params = requested_sde.unwrap_or_else(SdeParams::ouve_paper);
                    let b = buffer.unwrap_or(20);
                    let grid = TimeGrid::linear(b, params.t_eps, params.t_rev)
                        .map_err(|e| CliError::Validation(e.to_string()))?;
                    let score = AnalyticScore::new(
                        params.clone(),
                        oracle_coeff,
                        Complex64::new(0.0, 0.0),
                        oracle_var,
                    )
                    .map_err(|e| CliError::Validation(e.to_string()))?;
                    let k = context.unwrap_or(128).max(b);
                    (JobScore::Oracle { score }, params, StftConfig::default(), grid, k)
                }
                _ => {
                    return Err(CliError::Validation(
                        "provide exactly one of --checkpoint or --oracle".into(),
                    ))
                }
            };

            let spec = JobSpec {
                mode,
                params,
                stft,
                grid,
                k_frames,
                n_steps: steps.unwrap_or(60),
                seed,
                warmup_steps: 10,
            };
            let job_report = run_enhancement_job(
                &input,
                reference.as_deref(),
                &score,
                &spec,
                output.as_deref(),
            )?;
            print!("{}", job_report.to_text());
            if let Some(path) = report {
                job_report.write_text(&path)?;
            }
            if let Some(path) = timings_csv {
                job_report.write_timings_csv(&path)?;
            }
            Ok(())
        }
    }
}

fn cmd_train(
    config_path: &std::path::Path,
    resume: Option<&std::path::Path>,
    seed_override: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = AppConfig::from_path(config_path)?;
    if let Some(seed) = seed_override {
        cfg.train.seed = seed;
    }
    let train_cfg = cfg.train_config();
    let sde = cfg.sde.resolve()?;
    let net_cfg = cfg.net.clone();

    let raw = diffusion_buffer::synth::load_dataset(&cfg.train.dataset_dir).map_err(|e| {
        CliError::Validation(format!(
            "dataset at {} unusable: {e}",
            cfg.train.dataset_dir.display()
        ))
    })?;
    let train_pairs = raw.len().saturating_sub(cfg.train.holdout);
    if train_pairs == 0 {
        return Err(CliError::Validation("no training pairs left after holdout".into()));
    }
    let mut dataset = Vec::with_capacity(train_pairs);
    for (clean, noisy, _) in raw.iter().take(train_pairs) {
        let spec_c = spectral::stft(clean, &cfg.stft)
            .and_then(|s| spectral::compress(&s, &cfg.stft))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let spec_n = spectral::stft(noisy, &cfg.stft)
            .and_then(|s| spectral::compress(&s, &cfg.stft))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        dataset.push((spec_c.data, spec_n.data));
    }

    let mut state = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(|e| CliError::Validation(e.to_string()))?;
            validate_checkpoint(&ckpt, Some(train_cfg.buffer), Some(&sde), Some(&cfg.stft))?;
            TrainState::from_checkpoint(&ckpt, train_cfg.seed)
                .map_err(|e| CliError::Validation(e.to_string()))?
        }
        None => TrainState::new(&net_cfg, train_cfg.seed),
    };

    std::fs::create_dir_all(&cfg.train.checkpoint_dir).map_err(|e| {
        CliError::Runtime(format!("cannot create {}: {e}", cfg.train.checkpoint_dir.display()))
    })?;
    let grid = cfg.grid.resolve(&sde)?;
    let trace_path = cfg.train.checkpoint_dir.join("trace.csv");

    for epoch in 0..train_cfg.epochs {
        let rows = train_epoch(&mut state, &dataset, &net_cfg, &sde, &train_cfg, epoch)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        append_trace_csv(&trace_path, &rows).map_err(|e| CliError::Runtime(e.to_string()))?;
        let mean_loss = rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean_loss:.6e}");
        println!("epoch {epoch}: mean loss {mean_loss:.6e}");
        let ckpt = make_checkpoint(&state, &net_cfg, &sde, &cfg.stft, &grid, train_cfg.k_frames);
        ckpt.save(&cfg.train.checkpoint_dir.join(format!("epoch_{epoch:04}.dbck")))
            .and_then(|_| ckpt.save(&cfg.train.checkpoint_dir.join("latest.dbck")))
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    println!(
        "training complete: {} iterations, checkpoints in {}",
        state.iteration,
        cfg.train.checkpoint_dir.display()
    );
    Ok(())
}

fn cmd_verify(seed: u64, fault: Option<&str>) -> Result<(), CliError> {
    let outcomes = verify::run_all(seed, fault);
    let mut failed = Vec::new();
    for o in &outcomes {
        println!("check {:<32} {} ({})", o.name, if o.passed { "ok" } else { "FAIL" }, o.detail);
        if !o.passed {
            failed.push(o.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(CliError::Runtime(format!("failed checks: {}", failed.join(", "))))
    }
}
