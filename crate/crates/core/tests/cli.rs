//! End-to-end checks of the command-line surface: exit codes, file outputs,
//! determinism, and the enhancement pipeline against the analytic oracle.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_diffusion-buffer")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn usage_error_is_exit_1() {
    let out = run(&["enhance", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_is_exit_0() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("enhance"));
}

#[test]
fn make_synth_data_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("data");
    let out = run(&[
        "make-synth-data",
        "--out",
        out_dir.to_str().unwrap(),
        "--pairs",
        "3",
        "--duration-s",
        "0.3",
        "--seed",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(out_dir.join("manifest.json").exists());
    let wavs = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().map(|x| x == "wav").unwrap_or(false))
        .count();
    assert_eq!(wavs, 6);

    // Determinism under the same seed: manifests agree byte for byte.
    let out_dir2 = dir.path().join("data2");
    let out = run(&[
        "make-synth-data",
        "--out",
        out_dir2.to_str().unwrap(),
        "--pairs",
        "3",
        "--duration-s",
        "0.3",
        "--seed",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let a = std::fs::read(out_dir.join("clean_0000.wav")).unwrap();
    let b = std::fs::read(out_dir2.join("clean_0000.wav")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn verify_passes_and_fault_injection_fails() {
    let out = run(&["verify", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("all 15 checks passed"), "{text}");

    // Deterministic across runs with the same seed.
    let again = run(&["verify", "--seed", "3"]);
    assert_eq!(stdout(&again), text);

    let faulty = run(&["verify", "--seed", "3", "--inject-fault", "sde.sigma"]);
    assert_eq!(faulty.status.code(), Some(3));
    let text = stdout(&faulty);
    assert!(text.contains("sde.sigma") && text.contains("FAIL"), "{text}");
    assert!(stderr(&faulty).contains("sde.sigma"));
}

#[test]
fn enhance_oracle_near_passthrough_on_clean_input() {
    // Clean input == noisy input with the analytic oracle tied to the noisy
    // bin: the enhanced output must sit within a few LSBs of the input.
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let gen = run(&[
        "make-synth-data",
        "--out",
        data_dir.to_str().unwrap(),
        "--pairs",
        "1",
        "--duration-s",
        "1.5",
        "--snr-min",
        "15",
        "--snr-max",
        "15",
        "--seed",
        "9",
    ]);
    assert_eq!(gen.status.code(), Some(0));
    let clean = data_dir.join("clean_0000.wav");
    let out_wav = dir.path().join("enhanced.wav");
    let report = dir.path().join("report.txt");
    let timings = dir.path().join("timings.csv");

    let out = run(&[
        "enhance",
        "--input",
        clean.to_str().unwrap(),
        "--oracle",
        "--oracle-var",
        "1e-6",
        "--mode",
        "db",
        "--buffer",
        "8",
        "--context",
        "24",
        "--sde",
        "ouve",
        "--output",
        out_wav.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
        "--timings-csv",
        timings.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("mode: db"), "{text}");
    assert!(report.exists() && timings.exists() && out_wav.exists());

    let si: f64 = text
        .lines()
        .find(|l| l.starts_with("si_sdr_vs_input_db:"))
        .and_then(|l| l.split(':').nth(1))
        .and_then(|v| v.trim().parse().ok())
        .expect("report carries si_sdr_vs_input_db");
    assert!(si >= 30.0, "near-passthrough SI-SDR >= 30 dB, got {si}");

    // One score call per frame shows up in the report counters.
    let frames: u64 = text
        .lines()
        .find(|l| l.starts_with("input_frames:"))
        .and_then(|l| l.split(':').nth(1))
        .and_then(|v| v.trim().parse().ok())
        .unwrap();
    let calls: u64 = text
        .lines()
        .find(|l| l.starts_with("score_calls:"))
        .and_then(|l| l.split(':').nth(1))
        .and_then(|v| v.trim().parse().ok())
        .unwrap();
    assert_eq!(frames, calls, "db mode: exactly one score call per frame");

    // Latency bookkeeping: B = 8 at 16 ms hops.
    assert!(text.contains("algorithmic_latency_ms: 128.000"), "{text}");
}

#[test]
fn enhance_vanilla_reports_n_calls() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    run(&[
        "make-synth-data",
        "--out",
        data_dir.to_str().unwrap(),
        "--pairs",
        "1",
        "--duration-s",
        "0.5",
        "--seed",
        "2",
    ]);
    let noisy = data_dir.join("noisy_0000.wav");
    let out = run(&[
        "enhance",
        "--input",
        noisy.to_str().unwrap(),
        "--oracle",
        "--mode",
        "vanilla",
        "--steps",
        "12",
        "--sde",
        "bbed",
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("score_calls: 12"), "{text}");
}

#[test]
fn enhance_rejects_missing_score_source() {
    let out = run(&["enhance", "--input", "nope.wav"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--checkpoint or --oracle"));
}

#[test]
fn enhance_rejects_truncated_wav_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    run(&[
        "make-synth-data",
        "--out",
        data_dir.to_str().unwrap(),
        "--pairs",
        "1",
        "--duration-s",
        "0.3",
        "--seed",
        "4",
    ]);
    let wav = data_dir.join("noisy_0000.wav");
    let bytes = std::fs::read(&wav).unwrap();
    let cut = dir.path().join("cut.wav");
    std::fs::write(&cut, &bytes[..bytes.len() - 101]).unwrap();
    let out = run(&["enhance", "--input", cut.to_str().unwrap(), "--oracle", "--buffer", "4"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let msg = stderr(&out);
    assert!(msg.contains("byte offset"), "names the offset: {msg}");
}

#[test]
fn train_and_enhance_roundtrip_with_checkpoint() {
    // A micro training run on a micro dataset, then enhancement from the
    // written checkpoint, plus the buffer-mismatch refusal.
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let gen = run(&[
        "make-synth-data",
        "--out",
        data_dir.to_str().unwrap(),
        "--pairs",
        "3",
        "--duration-s",
        "0.6",
        "--seed",
        "21",
    ]);
    assert_eq!(gen.status.code(), Some(0));

    let ckpt_dir = dir.path().join("run");
    let config = format!(
        r#"
[sde]
preset = "bbed-paper"

[grid]
buffer = 4

[net]
channels = 4
depth = 1
kernel = 3
time_embed_dim = 8

[train]
lr = 0.001
batch_size = 2
ema_decay = 0.5
epochs = 2
seed = 7
k_frames = 16
dataset_dir = "{}"
checkpoint_dir = "{}"
holdout = 1
"#,
        data_dir.display(),
        ckpt_dir.display()
    );
    let cfg_path = dir.path().join("train.toml");
    std::fs::write(&cfg_path, config).unwrap();

    let out = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let ckpt = ckpt_dir.join("latest.dbck");
    assert!(ckpt.exists());
    assert!(ckpt_dir.join("trace.csv").exists());
    let trace = std::fs::read_to_string(ckpt_dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,epoch,loss,grad_norm,wall_ms"));
    assert!(trace.lines().count() >= 3, "two epochs of trace rows:\n{trace}");

    // Enhance with the trained checkpoint.
    let noisy = data_dir.join("noisy_0002.wav");
    let out = run(&[
        "enhance",
        "--input",
        noisy.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--mode",
        "db",
        "--seed",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("buffer_frames: 4"));

    // Requesting a different buffer length is refused with the field named.
    let out = run(&[
        "enhance",
        "--input",
        noisy.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--buffer",
        "9",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("grid length"), "{}", stderr(&out));

    // Resume training from the checkpoint.
    let out = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn train_rejects_bad_config_key_and_missing_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = dir.path().join("bad.toml");
    std::fs::write(&bad_key, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = run(&["train", "--config", bad_key.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let bad_ema = dir.path().join("ema.toml");
    std::fs::write(&bad_ema, "[train]\nema_decay = 1.5\n").unwrap();
    let out = run(&["train", "--config", bad_ema.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("[0, 1)"), "{}", stderr(&out));

    let missing_data = dir.path().join("missing.toml");
    std::fs::write(
        &missing_data,
        "[train]\ndataset_dir = \"/no/such/dir\"\nepochs = 1\nk_frames = 8\n[grid]\nbuffer = 2\n",
    )
    .unwrap();
    let out = run(&["train", "--config", missing_data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dataset"), "{}", stderr(&out));
}
