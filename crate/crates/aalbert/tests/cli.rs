//! Process-level checks of the `aalbert` binary: run-directory artifacts,
//! exit codes, and the one-line diagnostics promised for bad inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aalbert::encoder::EncoderConfig;
use aalbert::EncoderWeights;

const EXIT_CONFIG: i32 = 1;
const EXIT_DATA: i32 = 2;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aalbert")).args(args).output().expect("spawn aalbert")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}:\n{}",
        out.status.code(),
        stderr_of(out)
    );
}

/// Small-everything run configuration pointed at `output_dir`.
fn write_config(path: &Path, output_dir: &Path) -> PathBuf {
    let text = format!(
        r#"output_dir = "{}"

[encoder]
num_layers = 2
hidden_dim = 16
num_heads = 2
ff_dim = 32
max_sequence_length = 16

[corpus.synthetic]
utterances_per_speaker = 10
min_frames = 24
max_frames = 36

[pretrain]
steps = 4
batch_size = 4
checkpoint_every = 2

[downstream]
epochs = 2
batch_size = 16
patience = 2

[probe]
epochs = 1
patience = 1
depths = ["linear"]
tasks = ["speaker"]

[attention]
sample_size = 4
"#,
        output_dir.display()
    );
    fs::write(path, text).expect("write config");
    path.to_path_buf()
}

/// The encoder the config above describes.
fn config_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        ff_dim: 32,
        max_sequence_length: 16,
        ..EncoderConfig::default()
    }
}

/// The single timestamped run directory created under `output_dir`.
fn only_run_dir(output_dir: &Path) -> PathBuf {
    let mut entries: Vec<PathBuf> = fs::read_dir(output_dir)
        .expect("output dir")
        .map(|e| e.expect("entry").path())
        .collect();
    assert_eq!(entries.len(), 1, "expected one run dir in {}", output_dir.display());
    entries.pop().unwrap()
}

#[test]
fn pretrain_writes_the_documented_run_artifacts() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out_dir = tmp.path().join("runs");
    let cfg = write_config(&tmp.path().join("run.toml"), &out_dir);

    let out = run(&["--config", cfg.to_str().unwrap(), "pretrain", "--synthetic"]);
    assert_success(&out, "pretrain");

    let run_dir = only_run_dir(&out_dir);
    assert!(stdout_of(&out).contains("run directory"), "stdout names the run directory");
    assert!(run_dir.join("config.resolved").is_file(), "config.resolved written");
    let resolved = fs::read_to_string(run_dir.join("config.resolved")).unwrap();
    assert!(resolved.contains("num_layers = 2"), "resolved config carries overrides");

    for name in
        ["final.ckpt", "step_000002.ckpt", "step_000004.ckpt", "step_000002.opt", "step_000004.opt"]
    {
        assert!(
            run_dir.join("checkpoints").join(name).is_file(),
            "checkpoints/{name} missing"
        );
    }

    let csv = fs::read_to_string(run_dir.join("metrics").join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 5, "4 steps → 4 data rows, got {csv:?}");
    for (i, line) in lines[1..].iter().enumerate() {
        let (step, loss) = line.split_once(',').expect("step,loss row");
        assert_eq!(step.parse::<usize>().unwrap(), i + 1);
        assert!(loss.parse::<f64>().unwrap().is_finite());
    }

    // The final checkpoint reloads to the config the file declared.
    let weights =
        EncoderWeights::<f32>::load(&run_dir.join("checkpoints").join("final.ckpt")).unwrap();
    assert_eq!(weights.config, config_encoder());
}

#[test]
fn zero_step_run_checkpoints_the_fresh_initialization() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out_dir = tmp.path().join("runs");
    let cfg = write_config(&tmp.path().join("run.toml"), &out_dir);

    let out = run(&["--config", cfg.to_str().unwrap(), "pretrain", "--synthetic", "--steps", "0"]);
    assert_success(&out, "0-step pretrain");

    let run_dir = only_run_dir(&out_dir);
    let saved =
        EncoderWeights::<f32>::load(&run_dir.join("checkpoints").join("final.ckpt")).unwrap();
    let fresh = EncoderWeights::<f32>::init(&config_encoder(), 0).unwrap();
    assert_eq!(saved.checksum(), fresh.checksum(), "0 steps must leave the init untouched");

    let csv = fs::read_to_string(run_dir.join("metrics").join("loss.csv")).unwrap();
    assert_eq!(csv, "step,loss\n", "no steps → header-only loss history");
}

#[test]
fn unknown_config_keys_fail_fast_naming_the_key() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let cfg_path = tmp.path().join("bad.toml");
    fs::write(&cfg_path, "[encoder]\nnum_layerz = 3\n").unwrap();

    let out = run(&["--config", cfg_path.to_str().unwrap(), "count-params"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG), "unknown file key → config exit");
    let err = stderr_of(&out);
    assert!(err.contains("num_layerz"), "diagnostic names the key: {err}");
    assert!(err.contains("category=config"), "diagnostic carries the category: {err}");

    let out = run(&["--set", "encoder.bogus=1", "count-params"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG), "unknown override key → config exit");
    let err = stderr_of(&out);
    assert!(err.contains("bogus"), "diagnostic names the override key: {err}");
}

#[test]
fn count_params_prints_the_reference_table() {
    let out = run(&["count-params", "--paper-table"]);
    assert_success(&out, "count-params --paper-table");
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "layers,sharing,total_params");

    let mut totals = std::collections::HashMap::new();
    for line in &lines[1..7] {
        let mut parts = line.split(',');
        let layers: usize = parts.next().unwrap().parse().unwrap();
        let sharing = parts.next().unwrap().to_string();
        let total: usize = parts.next().unwrap().parse().unwrap();
        totals.insert((layers, sharing), total);
    }
    for layers in [3, 6, 12] {
        assert_eq!(totals[&(layers, "shared".to_string())], 7_366_089, "shared is depth-flat");
    }
    assert_eq!(totals[&(12, "unshared".to_string())], 85_332_681);
    assert!(text.contains("0.9137"), "reduction ratio printed: {text}");
}

#[test]
fn downstream_rejects_checkpoint_corpus_width_mismatch() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out_dir = tmp.path().join("runs");
    let cfg = write_config(&tmp.path().join("run.toml"), &out_dir);

    // A checkpoint whose encoder expects 12-dim inputs; the synthetic
    // corpus pipeline produces 160-dim frames.
    let narrow = EncoderConfig { input_dim: 12, ..config_encoder() };
    let ckpt = tmp.path().join("narrow.ckpt");
    EncoderWeights::<f32>::init(&narrow, 0).unwrap().save(&ckpt).unwrap();

    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "downstream",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_DATA), "width mismatch → data exit");
    let err = stderr_of(&out);
    assert!(
        err.contains("12") && err.contains("160"),
        "diagnostic names both widths: {err}"
    );
    assert!(err.contains("category=data"), "diagnostic carries the category: {err}");
}

#[test]
fn trained_checkpoint_drives_downstream_probe_and_attention() {
    let tmp = tempfile::tempdir().expect("tempdir");

    let pre_out = tmp.path().join("runs_pretrain");
    let cfg = write_config(&tmp.path().join("pre.toml"), &pre_out);
    let out = run(&["--config", cfg.to_str().unwrap(), "pretrain", "--synthetic"]);
    assert_success(&out, "pretrain");
    let ckpt = only_run_dir(&pre_out).join("checkpoints").join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    // downstream: speaker head on frozen features, metrics CSV written
    let ds_out = tmp.path().join("runs_downstream");
    let cfg = write_config(&tmp.path().join("ds.toml"), &ds_out);
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "downstream",
        "--checkpoint",
        ckpt,
        "--task",
        "speaker",
    ]);
    assert_success(&out, "downstream");
    let csv =
        fs::read_to_string(only_run_dir(&ds_out).join("metrics").join("downstream.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "task,mode,fusion,layer_count,test_accuracy");
    assert_eq!(lines.len(), 2);
    assert!(
        lines[1].starts_with("speaker,feature_extraction,weighted_sum,2,"),
        "metrics row: {}",
        lines[1]
    );

    // probe: one depth, one task, both layers
    let pr_out = tmp.path().join("runs_probe");
    let cfg = write_config(&tmp.path().join("pr.toml"), &pr_out);
    let out = run(&["--config", cfg.to_str().unwrap(), "probe", "--checkpoint", ckpt]);
    assert_success(&out, "probe");
    let csv = fs::read_to_string(only_run_dir(&pr_out).join("metrics").join("probe_report.csv"))
        .unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layer,depth,task,accuracy,seed");
    assert_eq!(lines.len(), 3, "2 layers × linear × speaker: {csv:?}");
    assert!(lines[1].starts_with("1,linear,speaker,"));
    assert!(lines[2].starts_with("2,linear,speaker,"));

    // attention: per-head matrices + head average, zero diagonal
    let at_out = tmp.path().join("runs_attention");
    let cfg = write_config(&tmp.path().join("at.toml"), &at_out);
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "analyze-attention",
        "--checkpoint",
        ckpt,
        "--sample-size",
        "4",
    ]);
    assert_success(&out, "analyze-attention");
    assert!(stdout_of(&out).contains("max off-diagonal"));
    let analysis = only_run_dir(&at_out).join("analysis");
    for name in ["js_matrix_head0.csv", "js_matrix_head1.csv", "js_matrix_avg.csv"] {
        assert!(analysis.join(name).is_file(), "analysis/{name} missing");
    }
    let avg = fs::read_to_string(analysis.join("js_matrix_avg.csv")).unwrap();
    let rows: Vec<Vec<f64>> = avg
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2, "2-layer matrix");
    assert_eq!(rows[0][0], 0.0);
    assert_eq!(rows[1][1], 0.0);
    assert_eq!(rows[0][1], rows[1][0], "symmetric");
}
