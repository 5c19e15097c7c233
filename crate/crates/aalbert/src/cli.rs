//! The command-line surface: `pretrain`, `downstream`, `probe`,
//! `analyze-attention`, and `count-params`, all driven by one TOML config
//! plus `--set key=value` overrides, writing into a timestamped run
//! directory. Errors exit with documented codes — 1 config, 2 data,
//! 3 numeric — and one machine-parsable line on stderr.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::attention::{build_js_matrices, max_off_diagonal, write_js_analysis, AttentionError};
use crate::config::{load_run_config, write_resolved, ConfigError, RunConfig};
use crate::data::{generate_synthetic_corpus, load_feature_dir, DataError, UtteranceFeatures};
use crate::downstream::{
    append_metrics_row, export_pooled_embeddings, train_downstream, DownstreamError,
    FeatureSource, FusionMode, Task, TrainMode,
};
use crate::encoder::{count_from_config, CheckpointError, EncoderConfig, EncoderError, EncoderWeights};
use crate::pretrain::{pretrain, write_loss_csv, PretrainError};
use crate::probe::{probe_sweep, write_probe_csv, ProbeDepth, ProbeError, ProbeTask};
use crate::tensor::TensorError;

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser)]
#[command(
    name = "aalbert",
    about = "Weight-shared speech encoder: masked-reconstruction pretraining, \
             downstream adaptation, layer probing, attention analysis"
)]
pub struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set encoder.num_layers=2 (repeatable; wins over the file).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Cap worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train an encoder by masked reconstruction.
    Pretrain {
        /// Use the generated synthetic corpus even if the config names a data directory.
        #[arg(long)]
        synthetic: bool,
        /// Shorthand for --set encoder.num_layers=N.
        #[arg(long, value_name = "N")]
        layers: Option<usize>,
        /// Shorthand for --set encoder.share_weights=BOOL.
        #[arg(long, value_name = "BOOL")]
        share_weights: Option<bool>,
        /// Shorthand for --set pretrain.steps=N.
        #[arg(long, value_name = "N")]
        steps: Option<usize>,
    },
    /// Train a classification head (and optionally the encoder) on a checkpoint.
    Downstream {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// phoneme | speaker
        #[arg(long)]
        task: Option<String>,
        /// feature_extraction | fine_tune
        #[arg(long)]
        mode: Option<String>,
        /// last_layer | weighted_sum
        #[arg(long)]
        fusion: Option<String>,
        /// encoder | raw_frames
        #[arg(long)]
        source: Option<String>,
        /// Also export per-utterance mean-pooled embeddings to analysis/embeddings.csv.
        #[arg(long)]
        export_embeddings: bool,
    },
    /// Probe every encoder layer with small frame-level classifiers.
    Probe {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Comma-separated: linear,one_hidden,two_hidden
        #[arg(long, value_delimiter = ',')]
        depths: Vec<String>,
        /// Comma-separated: phoneme,speaker
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
    },
    /// Compute pairwise attention JS-divergence matrices.
    AnalyzeAttention {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Utterances in the fixed-seed evaluation sample.
        #[arg(long, value_name = "N")]
        sample_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print parameter counts for a config or checkpoint.
    CountParams {
        /// Count the weights stored in this checkpoint instead of the config.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Print the six reference configurations (3/6/12 layers, shared and
        /// unshared, 768-wide) and the sharing reduction ratio.
        #[arg(long)]
        paper_table: bool,
    },
}

// ───────────────────────── error mapping ─────────────────────────

/// A classified failure: exit code + single-line reason.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    fn new(code: i32, category: &'static str, message: impl ToString) -> Self {
        let message = message.to_string().replace('\n', "; ");
        CliError { code, category, message }
    }

    pub fn config(message: impl ToString) -> Self {
        CliError::new(EXIT_CONFIG, "config", message)
    }

    pub fn data(message: impl ToString) -> Self {
        CliError::new(EXIT_DATA, "data", message)
    }

    pub fn numeric(message: impl ToString) -> Self {
        CliError::new(EXIT_NUMERIC, "numeric", message)
    }

    /// The one-line diagnostic: `aalbert: error category=... code=... msg="..."`.
    pub fn diagnostic(&self) -> String {
        format!(
            "aalbert: error category={} code={} msg={:?}",
            self.category, self.code, self.message
        )
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config(e)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) => CliError::config(e),
            _ => CliError::data(e),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::data(e)
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::numeric(e)
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::InvalidConfig(_) => CliError::config(e),
            EncoderError::Tensor(t) => t.into(),
            EncoderError::DropoutWithoutRng => CliError::numeric(e),
            _ => CliError::data(e),
        }
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        match e {
            PretrainError::InvalidPolicy(_) => CliError::config(e),
            PretrainError::NonFiniteLoss { .. } => CliError::numeric(e),
            PretrainError::Tensor(t) => t.into(),
            PretrainError::Encoder(inner) => inner.into(),
            PretrainError::Checkpoint(inner) => inner.into(),
            _ => CliError::data(e),
        }
    }
}

impl From<DownstreamError> for CliError {
    fn from(e: DownstreamError) -> Self {
        match e {
            DownstreamError::FineTuneWithoutEncoder => CliError::config(e),
            DownstreamError::Tensor(t) => t.into(),
            DownstreamError::Encoder(inner) => inner.into(),
            _ => CliError::data(e),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::InvalidLayer { .. } | ProbeError::EmptyGrid => CliError::config(e),
            ProbeError::Tensor(t) => t.into(),
            ProbeError::Encoder(inner) => inner.into(),
            ProbeError::Cell { .. } => CliError::numeric(e),
            _ => CliError::data(e),
        }
    }
}

impl From<AttentionError> for CliError {
    fn from(e: AttentionError) -> Self {
        match e {
            AttentionError::Encoder(inner) => inner.into(),
            AttentionError::Io(io) => CliError::data(io),
            _ => CliError::data(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e)
    }
}

// ───────────────────────── flag parsing ─────────────────────────

fn parse_task(s: &str) -> Result<Task, CliError> {
    match s {
        "phoneme" => Ok(Task::Phoneme),
        "speaker" => Ok(Task::Speaker),
        _ => Err(CliError::config(format!("unknown task {s:?} (phoneme|speaker)"))),
    }
}

fn parse_mode(s: &str) -> Result<TrainMode, CliError> {
    match s {
        "feature_extraction" => Ok(TrainMode::FeatureExtraction),
        "fine_tune" => Ok(TrainMode::FineTune),
        _ => Err(CliError::config(format!(
            "unknown mode {s:?} (feature_extraction|fine_tune)"
        ))),
    }
}

fn parse_fusion(s: &str) -> Result<FusionMode, CliError> {
    match s {
        "last_layer" => Ok(FusionMode::LastLayer),
        "weighted_sum" => Ok(FusionMode::WeightedSum),
        _ => Err(CliError::config(format!("unknown fusion {s:?} (last_layer|weighted_sum)"))),
    }
}

fn parse_source(s: &str) -> Result<FeatureSource, CliError> {
    match s {
        "encoder" => Ok(FeatureSource::Encoder),
        "raw_frames" => Ok(FeatureSource::RawFrames),
        _ => Err(CliError::config(format!("unknown source {s:?} (encoder|raw_frames)"))),
    }
}

fn parse_depth(s: &str) -> Result<ProbeDepth, CliError> {
    match s {
        "linear" => Ok(ProbeDepth::Linear),
        "one_hidden" => Ok(ProbeDepth::OneHidden),
        "two_hidden" => Ok(ProbeDepth::TwoHidden),
        _ => Err(CliError::config(format!(
            "unknown probe depth {s:?} (linear|one_hidden|two_hidden)"
        ))),
    }
}

fn parse_probe_task(s: &str) -> Result<ProbeTask, CliError> {
    match s {
        "phoneme" => Ok(ProbeTask::Phoneme),
        "speaker" => Ok(ProbeTask::Speaker),
        _ => Err(CliError::config(format!("unknown probe task {s:?} (phoneme|speaker)"))),
    }
}

// ───────────────────────── run directories ─────────────────────────

/// `<output_dir>/<timestamp>/{config.resolved, checkpoints/, metrics/, analysis/}`
pub struct RunPaths {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub metrics: PathBuf,
    pub analysis: PathBuf,
}

fn create_run_dir(output_dir: &Path) -> Result<RunPaths, CliError> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
    let mut root = output_dir.join(&stamp);
    let mut n = 1;
    while root.exists() {
        n += 1;
        root = output_dir.join(format!("{stamp}-{n}"));
    }
    let paths = RunPaths {
        checkpoints: root.join("checkpoints"),
        metrics: root.join("metrics"),
        analysis: root.join("analysis"),
        root,
    };
    std::fs::create_dir_all(&paths.checkpoints)?;
    std::fs::create_dir_all(&paths.metrics)?;
    std::fs::create_dir_all(&paths.analysis)?;
    Ok(paths)
}

fn prepare_run(config: &RunConfig) -> Result<RunPaths, CliError> {
    config.validate()?;
    let paths = create_run_dir(&config.output_dir)?;
    write_resolved(config, &paths.root.join("config.resolved"))?;
    Ok(paths)
}

fn load_corpus(config: &RunConfig) -> Result<Vec<UtteranceFeatures<f32>>, CliError> {
    match &config.corpus.data_dir {
        Some(dir) => {
            let (corpus, skipped) = load_feature_dir(dir)?;
            if skipped > 0 {
                eprintln!("warning: skipped {skipped} unreadable feature file(s) in {}", dir.display());
            }
            Ok(corpus)
        }
        None => Ok(generate_synthetic_corpus(&config.corpus.synthetic)?),
    }
}

// ───────────────────────── subcommands ─────────────────────────

fn cmd_pretrain(config: &RunConfig) -> Result<(), CliError> {
    let paths = prepare_run(config)?;
    let corpus = load_corpus(config)?;
    println!("run directory: {}", paths.root.display());
    println!(
        "pretraining: {} layers ({}), {} steps, {} utterances",
        config.encoder.num_layers,
        if config.encoder.share_weights { "shared" } else { "unshared" },
        config.pretrain.steps,
        corpus.len()
    );
    let outcome = pretrain(
        &corpus,
        &config.encoder,
        &config.mask,
        &config.optimizer,
        &config.pretrain,
        Some(&paths.checkpoints),
    )?;
    let final_path = paths.checkpoints.join("final.ckpt");
    outcome.weights.save(&final_path)?;
    write_loss_csv(&paths.metrics.join("loss.csv"), &outcome.history)?;
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!("loss: {:.6} (step {}) -> {:.6} (step {})", first.1, first.0, last.1, last.0);
    }
    println!("checkpoint: {}", final_path.display());
    println!("loss csv: {}", paths.metrics.join("loss.csv").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_downstream(
    config: &RunConfig,
    checkpoint: &Path,
    task: Option<&str>,
    mode: Option<&str>,
    fusion: Option<&str>,
    source: Option<&str>,
    export_embeddings: bool,
) -> Result<(), CliError> {
    let mut settings = config.downstream.clone();
    if let Some(s) = task {
        settings.task = parse_task(s)?;
    }
    if let Some(s) = mode {
        settings.mode = parse_mode(s)?;
    }
    if let Some(s) = fusion {
        settings.fusion = parse_fusion(s)?;
    }
    if let Some(s) = source {
        settings.source = parse_source(s)?;
    }
    let paths = prepare_run(config)?;
    let encoder = EncoderWeights::<f32>::load(checkpoint)?;
    let corpus = load_corpus(config)?;
    println!("run directory: {}", paths.root.display());
    println!(
        "downstream: task={} mode={} fusion={} source={:?}",
        settings.task, settings.mode, settings.fusion, settings.source
    );
    let outcome = train_downstream(&encoder, &corpus, &config.mask, &settings.to_config())?;
    let metrics_path = paths.metrics.join("downstream.csv");
    append_metrics_row(&metrics_path, &outcome.report)?;
    println!(
        "test accuracy: {:.4} (dev {:.4} at epoch {}/{})",
        outcome.report.test_accuracy,
        outcome.report.dev_accuracy,
        outcome.report.best_epoch,
        outcome.report.epochs_run
    );
    println!("metrics: {}", metrics_path.display());
    if let Some(tuned) = &outcome.tuned_encoder {
        let tuned_path = paths.checkpoints.join("fine_tuned.ckpt");
        tuned.save(&tuned_path)?;
        println!("fine-tuned checkpoint: {}", tuned_path.display());
    }
    if export_embeddings {
        let emb_path = paths.analysis.join("embeddings.csv");
        export_pooled_embeddings(&encoder, &outcome.fusion, &corpus, &config.mask, &emb_path)?;
        println!("embeddings: {}", emb_path.display());
    }
    Ok(())
}

fn cmd_probe(
    config: &RunConfig,
    checkpoint: &Path,
    depths: &[String],
    tasks: &[String],
) -> Result<(), CliError> {
    let depths: Vec<ProbeDepth> = if depths.is_empty() {
        config.probe.depths.clone()
    } else {
        depths.iter().map(|s| parse_depth(s)).collect::<Result<_, _>>()?
    };
    let tasks: Vec<ProbeTask> = if tasks.is_empty() {
        config.probe.tasks.clone()
    } else {
        tasks.iter().map(|s| parse_probe_task(s)).collect::<Result<_, _>>()?
    };
    let paths = prepare_run(config)?;
    let encoder = EncoderWeights::<f32>::load(checkpoint)?;
    let corpus = load_corpus(config)?;
    println!("run directory: {}", paths.root.display());
    println!(
        "probing {} layers x {} depths x {} tasks",
        encoder.config.num_layers,
        depths.len(),
        tasks.len()
    );
    let report =
        probe_sweep(&encoder, &corpus, &config.mask, &depths, &tasks, &config.probe.to_base_config())?;
    let csv_path = paths.metrics.join("probe_report.csv");
    write_probe_csv(&report, &csv_path)?;
    for cell in &report.cells {
        println!(
            "layer {} {} {}: accuracy {:.4}",
            cell.layer, cell.depth, cell.task, cell.accuracy
        );
    }
    println!("report: {}", csv_path.display());
    Ok(())
}

fn cmd_analyze_attention(
    config: &RunConfig,
    checkpoint: &Path,
    sample_size: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let paths = prepare_run(config)?;
    let encoder = EncoderWeights::<f32>::load(checkpoint)?;
    let corpus = load_corpus(config)?;
    let sample_size = sample_size.unwrap_or(config.attention.sample_size);
    let seed = seed.unwrap_or(config.attention.seed);
    println!("run directory: {}", paths.root.display());
    let analysis = build_js_matrices(&encoder, &corpus, &config.mask, sample_size, seed)?;
    let files = write_js_analysis(&analysis, &paths.analysis)?;
    println!(
        "attention divergence over {} utterances ({} frames), {} heads",
        analysis.sample_ids.len(),
        analysis.total_frames,
        analysis.per_head.len()
    );
    println!("max off-diagonal (head-averaged): {:.6}", max_off_diagonal(&analysis.averaged));
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

/// The six reference configurations: 3/6/12 layers, shared and unshared,
/// at the 768-wide geometry.
pub fn paper_table_configs() -> Vec<(usize, bool)> {
    vec![(3, true), (6, true), (12, true), (3, false), (6, false), (12, false)]
}

// the default config IS the reference geometry (768-wide, 160-dim input,
// 201-dim reconstruction); only depth and sharing vary across the table
fn reference_config(layers: usize, shared: bool) -> EncoderConfig {
    EncoderConfig { num_layers: layers, share_weights: shared, ..EncoderConfig::default() }
}

fn cmd_count_params(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    paper_table: bool,
) -> Result<(), CliError> {
    if paper_table {
        println!("layers,sharing,total_params");
        let mut by_key = std::collections::HashMap::new();
        for (layers, shared) in paper_table_configs() {
            let count = count_from_config(&reference_config(layers, shared));
            by_key.insert((layers, shared), count.total);
            println!(
                "{layers},{},{}",
                if shared { "shared" } else { "unshared" },
                count.total
            );
        }
        let ratio = 1.0 - by_key[&(12, true)] as f64 / by_key[&(12, false)] as f64;
        println!();
        println!("parameter reduction from sharing at 12 layers: {ratio:.4}");
        return Ok(());
    }
    let count = match checkpoint {
        Some(path) => {
            let encoder = EncoderWeights::<f32>::load(path)?;
            // counted from the loaded weights themselves, not the embedded config
            encoder.count_parameters()
        }
        None => count_from_config(&config.encoder),
    };
    println!("component,value");
    println!("total,{}", count.total);
    println!("input_projection,{}", count.input_projection);
    println!("layer_block,{}", count.layer_block);
    println!("distinct_blocks,{}", count.distinct_blocks);
    println!("blocks_total,{}", count.blocks_total());
    println!("reconstruction_head,{}", count.reconstruction_head);
    println!("num_layers,{}", count.num_layers);
    println!("shared,{}", count.shared);
    Ok(())
}

// ───────────────────────── entry point ─────────────────────────

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if cli.common.threads > 0 {
        // build_global fails if a pool already exists (e.g. in tests) —
        // that's fine, the cap is best-effort there
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.common.threads).build_global();
    }
    let mut overrides = cli.common.set.clone();
    if let Command::Pretrain { layers, share_weights, steps, .. } = &cli.command {
        if let Some(n) = layers {
            overrides.push(format!("encoder.num_layers={n}"));
        }
        if let Some(b) = share_weights {
            overrides.push(format!("encoder.share_weights={b}"));
        }
        if let Some(n) = steps {
            overrides.push(format!("pretrain.steps={n}"));
        }
    }
    let mut config = load_run_config(cli.common.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::Pretrain { synthetic, .. } => {
            if *synthetic {
                config.corpus.data_dir = None;
            }
            cmd_pretrain(&config)
        }
        Command::Downstream { checkpoint, task, mode, fusion, source, export_embeddings } => {
            cmd_downstream(
                &config,
                checkpoint,
                task.as_deref(),
                mode.as_deref(),
                fusion.as_deref(),
                source.as_deref(),
                *export_embeddings,
            )
        }
        Command::Probe { checkpoint, depths, tasks } => {
            cmd_probe(&config, checkpoint, depths, tasks)
        }
        Command::AnalyzeAttention { checkpoint, sample_size, seed } => {
            cmd_analyze_attention(&config, checkpoint, *sample_size, *seed)
        }
        Command::CountParams { checkpoint, paper_table } => {
            cmd_count_params(&config, checkpoint.as_deref(), *paper_table)
        }
    }
}

/// Parses the process arguments, runs the requested subcommand, and
/// returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            e.code
        }
    }
}
