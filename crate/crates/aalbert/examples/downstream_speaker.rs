//! Trains a speaker-classification head on frozen encoder representations
//! and compares it with the raw-frame baseline that bypasses the encoder.
//!
//! The baseline is rigged to fail by construction: per-utterance CMVN zeroes
//! every column mean, and the speaker head is a per-frame linear layer that
//! mean-pools over frames — on raw frames that pooled readout collapses to
//! the bias, i.e. chance. Any accuracy above chance therefore has to come
//! from structure the encoder put into its representations.
//!
//! Usage: pass a checkpoint from `pretrain_smoke` to skip the pre-training
//! step; with no argument the encoder is pre-trained here first (~1–2 min).

use aalbert::data::{generate_synthetic_corpus, SyntheticCorpusSpec};
use aalbert::downstream::{
    train_downstream, DownstreamConfig, FeatureSource, FusionMode, Task, TrainMode,
    METRICS_HEADER,
};
use aalbert::optim::AdamWConfig;
use aalbert::pretrain::{model_input_dim, pretrain, PretrainOptions};
use aalbert::{EncoderConfig, EncoderWeights, MaskPolicy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SyntheticCorpusSpec {
        num_phone_classes: 16,
        utterances_per_speaker: 50,
        min_frames: 72,
        max_frames: 112,
        min_segment_frames: 6,
        max_segment_frames: 12,
        speaker_phone_bias: 2.5,
        noise_level: 0.02,
        ..SyntheticCorpusSpec::default()
    };
    let corpus = generate_synthetic_corpus::<f32>(&spec)?;
    let policy = MaskPolicy {
        select_fraction: 0.25,
        zero_prob: 0.4,
        replace_prob: 0.0,
        keep_prob: 0.6,
        downsample_factor: 1,
        ..MaskPolicy::default()
    };

    let encoder = match std::env::args().nth(1) {
        Some(path) => {
            println!("loading encoder from {path}");
            EncoderWeights::<f32>::load(path.as_ref())?
        }
        None => {
            println!("no checkpoint given; pre-training the smoke encoder (500 steps)...");
            let cfg = EncoderConfig {
                num_layers: 2,
                hidden_dim: 64,
                num_heads: 4,
                ff_dim: 256,
                input_dim: model_input_dim(spec.mel_dim, &policy),
                target_dim: spec.target_dim,
                share_weights: true,
                max_sequence_length: 512,
                ..EncoderConfig::default()
            };
            let optimizer =
                AdamWConfig { learning_rate: 2e-3, beta2: 0.99, ..AdamWConfig::default() };
            let opts = PretrainOptions {
                steps: 500,
                batch_size: 8,
                warmup_steps: 100,
                ..PretrainOptions::default()
            };
            pretrain(&corpus, &cfg, &policy, &optimizer, &opts, None)?.weights
        }
    };

    // The tiny head likes a faster rate and more epochs than the full-scale
    // defaults; both runs get identical knobs so only the feature source
    // differs.
    let cfg = DownstreamConfig {
        task: Task::Speaker,
        mode: TrainMode::FeatureExtraction,
        fusion: FusionMode::WeightedSum,
        source: FeatureSource::Encoder,
        learning_rate: 3e-3,
        epochs: 60,
        batch_size: 32,
        patience: 15,
        seed: 0,
    };

    println!();
    println!("training speaker head on frozen encoder representations...");
    let enc = train_downstream(&encoder, &corpus, &policy, &cfg)?;
    println!("training the same head on raw pipeline frames...");
    let raw_cfg = DownstreamConfig { source: FeatureSource::RawFrames, ..cfg };
    let raw = train_downstream(&encoder, &corpus, &policy, &raw_cfg)?;

    println!();
    println!("{METRICS_HEADER}");
    for report in [&enc.report, &raw.report] {
        println!(
            "{},{},{},{},{:.4}",
            report.task, report.mode, report.fusion, report.layer_count, report.test_accuracy
        );
    }
    println!();
    println!(
        "frozen encoder: test accuracy {:.3} (dev {:.3}, best epoch {}/{})",
        enc.report.test_accuracy,
        enc.report.dev_accuracy,
        enc.report.best_epoch,
        enc.report.epochs_run
    );
    let weights: Vec<String> =
        enc.report.fusion_weights.iter().map(|w| format!("{w:.3}")).collect();
    println!(
        "  learned layer-fusion weights [{}] (worst |sum-1| {:.1e})",
        weights.join(", "),
        enc.report.max_fusion_weight_deviation
    );
    println!(
        "raw-frame baseline: test accuracy {:.3} — chance for {} speakers is {:.3}",
        raw.report.test_accuracy,
        spec.num_speakers,
        1.0 / spec.num_speakers as f64
    );
    Ok(())
}
