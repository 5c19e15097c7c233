//! Probes every encoder layer with small frame-level classifiers to see
//! where phone and speaker information lives, and anchors the numbers with
//! two controls: the majority-class baseline and the same probe on
//! shape-matched gaussian noise.
//!
//! Usage: pass a checkpoint from `pretrain_smoke` to skip the pre-training
//! step; with no argument the encoder is pre-trained here first (~1–2 min).

use aalbert::data::{generate_synthetic_corpus, SyntheticCorpusSpec};
use aalbert::optim::AdamWConfig;
use aalbert::pretrain::{model_input_dim, pretrain, PretrainOptions};
use aalbert::probe::{
    layer_frame_set, majority_baseline, probe_frames, probe_sweep, ProbeConfig, ProbeDepth,
    ProbeTask,
};
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

    // Linear probes per layer; deeper probes (one_hidden, two_hidden) trade
    // runtime for a looser notion of "linearly available".
    let base = ProbeConfig::default();
    let report = probe_sweep(
        &encoder,
        &corpus,
        &policy,
        &[ProbeDepth::Linear],
        &[ProbeTask::Phoneme, ProbeTask::Speaker],
        &base,
    )?;

    println!();
    println!("layer  depth   task     accuracy");
    for cell in &report.cells {
        println!(
            "{:>5}  {:<7} {:<8} {:.4}",
            cell.layer, cell.depth, cell.task, cell.accuracy
        );
    }

    // Controls, computed on the deepest layer's frame split: the majority
    // class, and the identical probe run on gaussian noise of the same
    // shape (what "the probe learned nothing" looks like).
    println!();
    for task in [ProbeTask::Phoneme, ProbeTask::Speaker] {
        let cfg =
            ProbeConfig { task, layer: encoder.config.num_layers, ..ProbeConfig::default() };
        let set = layer_frame_set(&encoder, &corpus, &policy, &cfg)?;
        let majority = majority_baseline(&set.test.y);
        let noise = probe_frames(&set.gaussian_control(0), &cfg)?;
        println!(
            "{task} controls: majority class {majority:.4}, probe on gaussian noise {noise:.4}"
        );
    }
    Ok(())
}
