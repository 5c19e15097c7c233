//! Walks one utterance through the feature pipeline: synthetic log-mel
//! frames → first-order deltas → per-utterance CMVN → downsampling → the
//! masking that pre-training applies — then round-trips the utterance
//! through the binary feature-file format.

use aalbert::data::{
    add_deltas, cmvn, generate_synthetic_corpus, pipeline_input, read_feature_file,
    write_feature_file, SyntheticCorpusSpec,
};
use aalbert::pretrain::{
    apply_mask, downsample_with_mode, model_input_dim, DownsampleMode, MaskAction,
};
use aalbert::MaskPolicy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SyntheticCorpusSpec::default();
    let corpus = generate_synthetic_corpus::<f32>(&spec)?;
    let utt = &corpus[0];
    println!(
        "synthesized {} utterances from {} speakers; inspecting {:?} (speaker {}, {} frames)",
        corpus.len(),
        spec.num_speakers,
        utt.id,
        utt.speaker,
        utt.frames()
    );

    // deltas double the width; CMVN zeroes every column mean and unit-scales
    // every column std, per utterance
    let with_deltas = add_deltas(&utt.mel);
    let normalized = cmvn(&with_deltas);
    let t = normalized.rows();
    let d = normalized.cols();
    let mut worst_mean = 0.0f64;
    let mut worst_std = 0.0f64;
    for c in 0..d {
        let mean: f64 = (0..t).map(|r| normalized.get(r, c) as f64).sum::<f64>() / t as f64;
        let var: f64 =
            (0..t).map(|r| (normalized.get(r, c) as f64 - mean).powi(2)).sum::<f64>() / t as f64;
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((var.sqrt() - 1.0).abs());
    }
    println!();
    println!("pipeline shapes and normalization:");
    println!("  log-mel             {:>3} x {}", utt.mel.rows(), utt.mel.cols());
    println!("  + deltas            {:>3} x {}", with_deltas.rows(), with_deltas.cols());
    println!(
        "  + CMVN              {:>3} x {}   (worst |column mean| {:.1e}, worst |std-1| {:.1e})",
        t, d, worst_mean, worst_std
    );

    // The model sees a downsampled view: decimation keeps every k-th frame,
    // stacking concatenates k consecutive frames into one wide frame.
    let policy = MaskPolicy::default();
    let input = pipeline_input(&utt.mel); // deltas + CMVN in one call
    for mode in [DownsampleMode::Decimate, DownsampleMode::Stack] {
        let down = downsample_with_mode(&input, policy.downsample_factor, mode);
        let mode_policy = MaskPolicy { downsample_mode: mode, ..policy.clone() };
        println!(
            "  {mode:?} x{}         {:>3} x {}   (model_input_dim {})",
            policy.downsample_factor,
            down.rows(),
            down.cols(),
            model_input_dim(spec.mel_dim, &mode_policy),
        );
    }

    // Pre-training corrupts a fixed fraction of the downsampled frames.
    let down = downsample_with_mode(&input, policy.downsample_factor, policy.downsample_mode);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, mask) = apply_mask(&down, &policy, &mut rng);
    let mut zero = 0;
    let mut replace = 0;
    let mut keep = 0;
    for (_, action) in &mask.actions {
        match action {
            MaskAction::Zero => zero += 1,
            MaskAction::Replace { .. } => replace += 1,
            MaskAction::Keep => keep += 1,
        }
    }
    println!();
    println!(
        "masking at select_fraction {}: {} of {} frames corrupted ({} zeroed, {} replaced, {} kept)",
        policy.select_fraction,
        mask.actions.len(),
        down.rows(),
        zero,
        replace,
        keep
    );

    // Feature files hold raw mel + target + labels, so every consumer runs
    // the same pipeline on identical inputs.
    let dir = std::env::temp_dir().join("aalbert_feature_pipeline");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.feat", utt.id));
    write_feature_file(&path, utt)?;
    let reread = read_feature_file::<f32>(&path)?;
    println!();
    println!(
        "feature file round-trip: wrote {} bytes to {}; reread {}",
        std::fs::metadata(&path)?.len(),
        path.display(),
        if &reread == utt { "bit-identical" } else { "MISMATCH" }
    );
    Ok(())
}
