//! Masked-reconstruction pre-training: frame downsampling, the corruption
//! policy, the masked L1 loss, and the training loop.
//!
//! Corruption follows the 15% / 80-10-10 recipe: select 15% of the
//! (downsampled) frames per utterance, then zero 80% of the selected
//! frames, replace 10% with a random frame of the same utterance, and keep
//! 10% unchanged — all selected frames, "keep" included, enter the loss.
//! Loss is L1 on the selected rows only.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{derive_seed, pipeline_input, UtteranceFeatures};
use crate::encoder::{CheckpointError, EncoderConfig, EncoderError, EncoderWeights, ForwardOptions};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{Matrix, NodeId, Scalar, Tape, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    /// Keep frames 0, factor, 2·factor, …; T′ = ⌈T/factor⌉.
    Decimate,
    /// Concatenate `factor` consecutive frames into one (d·factor wide);
    /// the trailing partial group is completed by replicating the last
    /// frame, so T′ = ⌈T/factor⌉ in this mode too.
    Stack,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicy {
    pub select_fraction: f64,
    pub zero_prob: f64,
    pub replace_prob: f64,
    pub keep_prob: f64,
    pub downsample_factor: usize,
    pub downsample_mode: DownsampleMode,
    pub seed: u64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            select_fraction: 0.15,
            zero_prob: 0.8,
            replace_prob: 0.1,
            keep_prob: 0.1,
            downsample_factor: 3,
            downsample_mode: DownsampleMode::Decimate,
            seed: 0,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if !(self.select_fraction > 0.0 && self.select_fraction < 1.0) {
            return Err(PretrainError::InvalidPolicy(format!(
                "select_fraction {} must lie in (0, 1)",
                self.select_fraction
            )));
        }
        let probs = [self.zero_prob, self.replace_prob, self.keep_prob];
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(PretrainError::InvalidPolicy(
                "corruption probabilities must lie in [0, 1]".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PretrainError::InvalidPolicy(format!(
                "zero_prob + replace_prob + keep_prob = {sum}, expected 1"
            )));
        }
        if self.downsample_factor == 0 {
            return Err(PretrainError::InvalidPolicy("downsample_factor must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAction {
    Zero,
    /// Overwrite with a copy of this frame (same utterance).
    Replace { source: usize },
    Keep,
}

/// Which frames of one utterance were selected for corruption and what was
/// done to each; `selected` spans all T′ frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub actions: Vec<(usize, MaskAction)>,
    pub selected: Vec<bool>,
}

impl MaskSpec {
    pub fn selected_rows(&self) -> Vec<usize> {
        self.actions.iter().map(|&(r, _)| r).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("invalid mask policy: {0}")]
    InvalidPolicy(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("step {step}: no utterance in the batch has any masked frame")]
    NoMaskedFrames { step: usize },
    #[error("non-finite loss at step {step}{}", last_checkpoint.as_ref().map(|p| format!("; last good checkpoint: {}", p.display())).unwrap_or_default())]
    NonFiniteLoss { step: usize, last_checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ───────────────────────── downsampling ─────────────────────────

/// Keeps rows 0, factor, 2·factor, …. Empty input stays empty.
pub fn downsample<F: Scalar>(features: &Matrix<F>, factor: usize) -> Matrix<F> {
    assert!(factor >= 1, "downsample factor must be ≥ 1");
    let t = features.rows();
    let d = features.cols();
    let kept: Vec<usize> = (0..t).step_by(factor).collect();
    let mut out = Matrix::zeros(kept.len(), d);
    for (r, &src) in kept.iter().enumerate() {
        out.row_mut(r).copy_from_slice(features.row(src));
    }
    out
}

/// Stacks `factor` consecutive rows into one d·factor row; a trailing
/// partial group is completed by replicating the final frame.
pub fn downsample_stack<F: Scalar>(features: &Matrix<F>, factor: usize) -> Matrix<F> {
    assert!(factor >= 1, "downsample factor must be ≥ 1");
    let t = features.rows();
    let d = features.cols();
    let groups = t.div_ceil(factor);
    let mut out = Matrix::zeros(groups, d * factor);
    for g in 0..groups {
        for k in 0..factor {
            let src = (g * factor + k).min(t.saturating_sub(1));
            out.row_mut(g)[k * d..(k + 1) * d].copy_from_slice(features.row(src));
        }
    }
    out
}

pub fn downsample_with_mode<F: Scalar>(
    features: &Matrix<F>,
    factor: usize,
    mode: DownsampleMode,
) -> Matrix<F> {
    match mode {
        DownsampleMode::Decimate => downsample(features, factor),
        DownsampleMode::Stack => downsample_stack(features, factor),
    }
}

/// Downsamples a per-frame label sequence with the decimation rule, so
/// labels stay aligned with encoder frames (group labels in stack mode come
/// from the group's first frame, which is the same rule).
pub fn downsample_labels(labels: &[u16], factor: usize) -> Vec<u16> {
    assert!(factor >= 1);
    labels.iter().copied().step_by(factor).collect()
}

/// The encoder input width after the pipeline and downsampling.
pub fn model_input_dim(mel_dim: usize, policy: &MaskPolicy) -> usize {
    match policy.downsample_mode {
        DownsampleMode::Decimate => 2 * mel_dim,
        DownsampleMode::Stack => 2 * mel_dim * policy.downsample_factor,
    }
}

// ───────────────────────── masking ─────────────────────────

/// Corrupts `round(select_fraction · T′)` frames chosen without
/// replacement; each selected frame is zeroed / replaced by a random frame
/// of the same utterance / kept, with the policy's probabilities.
/// Unselected frames are returned bitwise unchanged.
pub fn apply_mask<F: Scalar>(
    features: &Matrix<F>,
    policy: &MaskPolicy,
    rng: &mut ChaCha8Rng,
) -> (Matrix<F>, MaskSpec) {
    let t = features.rows();
    let n_sel = ((policy.select_fraction * t as f64).round() as usize).min(t);
    let mut picked = rand::seq::index::sample(rng, t, n_sel).into_vec();
    picked.sort_unstable();

    let mut corrupted = features.clone();
    let mut selected = vec![false; t];
    let mut actions = Vec::with_capacity(n_sel);
    for &row in &picked {
        selected[row] = true;
        let u: f64 = rng.gen();
        let action = if u < policy.zero_prob {
            for v in corrupted.row_mut(row) {
                *v = F::zero();
            }
            MaskAction::Zero
        } else if u < policy.zero_prob + policy.replace_prob {
            let source = rng.gen_range(0..t);
            let src_row = features.row(source).to_vec();
            corrupted.row_mut(row).copy_from_slice(&src_row);
            MaskAction::Replace { source }
        } else {
            MaskAction::Keep
        };
        actions.push((row, action));
    }
    (corrupted, MaskSpec { actions, selected })
}

/// Masked L1: mean absolute error over the selected rows only. Returns
/// `None` (after a warning upstream) when the mask is empty.
pub fn reconstruction_loss<F: Scalar>(
    tape: &mut Tape<F>,
    predicted: NodeId,
    target: &Matrix<F>,
    mask: &MaskSpec,
) -> Result<Option<NodeId>, TensorError> {
    if mask.is_empty() {
        return Ok(None);
    }
    Ok(Some(tape.masked_l1(predicted, target, &mask.selected_rows())?))
}

// ───────────────────────── training loop ─────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    /// 0 disables warmup (flat learning rate, the default).
    pub warmup_steps: usize,
    /// 0 saves only on request of the caller; N > 0 checkpoints every N
    /// steps when a checkpoint directory is supplied.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 500,
            batch_size: 50,
            warmup_steps: 0,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

pub struct PretrainOutcome<F: Scalar> {
    pub weights: EncoderWeights<F>,
    /// (step, batch loss); step is 1-based.
    pub history: Vec<(usize, f64)>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Precomputed per-utterance tensors: pipeline input and target, both
/// downsampled. Field of the training loop, public for reuse by downstream
/// and probing code, which need exactly the same alignment.
pub struct PreparedUtterance<F: Scalar> {
    pub id: String,
    pub speaker: u32,
    pub input: Matrix<F>,
    pub target: Matrix<F>,
    pub labels: Option<Vec<u16>>,
}

/// Runs deltas → CMVN → downsample for every utterance (in parallel, order
/// preserved), pairing each input with its equally-downsampled target and
/// labels.
pub fn prepare_utterances<F: Scalar>(
    corpus: &[UtteranceFeatures<F>],
    policy: &MaskPolicy,
) -> Vec<PreparedUtterance<F>> {
    corpus
        .par_iter()
        .map(|utt| {
            let input = downsample_with_mode(
                &pipeline_input(&utt.mel),
                policy.downsample_factor,
                policy.downsample_mode,
            );
            // the target keeps one frame per kept input frame in both modes
            let target = downsample(&utt.target, policy.downsample_factor);
            PreparedUtterance {
                id: utt.id.clone(),
                speaker: utt.speaker,
                input,
                target,
                labels: utt
                    .labels
                    .as_ref()
                    .map(|l| downsample_labels(l, policy.downsample_factor)),
            }
        })
        .collect()
}

/// Pre-trains fresh weights on the corpus by masked reconstruction.
///
/// Each step: draw the next shuffled mini-batch, corrupt every utterance
/// with its own derived RNG stream, run all forwards on one tape (so
/// parameters are staged once and gradients accumulate across both layers
/// and utterances), average the per-utterance masked losses, and take an
/// AdamW step. Returns the weights and the loss history; with a checkpoint
/// directory, also writes atomic periodic checkpoints plus an optimizer
/// sidecar. A non-finite loss aborts, naming the last good checkpoint.
pub fn pretrain<F: Scalar>(
    corpus: &[UtteranceFeatures<F>],
    encoder_cfg: &EncoderConfig,
    policy: &MaskPolicy,
    optimizer: &AdamWConfig,
    opts: &PretrainOptions,
    checkpoint_dir: Option<&Path>,
) -> Result<PretrainOutcome<F>, PretrainError> {
    if corpus.is_empty() {
        return Err(PretrainError::EmptyCorpus);
    }
    policy.validate()?;
    encoder_cfg.validate()?;

    let prepared = prepare_utterances(corpus, policy);
    let mut weights = EncoderWeights::<F>::init(encoder_cfg, opts.seed)?;
    let mut opt = AdamW::<F>::new(optimizer.clone());
    let mut history = Vec::with_capacity(opts.steps);
    let mut last_checkpoint = None;

    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[3]));

    for step in 1..=opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size.min(prepared.len()) {
            if cursor == order.len() {
                use rand::seq::SliceRandom;
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let mut tape = Tape::new();
        let staged = weights.stage(&mut tape, true);
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[5, step as u64]));
        let mut losses = Vec::with_capacity(batch.len());
        for (slot, &idx) in batch.iter().enumerate() {
            let utt = &prepared[idx];
            let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                policy.seed,
                &[4, step as u64, slot as u64],
            ));
            let (corrupted, mask) = apply_mask(&utt.input, policy, &mut mask_rng);
            if mask.is_empty() {
                log::warn!(
                    "step {step}: utterance {} too short to mask ({} frames); skipped from loss",
                    utt.id,
                    utt.input.rows()
                );
                continue;
            }
            let mut fwd_opts = ForwardOptions {
                capture_attention: false,
                dropout_rate: encoder_cfg.dropout_rate,
                dropout_rng: Some(&mut dropout_rng),
            };
            let out = weights.forward_on(&mut tape, &staged, &corrupted, &mut fwd_opts)?;
            if let Some(loss) = reconstruction_loss(&mut tape, out.reconstruction, &utt.target, &mask)? {
                losses.push(loss);
            }
        }
        if losses.is_empty() {
            return Err(PretrainError::NoMaskedFrames { step });
        }

        let coeffs_m = Matrix::filled(1, losses.len(), F::of(1.0 / losses.len() as f64));
        let coeffs = tape.leaf(&coeffs_m, false);
        let batch_loss = tape.linear_combine(&losses, coeffs)?;
        let loss_value = tape.scalar(batch_loss).as_f64();
        if !loss_value.is_finite() {
            if let Some(dir) = checkpoint_dir {
                write_loss_csv(&dir.join("loss.csv"), &history)?;
            }
            return Err(PretrainError::NonFiniteLoss { step, last_checkpoint });
        }
        tape.backward(batch_loss)?;

        let nodes = staged.param_nodes();
        let grads: Vec<Vec<F>> = nodes
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![F::zero(); tape.data(id).len()])
            })
            .collect();
        let mut entries = weights.param_entries_mut();
        let mut groups: Vec<(&mut [F], &[F])> = entries
            .iter_mut()
            .zip(&grads)
            .map(|((_, m), g)| (m.data_mut(), g.as_slice()))
            .collect();
        let lr = if opts.warmup_steps > 0 && step <= opts.warmup_steps {
            optimizer.learning_rate * step as f64 / opts.warmup_steps as f64
        } else {
            optimizer.learning_rate
        };
        let report = opt.step_at(lr, &mut groups);
        if !report.skipped_groups.is_empty() {
            log::warn!(
                "step {step}: skipped parameter groups {:?} (non-finite gradients)",
                report.skipped_groups
            );
        }

        history.push((step, loss_value));
        if step % 50 == 0 || step == opts.steps {
            log::info!("step {step}/{}: loss {loss_value:.5}", opts.steps);
        }

        if let Some(dir) = checkpoint_dir {
            if opts.checkpoint_every > 0 && (step % opts.checkpoint_every == 0 || step == opts.steps)
            {
                let path = dir.join(format!("step_{step:06}.ckpt"));
                weights.save(&path)?;
                write_atomic(&dir.join(format!("step_{step:06}.opt")), &opt.state_bytes())?;
                last_checkpoint = Some(path);
            }
        }
    }

    if let Some(dir) = checkpoint_dir {
        write_loss_csv(&dir.join("loss.csv"), &history)?;
    }
    Ok(PretrainOutcome { weights, history, last_checkpoint })
}

/// Loss-history CSV: header `step,loss`, full float precision.
pub fn write_loss_csv(path: &Path, history: &[(usize, f64)]) -> std::io::Result<()> {
    let mut out = String::from("step,loss\n");
    for (step, loss) in history {
        out.push_str(&format!("{step},{loss}\n"));
    }
    std::fs::write(path, out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
