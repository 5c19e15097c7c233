//! Downstream adaptation of a pre-trained encoder: frame-level phoneme
//! classification and utterance-level speaker classification, fed by
//! last-layer features, a learned softmax-weighted sum over all layers,
//! or full fine-tuning of the encoder together with the head.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{derive_seed, split_corpus, UtteranceFeatures, PHONE_CLASSES};
use crate::encoder::{trunc_normal, EncoderError, EncoderWeights, Staged};
use crate::optim::{AdamW, AdamWConfig};
use crate::pretrain::{prepare_utterances, MaskPolicy, PreparedUtterance};
use crate::tensor::{gelu_scalar, softmax_rows_plain, Matrix, NodeId, Scalar, Tape, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Phoneme,
    Speaker,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Phoneme => "phoneme",
            Task::Speaker => "speaker",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Encoder frozen; representations are precomputed once.
    FeatureExtraction,
    /// Encoder staged as trainable alongside the head.
    FineTune,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::FeatureExtraction => "feature_extraction",
            TrainMode::FineTune => "fine_tune",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    LastLayer,
    WeightedSum,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::LastLayer => "last_layer",
            FusionMode::WeightedSum => "weighted_sum",
        })
    }
}

/// Where the per-frame representations come from. `RawFrames` bypasses the
/// encoder entirely and feeds the pipeline input straight to the head —
/// the baseline the encoder has to beat.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Encoder,
    RawFrames,
}

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus carries no {task} labels")]
    MissingLabels { task: Task },
    #[error("fusion expects {expected} layer representations, got {found}")]
    FusionLengthMismatch { expected: usize, found: usize },
    #[error("fine-tuning requires the encoder as feature source")]
    FineTuneWithoutEncoder,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ───────────────────────── fusion ─────────────────────────

/// Collapses per-layer representations into one T×d matrix: either the last
/// layer alone, or a convex combination with learned softmaxed weights.
#[derive(Clone, Debug)]
pub struct FusionHead<F: Scalar> {
    pub mode: FusionMode,
    /// 1×L pre-softmax weights; all-zero at init, so fusion starts uniform.
    raw: Matrix<F>,
}

impl<F: Scalar> FusionHead<F> {
    pub fn new(mode: FusionMode, num_layers: usize) -> Self {
        assert!(num_layers > 0, "fusion over zero layers");
        FusionHead { mode, raw: Matrix::zeros(1, num_layers) }
    }

    pub fn num_layers(&self) -> usize {
        self.raw.cols()
    }

    pub fn raw(&self) -> &Matrix<F> {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut Matrix<F> {
        &mut self.raw
    }

    /// Effective per-layer weights: softmax of the raw vector for
    /// WeightedSum, a one-hot on the final layer for LastLayer.
    pub fn weights(&self) -> Vec<f64> {
        match self.mode {
            FusionMode::LastLayer => {
                let mut w = vec![0.0; self.num_layers()];
                *w.last_mut().unwrap() = 1.0;
                w
            }
            FusionMode::WeightedSum => {
                softmax_rows_plain(&self.raw).data().iter().map(|v| v.as_f64()).collect()
            }
        }
    }

    /// |Σ weights − 1|, the invariant tracked at every training step.
    pub fn weight_sum_deviation(&self) -> f64 {
        (self.weights().iter().sum::<f64>() - 1.0).abs()
    }

    fn check_len(&self, found: usize) -> Result<(), DownstreamError> {
        if found != self.num_layers() {
            return Err(DownstreamError::FusionLengthMismatch {
                expected: self.num_layers(),
                found,
            });
        }
        Ok(())
    }

    /// Plain-math fusion for evaluation and export.
    pub fn fuse(&self, reps: &[Matrix<F>]) -> Result<Matrix<F>, DownstreamError> {
        self.check_len(reps.len())?;
        match self.mode {
            FusionMode::LastLayer => Ok(reps.last().unwrap().clone()),
            FusionMode::WeightedSum => {
                let w = self.weights();
                let (t, d) = (reps[0].rows(), reps[0].cols());
                let mut out = Matrix::zeros(t, d);
                for (rep, &wl) in reps.iter().zip(&w) {
                    let wl = F::of(wl);
                    for (o, &r) in out.data_mut().iter_mut().zip(rep.data()) {
                        *o = *o + r * wl;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Tape fusion for training. `raw_node` must be the staged 1×L raw
    /// vector when the mode is WeightedSum (gradients flow into it).
    fn fuse_on(
        &self,
        tape: &mut Tape<F>,
        rep_nodes: &[NodeId],
        raw_node: Option<NodeId>,
    ) -> Result<NodeId, DownstreamError> {
        self.check_len(rep_nodes.len())?;
        match self.mode {
            FusionMode::LastLayer => Ok(*rep_nodes.last().unwrap()),
            FusionMode::WeightedSum => {
                let raw = raw_node.expect("weighted-sum fusion staged without raw weights");
                let soft = tape.softmax_rows(raw)?;
                Ok(tape.linear_combine(rep_nodes, soft)?)
            }
        }
    }
}

// ───────────────────────── heads ─────────────────────────

/// Per-frame phoneme classifier: two fully-connected layers with a GELU
/// between, emitting one logit row per frame.
#[derive(Clone, Debug)]
pub struct PhonemeHead<F: Scalar> {
    pub w1: Matrix<F>,
    pub b1: Matrix<F>,
    pub w2: Matrix<F>,
    pub b2: Matrix<F>,
}

impl<F: Scalar> PhonemeHead<F> {
    pub fn init(d_rep: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PhonemeHead {
            w1: trunc_normal(&mut rng, d_rep, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: trunc_normal(&mut rng, hidden, classes),
            b2: Matrix::zeros(1, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.w2.cols()
    }

    /// T×d_rep → T×classes, plain math.
    pub fn logits(&self, fused: &Matrix<F>) -> Matrix<F> {
        let h = fused.matmul(&self.w1).add_row(&self.b1).map(gelu_scalar);
        h.matmul(&self.w2).add_row(&self.b2)
    }

    fn params_mut(&mut self) -> [&mut Matrix<F>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn stage(&self, tape: &mut Tape<F>) -> [NodeId; 4] {
        [
            tape.leaf(&self.w1, true),
            tape.leaf(&self.b1, true),
            tape.leaf(&self.w2, true),
            tape.leaf(&self.b2, true),
        ]
    }

    fn logits_on(
        &self,
        tape: &mut Tape<F>,
        fused: NodeId,
        nodes: &[NodeId; 4],
    ) -> Result<NodeId, TensorError> {
        let h = tape.linear(fused, nodes[0], nodes[1])?;
        let h = tape.gelu(h);
        tape.linear(h, nodes[2], nodes[3])
    }
}

/// Utterance-level speaker classifier: a linear layer applied per frame,
/// then mean pooling over frames — so the pooled logits are
/// permutation-invariant in the frame order.
#[derive(Clone, Debug)]
pub struct SpeakerHead<F: Scalar> {
    pub w: Matrix<F>,
    pub b: Matrix<F>,
}

impl<F: Scalar> SpeakerHead<F> {
    pub fn init(d_rep: usize, speakers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpeakerHead { w: trunc_normal(&mut rng, d_rep, speakers), b: Matrix::zeros(1, speakers) }
    }

    pub fn classes(&self) -> usize {
        self.w.cols()
    }

    /// T×d_rep → 1×speakers, plain math.
    pub fn logits(&self, fused: &Matrix<F>) -> Matrix<F> {
        fused.matmul(&self.w).add_row(&self.b).mean_rows()
    }

    fn params_mut(&mut self) -> [&mut Matrix<F>; 2] {
        [&mut self.w, &mut self.b]
    }

    fn stage(&self, tape: &mut Tape<F>) -> [NodeId; 2] {
        [tape.leaf(&self.w, true), tape.leaf(&self.b, true)]
    }

    fn logits_on(
        &self,
        tape: &mut Tape<F>,
        fused: NodeId,
        nodes: &[NodeId; 2],
    ) -> Result<NodeId, TensorError> {
        let per_frame = tape.linear(fused, nodes[0], nodes[1])?;
        tape.mean_axis(per_frame, 0)
    }
}

// ───────────────────────── training ─────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub task: Task,
    pub mode: TrainMode,
    pub fusion: FusionMode,
    pub source: FeatureSource,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a dev-accuracy improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            task: Task::Speaker,
            mode: TrainMode::FeatureExtraction,
            fusion: FusionMode::WeightedSum,
            source: FeatureSource::Encoder,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 32,
            patience: 5,
            seed: 0,
        }
    }
}

/// Everything a caller needs to report or reuse after training.
pub struct DownstreamOutcome<F: Scalar> {
    pub report: DownstreamReport,
    pub fusion: FusionHead<F>,
    pub phoneme_head: Option<PhonemeHead<F>>,
    pub speaker_head: Option<SpeakerHead<F>>,
    /// The trained encoder copy (FineTune only).
    pub tuned_encoder: Option<EncoderWeights<F>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DownstreamReport {
    pub task: Task,
    pub mode: TrainMode,
    pub fusion: FusionMode,
    pub layer_count: usize,
    pub test_accuracy: f64,
    pub dev_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Mean training loss per epoch, in epoch order.
    pub train_loss_by_epoch: Vec<f64>,
    /// Worst |Σ softmax weights − 1| seen across all training steps.
    pub max_fusion_weight_deviation: f64,
    /// Final effective fusion weights.
    pub fusion_weights: Vec<f64>,
}

enum Heads<F: Scalar> {
    Phoneme(PhonemeHead<F>),
    Speaker(SpeakerHead<F>),
}

/// Trains a classification head (and, in FineTune mode, the encoder) with
/// AdamW on cross-entropy. The corpus is split 8:1:1 per speaker; the model
/// with the best dev accuracy is kept and scored on the test split.
/// Phoneme accuracy is per frame, speaker accuracy per utterance. The
/// encoder itself always runs without dropout here — downstream batches are
/// small enough that regularisation costs more than it buys.
pub fn train_downstream<F: Scalar>(
    encoder: &EncoderWeights<F>,
    corpus: &[UtteranceFeatures<F>],
    policy: &MaskPolicy,
    cfg: &DownstreamConfig,
) -> Result<DownstreamOutcome<F>, DownstreamError> {
    if corpus.is_empty() {
        return Err(DownstreamError::EmptyCorpus);
    }
    if cfg.mode == TrainMode::FineTune && cfg.source == FeatureSource::RawFrames {
        return Err(DownstreamError::FineTuneWithoutEncoder);
    }
    if cfg.task == Task::Phoneme && corpus.iter().any(|u| u.labels.is_none()) {
        return Err(DownstreamError::MissingLabels { task: Task::Phoneme });
    }

    let prepared = prepare_utterances(corpus, policy);
    let use_encoder = cfg.source == FeatureSource::Encoder;
    if use_encoder && prepared[0].input.cols() != encoder.config.input_dim {
        return Err(EncoderError::InputDimMismatch {
            expected: encoder.config.input_dim,
            found: prepared[0].input.cols(),
        }
        .into());
    }

    let d_rep =
        if use_encoder { encoder.config.hidden_dim } else { prepared[0].input.cols() };
    let layer_count = if use_encoder { encoder.config.num_layers } else { 1 };
    let classes = match cfg.task {
        Task::Phoneme => PHONE_CLASSES,
        Task::Speaker => {
            let speakers: BTreeSet<u32> = corpus.iter().map(|u| u.speaker).collect();
            *speakers.iter().next_back().unwrap() as usize + 1
        }
    };

    // speaker-stratified split; tiny corpora may leave dev/test empty, in
    // which case they fall back on the previous tier
    let split = split_corpus(corpus, cfg.seed);
    let index_of = |ids: &[String]| -> Vec<usize> {
        ids.iter()
            .map(|id| prepared.iter().position(|p| &p.id == id).expect("split id in corpus"))
            .collect()
    };
    let train_idx = index_of(&split.train);
    let mut dev_idx = index_of(&split.dev);
    if dev_idx.is_empty() {
        dev_idx = train_idx.clone();
    }
    let mut test_idx = index_of(&split.test);
    if test_idx.is_empty() {
        test_idx = dev_idx.clone();
    }

    // frozen representations are computed once, in parallel
    let frozen_reps: Option<Vec<Vec<Matrix<F>>>> = match (cfg.mode, cfg.source) {
        (TrainMode::FineTune, _) => None,
        (_, FeatureSource::RawFrames) => {
            Some(prepared.iter().map(|p| vec![p.input.clone()]).collect())
        }
        (_, FeatureSource::Encoder) => Some(
            prepared
                .par_iter()
                .map(|p| Ok(encoder.infer(&p.input, false)?.layer_reps))
                .collect::<Result<_, EncoderError>>()?,
        ),
    };

    let mut fusion = FusionHead::<F>::new(cfg.fusion, layer_count);
    let mut heads = match cfg.task {
        Task::Phoneme => {
            Heads::Phoneme(PhonemeHead::init(d_rep, d_rep, classes, derive_seed(cfg.seed, &[7])))
        }
        Task::Speaker => {
            Heads::Speaker(SpeakerHead::init(d_rep, classes, derive_seed(cfg.seed, &[7])))
        }
    };
    let mut tuned: Option<EncoderWeights<F>> = match cfg.mode {
        TrainMode::FineTune => Some(encoder.clone()),
        TrainMode::FeatureExtraction => None,
    };

    let mut optimizer = AdamW::<F>::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        ..AdamWConfig::default()
    });
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[8]));
    let mut order = train_idx.clone();

    let mut train_loss_by_epoch = Vec::new();
    let mut max_deviation: f64 = 0.0;
    let mut best: Option<BestState<F>> = None;
    let mut stale_epochs = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
        }

        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut tape: Tape<F> = Tape::new();
            // staging order is also the optimizer group order below
            let raw_node = match cfg.fusion {
                FusionMode::WeightedSum => Some(tape.leaf(fusion.raw(), true)),
                FusionMode::LastLayer => None,
            };
            let head_nodes: Vec<NodeId> = match &heads {
                Heads::Phoneme(h) => h.stage(&mut tape).to_vec(),
                Heads::Speaker(h) => h.stage(&mut tape).to_vec(),
            };
            let staged_enc: Option<Staged> =
                tuned.as_ref().map(|w| w.stage(&mut tape, true));

            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let p = &prepared[idx];
                let rep_nodes: Vec<NodeId> = match &frozen_reps {
                    Some(reps) => reps[idx].iter().map(|m| tape.leaf(m, false)).collect(),
                    None => {
                        let w = tuned.as_ref().unwrap();
                        w.forward_on(
                            &mut tape,
                            staged_enc.as_ref().unwrap(),
                            &p.input,
                            &mut crate::encoder::ForwardOptions::inference(),
                        )?
                        .layer_nodes
                    }
                };
                let fused = fusion.fuse_on(&mut tape, &rep_nodes, raw_node)?;
                let loss = match &heads {
                    Heads::Phoneme(h) => {
                        let nodes = [head_nodes[0], head_nodes[1], head_nodes[2], head_nodes[3]];
                        let logits = h.logits_on(&mut tape, fused, &nodes)?;
                        let targets: Vec<usize> =
                            p.labels.as_ref().unwrap().iter().map(|&l| l as usize).collect();
                        tape.cross_entropy_rows(logits, &targets)?
                    }
                    Heads::Speaker(h) => {
                        let nodes = [head_nodes[0], head_nodes[1]];
                        let pooled = h.logits_on(&mut tape, fused, &nodes)?;
                        tape.cross_entropy_rows(pooled, &[p.speaker as usize])?
                    }
                };
                losses.push(loss);
            }

            let coeff = Matrix::filled(1, losses.len(), F::of(1.0 / losses.len() as f64));
            let coeff = tape.leaf(&coeff, false);
            let batch_loss = tape.linear_combine(&losses, coeff)?;
            loss_sum += tape.scalar(batch_loss).as_f64();
            loss_batches += 1;
            tape.backward(batch_loss)?;

            // collect grads while the tape is alive, then step in lockstep
            let mut param_nodes: Vec<NodeId> = Vec::new();
            param_nodes.extend(raw_node);
            param_nodes.extend(&head_nodes);
            if let Some(staged) = &staged_enc {
                param_nodes.extend(staged.param_nodes());
            }
            // parameters the loss never reaches (the reconstruction head,
            // in fine-tune mode) have no grad and are left untouched
            let grads: Vec<Option<Vec<F>>> =
                param_nodes.iter().map(|&n| tape.grad(n).map(<[F]>::to_vec)).collect();

            let mut entries: Vec<&mut [F]> = Vec::new();
            if raw_node.is_some() {
                entries.push(fusion.raw_mut().data_mut());
            }
            match &mut heads {
                Heads::Phoneme(h) => {
                    entries.extend(h.params_mut().map(|m| m.data_mut()));
                }
                Heads::Speaker(h) => {
                    entries.extend(h.params_mut().map(|m| m.data_mut()));
                }
            }
            if let Some(w) = tuned.as_mut() {
                entries.extend(w.param_entries_mut().into_iter().map(|(_, m)| m.data_mut()));
            }
            debug_assert_eq!(entries.len(), grads.len());
            let mut groups: Vec<(&mut [F], &[F])> = entries
                .into_iter()
                .zip(&grads)
                .filter_map(|(e, g)| g.as_ref().map(|g| (e, g.as_slice())))
                .collect();
            optimizer.step(&mut groups);

            max_deviation = max_deviation.max(fusion.weight_sum_deviation());
        }
        train_loss_by_epoch.push(loss_sum / loss_batches.max(1) as f64);

        let dev_accuracy = evaluate(
            cfg.task,
            &fusion,
            &heads,
            tuned.as_ref().unwrap_or(encoder),
            &prepared,
            &dev_idx,
            frozen_reps.as_deref(),
        )?;
        let improved = best.as_ref().map_or(true, |b| dev_accuracy > b.dev_accuracy);
        if improved {
            best = Some(BestState {
                dev_accuracy,
                epoch,
                fusion: fusion.clone(),
                heads: match &heads {
                    Heads::Phoneme(h) => Heads::Phoneme(h.clone()),
                    Heads::Speaker(h) => Heads::Speaker(h.clone()),
                },
                tuned: tuned.clone(),
            });
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }

    let best = best.expect("at least one epoch ran");
    let test_accuracy = evaluate(
        cfg.task,
        &best.fusion,
        &best.heads,
        best.tuned.as_ref().unwrap_or(encoder),
        &prepared,
        &test_idx,
        frozen_reps.as_deref(),
    )?;

    let report = DownstreamReport {
        task: cfg.task,
        mode: cfg.mode,
        fusion: cfg.fusion,
        layer_count,
        test_accuracy,
        dev_accuracy: best.dev_accuracy,
        best_epoch: best.epoch,
        epochs_run,
        train_loss_by_epoch,
        max_fusion_weight_deviation: max_deviation,
        fusion_weights: best.fusion.weights(),
    };
    let (phoneme_head, speaker_head) = match best.heads {
        Heads::Phoneme(h) => (Some(h), None),
        Heads::Speaker(h) => (None, Some(h)),
    };
    Ok(DownstreamOutcome {
        report,
        fusion: best.fusion,
        phoneme_head,
        speaker_head,
        tuned_encoder: best.tuned,
    })
}

struct BestState<F: Scalar> {
    dev_accuracy: f64,
    epoch: usize,
    fusion: FusionHead<F>,
    heads: Heads<F>,
    tuned: Option<EncoderWeights<F>>,
}

pub(crate) fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy over `indices`: fraction of correct frames (phoneme) or correct
/// utterances (speaker). Plain math, parallel across utterances.
fn evaluate<F: Scalar>(
    task: Task,
    fusion: &FusionHead<F>,
    heads: &Heads<F>,
    encoder_for_live: &EncoderWeights<F>,
    prepared: &[PreparedUtterance<F>],
    indices: &[usize],
    frozen_reps: Option<&[Vec<Matrix<F>>]>,
) -> Result<f64, DownstreamError> {
    let counts: Result<Vec<(usize, usize)>, DownstreamError> = indices
        .par_iter()
        .map(|&idx| {
            let p = &prepared[idx];
            let fused = match frozen_reps {
                Some(reps) => fusion.fuse(&reps[idx])?,
                None => fusion.fuse(&encoder_for_live.infer(&p.input, false)?.layer_reps)?,
            };
            Ok(match (task, heads) {
                (Task::Phoneme, Heads::Phoneme(h)) => {
                    let logits = h.logits(&fused);
                    let labels = p.labels.as_ref().expect("label presence checked upfront");
                    let correct = (0..logits.rows())
                        .filter(|&r| argmax(logits.row(r)) == labels[r] as usize)
                        .count();
                    (correct, logits.rows())
                }
                (Task::Speaker, Heads::Speaker(h)) => {
                    let logits = h.logits(&fused);
                    ((argmax(logits.row(0)) == p.speaker as usize) as usize, 1)
                }
                _ => unreachable!("head matches task by construction"),
            })
        })
        .collect();
    let counts = counts?;
    let (correct, total) =
        counts.iter().fold((0usize, 0usize), |(c, t), &(pc, pt)| (c + pc, t + pt));
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

// ───────────────────────── reports ─────────────────────────

/// One row per utterance: id, speaker, then the mean-pooled fused
/// representation. Deterministic given the same model and corpus.
pub fn export_pooled_embeddings<F: Scalar>(
    encoder: &EncoderWeights<F>,
    fusion: &FusionHead<F>,
    corpus: &[UtteranceFeatures<F>],
    policy: &MaskPolicy,
    path: &Path,
) -> Result<usize, DownstreamError> {
    let prepared = prepare_utterances(corpus, policy);
    let pooled: Result<Vec<Matrix<F>>, DownstreamError> = prepared
        .par_iter()
        .map(|p| Ok(fusion.fuse(&encoder.infer(&p.input, false)?.layer_reps)?.mean_rows()))
        .collect();
    let pooled = pooled?;

    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "utterance_id,speaker_id")?;
    for i in 0..encoder.config.hidden_dim {
        write!(out, ",e{i}")?;
    }
    writeln!(out)?;
    for (p, row) in prepared.iter().zip(&pooled) {
        write!(out, "{},{}", p.id, p.speaker)?;
        for &v in row.data() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(prepared.len())
}

pub const METRICS_HEADER: &str = "task,mode,fusion,layer_count,test_accuracy";

/// Appends one metrics row, writing the header first on a fresh file.
pub fn append_metrics_row(path: &Path, report: &DownstreamReport) -> std::io::Result<()> {
    let fresh = !path.exists();
    let mut out = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(out, "{METRICS_HEADER}")?;
    }
    writeln!(
        out,
        "{},{},{},{},{}",
        report.task, report.mode, report.fusion, report.layer_count, report.test_accuracy
    )
}
