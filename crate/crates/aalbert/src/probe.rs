//! Layer-wise probing: small frame-level classifiers (linear, one hidden,
//! two hidden) trained on one frozen layer's representations to measure how
//! much phoneme or speaker information that layer carries.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{derive_seed, split_corpus, UtteranceFeatures, PHONE_CLASSES};
use crate::downstream::argmax;
use crate::encoder::{trunc_normal, EncoderError, EncoderWeights};
use crate::optim::{AdamW, AdamWConfig};
use crate::pretrain::{prepare_utterances, MaskPolicy, PreparedUtterance};
use crate::tensor::{gelu_scalar, Matrix, NodeId, Scalar, Tape, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeDepth {
    Linear,
    OneHidden,
    TwoHidden,
}

impl ProbeDepth {
    pub const ALL: [ProbeDepth; 3] = [ProbeDepth::Linear, ProbeDepth::OneHidden, ProbeDepth::TwoHidden];

    pub fn hidden_layers(self) -> usize {
        match self {
            ProbeDepth::Linear => 0,
            ProbeDepth::OneHidden => 1,
            ProbeDepth::TwoHidden => 2,
        }
    }
}

impl fmt::Display for ProbeDepth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeDepth::Linear => "linear",
            ProbeDepth::OneHidden => "one_hidden",
            ProbeDepth::TwoHidden => "two_hidden",
        })
    }
}

/// Both probe tasks are frame-level: every frame is one classification
/// example, labelled with its phoneme or with its utterance's speaker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    Phoneme,
    Speaker,
}

impl fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeTask::Phoneme => "phoneme",
            ProbeTask::Speaker => "speaker",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub depth: ProbeDepth,
    /// Width of the hidden layers (ignored by the linear probe).
    pub hidden: usize,
    pub task: ProbeTask,
    /// Target layer, 1-based.
    pub layer: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_frames: usize,
    /// Per-split frame cap; larger splits are subsampled with a stream
    /// derived from `seed` (recorded in reports).
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            depth: ProbeDepth::Linear,
            hidden: 768,
            task: ProbeTask::Speaker,
            layer: 1,
            learning_rate: 1e-3,
            epochs: 10,
            patience: 3,
            batch_frames: 256,
            max_frames: 200_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus carries no phoneme labels")]
    MissingLabels,
    #[error("probe layer {layer} out of range 1..={layers}")]
    InvalidLayer { layer: usize, layers: usize },
    #[error("probe sweep needs at least one depth and one task")]
    EmptyGrid,
    #[error("probe cell (layer {layer}, {depth}, {task}) failed: {source}")]
    Cell { layer: usize, depth: ProbeDepth, task: ProbeTask, source: Box<ProbeError> },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ───────────────────────── frame datasets ─────────────────────────

/// One split's worth of frame examples.
#[derive(Clone, Debug)]
pub struct FrameSplit<F: Scalar> {
    pub x: Matrix<F>,
    pub y: Vec<usize>,
}

/// Frame-level train/dev/test examples plus the class count — the direct
/// input to probe training, decoupled from the encoder so controls (like
/// Gaussian-noise features) can be probed through the same path.
#[derive(Clone, Debug)]
pub struct FrameSet<F: Scalar> {
    pub train: FrameSplit<F>,
    pub dev: FrameSplit<F>,
    pub test: FrameSplit<F>,
    pub classes: usize,
}

impl<F: Scalar> FrameSet<F> {
    /// Null-information control: same labels and shapes, features replaced
    /// by unit Gaussian noise. A probe on this must sit at the majority
    /// baseline.
    pub fn gaussian_control(&self, seed: u64) -> FrameSet<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noisy = |split: &FrameSplit<F>| FrameSplit {
            x: Matrix::from_vec(
                split.x.rows(),
                split.x.cols(),
                (0..split.x.len())
                    .map(|_| F::of(rand::Rng::sample::<f64, _>(&mut rng, StandardNormal)))
                    .collect(),
            ),
            y: split.y.clone(),
        };
        FrameSet {
            train: noisy(&self.train),
            dev: noisy(&self.dev),
            test: noisy(&self.test),
            classes: self.classes,
        }
    }
}

/// Fraction held by the most common label — the chance-level floor every
/// informative probe has to beat.
pub fn majority_baseline(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    *counts.values().max().unwrap() as f64 / labels.len() as f64
}

fn frame_label<F: Scalar>(p: &PreparedUtterance<F>, task: ProbeTask, frame: usize) -> usize {
    match task {
        ProbeTask::Phoneme => p.labels.as_ref().expect("labels checked upfront")[frame] as usize,
        ProbeTask::Speaker => p.speaker as usize,
    }
}

fn collect_split<F: Scalar>(
    reps: &[Matrix<F>],
    prepared: &[PreparedUtterance<F>],
    indices: &[usize],
    task: ProbeTask,
    cap: usize,
    cap_seed: u64,
) -> FrameSplit<F> {
    let mut rows: Vec<&[F]> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for &idx in indices {
        let rep = &reps[idx];
        for r in 0..rep.rows() {
            rows.push(rep.row(r));
            labels.push(frame_label(&prepared[idx], task, r));
        }
    }
    if rows.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(cap_seed);
        let mut keep = rand::seq::index::sample(&mut rng, rows.len(), cap).into_vec();
        keep.sort_unstable();
        rows = keep.iter().map(|&i| rows[i]).collect();
        labels = keep.iter().map(|&i| labels[i]).collect();
    }
    let cols = rows.first().map_or(0, |r| r.len());
    let mut x = Matrix::zeros(rows.len(), cols);
    for (r, row) in rows.iter().enumerate() {
        x.row_mut(r).copy_from_slice(row);
    }
    FrameSplit { x, y: labels }
}

// ───────────────────────── the probe classifier ─────────────────────────

/// A stack of fully-connected layers with GELU between them (none after
/// the last): 1 layer for Linear, 2 for OneHidden, 3 for TwoHidden.
#[derive(Clone, Debug)]
pub struct ProbeClassifier<F: Scalar> {
    layers: Vec<(Matrix<F>, Matrix<F>)>,
}

impl<F: Scalar> ProbeClassifier<F> {
    pub fn init(d_rep: usize, hidden: usize, classes: usize, depth: ProbeDepth, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![d_rep];
        dims.extend(std::iter::repeat(hidden).take(depth.hidden_layers()));
        dims.push(classes);
        let layers = dims
            .windows(2)
            .map(|w| (trunc_normal(&mut rng, w[0], w[1]), Matrix::zeros(1, w[1])))
            .collect();
        ProbeClassifier { layers }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn logits(&self, x: &Matrix<F>) -> Matrix<F> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w).add_row(b);
            if i < last {
                h = h.map(gelu_scalar);
            }
        }
        h
    }

    fn stage(&self, tape: &mut Tape<F>) -> Vec<NodeId> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [tape.leaf(w, true), tape.leaf(b, true)])
            .collect()
    }

    fn logits_on(
        &self,
        tape: &mut Tape<F>,
        x: NodeId,
        nodes: &[NodeId],
    ) -> Result<NodeId, TensorError> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for i in 0..self.layers.len() {
            h = tape.linear(h, nodes[2 * i], nodes[2 * i + 1])?;
            if i < last {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix<F>> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    fn accuracy(&self, split: &FrameSplit<F>) -> f64 {
        if split.y.is_empty() {
            return 0.0;
        }
        let logits = self.logits(&split.x);
        let correct = (0..logits.rows()).filter(|&r| argmax(logits.row(r)) == split.y[r]).count();
        correct as f64 / split.y.len() as f64
    }
}

/// Trains a probe on an assembled frame set and returns test accuracy of
/// the best-dev-epoch classifier.
pub fn probe_frames<F: Scalar>(set: &FrameSet<F>, cfg: &ProbeConfig) -> Result<f64, ProbeError> {
    if set.train.y.is_empty() {
        return Err(ProbeError::EmptyCorpus);
    }
    let d_rep = set.train.x.cols();
    let mut probe =
        ProbeClassifier::<F>::init(d_rep, cfg.hidden, set.classes, cfg.depth, derive_seed(cfg.seed, &[11]));
    let mut optimizer = AdamW::<F>::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        ..AdamWConfig::default()
    });
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[12]));
    let mut order: Vec<usize> = (0..set.train.y.len()).collect();

    let mut best: Option<(f64, ProbeClassifier<F>)> = None;
    let mut stale = 0usize;
    for _epoch in 1..=cfg.epochs {
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut shuffle_rng);
        }
        for batch in order.chunks(cfg.batch_frames.max(1)) {
            let mut bx = Matrix::zeros(batch.len(), d_rep);
            let mut by = Vec::with_capacity(batch.len());
            for (r, &i) in batch.iter().enumerate() {
                bx.row_mut(r).copy_from_slice(set.train.x.row(i));
                by.push(set.train.y[i]);
            }
            let mut tape: Tape<F> = Tape::new();
            let nodes = probe.stage(&mut tape);
            let x = tape.leaf(&bx, false);
            let logits = probe.logits_on(&mut tape, x, &nodes)?;
            let loss = tape.cross_entropy_rows(logits, &by)?;
            tape.backward(loss)?;
            let grads: Vec<Vec<F>> =
                nodes.iter().map(|&n| tape.grad(n).expect("probe params get grads").to_vec()).collect();
            let mut groups: Vec<(&mut [F], &[F])> = probe
                .params_mut()
                .into_iter()
                .zip(grads.iter().map(|g| g.as_slice()))
                .map(|(m, g)| (m.data_mut(), g))
                .collect();
            optimizer.step(&mut groups);
        }
        let dev_acc = probe.accuracy(&set.dev);
        if best.as_ref().map_or(true, |(b, _)| dev_acc > *b) {
            best = Some((dev_acc, probe.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_probe) = best.expect("at least one epoch ran");
    Ok(best_probe.accuracy(&set.test))
}

// ───────────────────────── encoder-backed probes ─────────────────────────

fn check_inputs<F: Scalar>(
    encoder: &EncoderWeights<F>,
    corpus: &[UtteranceFeatures<F>],
    cfg: &ProbeConfig,
) -> Result<(), ProbeError> {
    if corpus.is_empty() {
        return Err(ProbeError::EmptyCorpus);
    }
    let layers = encoder.config.num_layers;
    if cfg.layer == 0 || cfg.layer > layers {
        return Err(ProbeError::InvalidLayer { layer: cfg.layer, layers });
    }
    if cfg.task == ProbeTask::Phoneme && corpus.iter().any(|u| u.labels.is_none()) {
        return Err(ProbeError::MissingLabels);
    }
    Ok(())
}

fn split_indices<F: Scalar>(
    corpus: &[UtteranceFeatures<F>],
    prepared: &[PreparedUtterance<F>],
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let split = split_corpus(corpus, seed);
    let index_of = |ids: &[String]| -> Vec<usize> {
        ids.iter()
            .map(|id| prepared.iter().position(|p| &p.id == id).expect("split id in corpus"))
            .collect()
    };
    let train = index_of(&split.train);
    let mut dev = index_of(&split.dev);
    if dev.is_empty() {
        dev = train.clone();
    }
    let mut test = index_of(&split.test);
    if test.is_empty() {
        test = dev.clone();
    }
    (train, dev, test)
}

fn classes_for<F: Scalar>(corpus: &[UtteranceFeatures<F>], task: ProbeTask) -> usize {
    match task {
        ProbeTask::Phoneme => PHONE_CLASSES,
        ProbeTask::Speaker => corpus.iter().map(|u| u.speaker as usize).max().unwrap_or(0) + 1,
    }
}

fn assemble_set<F: Scalar>(
    reps: &[Matrix<F>],
    prepared: &[PreparedUtterance<F>],
    splits: &(Vec<usize>, Vec<usize>, Vec<usize>),
    task: ProbeTask,
    classes: usize,
    cfg: &ProbeConfig,
) -> FrameSet<F> {
    let cap = cfg.max_frames.max(1);
    FrameSet {
        train: collect_split(reps, prepared, &splits.0, task, cap, derive_seed(cfg.seed, &[13, 0])),
        dev: collect_split(reps, prepared, &splits.1, task, cap, derive_seed(cfg.seed, &[13, 1])),
        test: collect_split(reps, prepared, &splits.2, task, cap, derive_seed(cfg.seed, &[13, 2])),
        classes,
    }
}

/// Extracts the frame set a probe would train on: representations of one
/// encoder layer, split train/dev/test by utterance and capped per split.
pub fn layer_frame_set<F: Scalar>(
    encoder: &EncoderWeights<F>,
    corpus: &[UtteranceFeatures<F>],
    policy: &MaskPolicy,
    cfg: &ProbeConfig,
) -> Result<FrameSet<F>, ProbeError> {
    check_inputs(encoder, corpus, cfg)?;
    let prepared = prepare_utterances(corpus, policy);
    let reps: Vec<Matrix<F>> = prepared
        .par_iter()
        .map(|p| Ok(encoder.infer(&p.input, false)?.layer_reps.swap_remove(cfg.layer - 1)))
        .collect::<Result<_, EncoderError>>()?;
    let splits = split_indices(corpus, &prepared, cfg.seed);
    let classes = classes_for(corpus, cfg.task);
    Ok(assemble_set(&reps, &prepared, &splits, cfg.task, classes, cfg))
}

/// Probes one layer of a frozen encoder and returns frame-level test
/// accuracy.
pub fn run_probe<F: Scalar>(
    encoder: &EncoderWeights<F>,
    corpus: &[UtteranceFeatures<F>],
    policy: &MaskPolicy,
    cfg: &ProbeConfig,
) -> Result<f64, ProbeError> {
    let set = layer_frame_set(encoder, corpus, policy, cfg)?;
    probe_frames(&set, cfg)
}

// ───────────────────────── the sweep ─────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct ProbeCell {
    pub layer: usize,
    pub depth: ProbeDepth,
    pub task: ProbeTask,
    pub accuracy: f64,
    pub seed: u64,
}

/// The full grid: accuracies for every (layer, depth, task), rows ordered
/// layer-major then depth then task, plus the identity of the probed model.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub model_checksum: u64,
    pub base_seed: u64,
    pub cells: Vec<ProbeCell>,
}

impl ProbeReport {
    pub fn is_complete(&self, layers: usize, depths: usize, tasks: usize) -> bool {
        self.cells.len() == layers * depths * tasks
            && self.cells.iter().all(|c| (0.0..=1.0).contains(&c.accuracy))
    }
}

/// Probes every layer with every depth and task. Cells run in parallel
/// (the encoder is read-shared); each gets its own derived seed so the
/// report is deterministic regardless of scheduling.
pub fn probe_sweep<F: Scalar>(
    encoder: &EncoderWeights<F>,
    corpus: &[UtteranceFeatures<F>],
    policy: &MaskPolicy,
    depths: &[ProbeDepth],
    tasks: &[ProbeTask],
    base: &ProbeConfig,
) -> Result<ProbeReport, ProbeError> {
    if depths.is_empty() || tasks.is_empty() {
        return Err(ProbeError::EmptyGrid);
    }
    if corpus.is_empty() {
        return Err(ProbeError::EmptyCorpus);
    }
    if tasks.contains(&ProbeTask::Phoneme) && corpus.iter().any(|u| u.labels.is_none()) {
        return Err(ProbeError::MissingLabels);
    }

    let prepared = prepare_utterances(corpus, policy);
    let all_reps: Vec<Vec<Matrix<F>>> = prepared
        .par_iter()
        .map(|p| Ok(encoder.infer(&p.input, false)?.layer_reps))
        .collect::<Result<_, EncoderError>>()?;
    let splits = split_indices(corpus, &prepared, base.seed);

    let mut grid: Vec<(usize, ProbeDepth, ProbeTask)> = Vec::new();
    for layer in 1..=encoder.config.num_layers {
        for &depth in depths {
            for &task in tasks {
                grid.push((layer, depth, task));
            }
        }
    }

    let cells: Result<Vec<ProbeCell>, ProbeError> = grid
        .par_iter()
        .map(|&(layer, depth, task)| {
            let cell_seed = derive_seed(
                base.seed,
                &[10, layer as u64, depth.hidden_layers() as u64, task as u64],
            );
            let cfg = ProbeConfig { depth, task, layer, seed: cell_seed, ..base.clone() };
            let reps: Vec<Matrix<F>> =
                all_reps.iter().map(|layers| layers[layer - 1].clone()).collect();
            let classes = classes_for(corpus, task);
            let set = assemble_set(&reps, &prepared, &splits, task, classes, &cfg);
            let accuracy = probe_frames(&set, &cfg)
                .map_err(|e| ProbeError::Cell { layer, depth, task, source: Box::new(e) })?;
            Ok(ProbeCell { layer, depth, task, accuracy, seed: cell_seed })
        })
        .collect();

    Ok(ProbeReport { model_checksum: encoder.checksum(), base_seed: base.seed, cells: cells? })
}

pub const PROBE_CSV_HEADER: &str = "layer,depth,task,accuracy,seed";

pub fn write_probe_csv(report: &ProbeReport, path: &Path) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{PROBE_CSV_HEADER}")?;
    for c in &report.cells {
        writeln!(out, "{},{},{},{},{}", c.layer, c.depth, c.task, c.accuracy, c.seed)?;
    }
    out.flush()
}
