//! Jensen–Shannon divergence between attention distributions of different
//! layers, computed per head over a fixed evaluation sample and summarised
//! as L×L heatmap matrices (per head, plus their elementwise mean).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{derive_seed, UtteranceFeatures};
use crate::encoder::{AttentionRecord, EncoderError, EncoderWeights};
use crate::pretrain::{prepare_utterances, MaskPolicy};
use crate::tensor::{Matrix, Scalar};

/// Tolerance on Σp when validating that an input is a distribution.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// Utterances drawn (without replacement) into the evaluation sample.
pub const DEFAULT_SAMPLE_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("distribution lengths differ: {p} vs {q}")]
    LengthMismatch { p: usize, q: usize },
    #[error("negative probability {value} at index {index}")]
    Negative { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("{what} index {index} out of range for {limit}")]
    IndexOutOfRange { what: &'static str, index: usize, limit: usize },
    #[error("attention analysis needs a nonempty utterance sample")]
    EmptySample,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ───────────────────────── the divergence ─────────────────────────

fn check_distribution<F: Scalar>(p: &[F]) -> Result<(), AttentionError> {
    let mut sum = 0.0;
    for (i, &v) in p.iter().enumerate() {
        let v = v.as_f64();
        if v < 0.0 {
            return Err(AttentionError::Negative { index: i, value: v });
        }
        sum += v;
    }
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(AttentionError::NotNormalized { sum });
    }
    Ok(())
}

/// JSD(p,q) = ½KL(p‖m) + ½KL(q‖m) with m = ½(p+q), log base 2 — so the
/// result lives in [0,1], with 0 iff p = q and 1 for disjoint supports.
/// The 0·log 0 terms are taken as 0.
pub fn js_divergence<F: Scalar>(p: &[F], q: &[F]) -> Result<f64, AttentionError> {
    if p.len() != q.len() {
        return Err(AttentionError::LengthMismatch { p: p.len(), q: q.len() });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mut jsd = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let (pi, qi) = (pi.as_f64(), qi.as_f64());
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            jsd += 0.5 * pi * (pi / m).log2();
        }
        if qi > 0.0 {
            jsd += 0.5 * qi * (qi / m).log2();
        }
    }
    // clamp away negative rounding dust so the [0,1] contract is exact
    Ok(jsd.clamp(0.0, 1.0))
}

/// Mean JSD between two layers' attention rows in one head: the divergence
/// is taken per query position, then averaged over positions.
pub fn layer_pair_divergence<F: Scalar>(
    attn: &AttentionRecord<F>,
    layer_i: usize,
    layer_j: usize,
    head: usize,
) -> Result<f64, AttentionError> {
    let layers = attn.layers.len();
    for idx in [layer_i, layer_j] {
        if idx >= layers {
            return Err(AttentionError::IndexOutOfRange { what: "layer", index: idx, limit: layers });
        }
    }
    let heads = attn.layers[layer_i].len();
    if head >= heads {
        return Err(AttentionError::IndexOutOfRange { what: "head", index: head, limit: heads });
    }
    let a = &attn.layers[layer_i][head];
    let b = &attn.layers[layer_j][head];
    let mut sum = 0.0;
    for r in 0..a.rows() {
        sum += js_divergence(a.row(r), b.row(r))?;
    }
    Ok(sum / a.rows() as f64)
}

// ───────────────────────── matrices over a sample ─────────────────────────

/// Per-head L×L divergence matrices and their elementwise mean, plus the
/// identity of the sample they were computed on.
#[derive(Clone, Debug)]
pub struct JsAnalysis {
    pub per_head: Vec<Matrix<f64>>,
    pub averaged: Matrix<f64>,
    pub sample_ids: Vec<String>,
    pub total_frames: usize,
}

/// Largest entry off the diagonal — the "how differently do tied layers
/// attend" summary number.
pub fn max_off_diagonal(m: &Matrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if i != j {
                best = best.max(m.get(i, j));
            }
        }
    }
    best
}

/// Divergence matrices from already-captured attention records, averaged
/// over utterances weighted by frame count (each query position counts
/// once). Order of the records does not affect the result beyond float
/// rounding.
pub fn js_matrices_from_records<F: Scalar>(
    records: &[AttentionRecord<F>],
) -> Result<(Vec<Matrix<f64>>, Matrix<f64>, usize), AttentionError> {
    if records.is_empty() {
        return Err(AttentionError::EmptySample);
    }
    let layers = records[0].layers.len();
    let heads = records[0].layers[0].len();
    let mut sums = vec![Matrix::<f64>::zeros(layers, layers); heads];
    let mut total_rows = 0usize;
    for rec in records {
        let t = rec.layers[0][0].rows();
        total_rows += t;
        for h in 0..heads {
            for i in 0..layers {
                for j in (i + 1)..layers {
                    // un-averaged row sum, so utterances weigh by length
                    let pair = layer_pair_divergence(rec, i, j, h)? * t as f64;
                    let v = sums[h].get(i, j) + pair;
                    sums[h].set(i, j, v);
                    sums[h].set(j, i, v);
                }
            }
        }
    }
    let per_head: Vec<Matrix<f64>> =
        sums.into_iter().map(|m| m.map(|v| v / total_rows as f64)).collect();
    let mut averaged = Matrix::<f64>::zeros(layers, layers);
    for m in &per_head {
        for (a, &v) in averaged.data_mut().iter_mut().zip(m.data()) {
            *a += v / heads as f64;
        }
    }
    Ok((per_head, averaged, total_rows))
}

/// Runs the encoder with attention capture over a fixed-seed sample of the
/// corpus and reduces the captured distributions to JSD matrices.
pub fn build_js_matrices<F: Scalar>(
    encoder: &EncoderWeights<F>,
    corpus: &[UtteranceFeatures<F>],
    policy: &MaskPolicy,
    sample_size: usize,
    seed: u64,
) -> Result<JsAnalysis, AttentionError> {
    if corpus.is_empty() || sample_size == 0 {
        return Err(AttentionError::EmptySample);
    }
    let n = sample_size.min(corpus.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[6]));
    let mut picked = rand::seq::index::sample(&mut rng, corpus.len(), n).into_vec();
    picked.sort_unstable();
    let sample: Vec<UtteranceFeatures<F>> = picked.iter().map(|&i| corpus[i].clone()).collect();

    let prepared = prepare_utterances(&sample, policy);
    let records: Vec<AttentionRecord<F>> = prepared
        .par_iter()
        .map(|p| {
            Ok(encoder
                .infer(&p.input, true)?
                .attention
                .expect("attention capture was requested"))
        })
        .collect::<Result<_, EncoderError>>()?;

    let (per_head, averaged, total_frames) = js_matrices_from_records(&records)?;
    Ok(JsAnalysis {
        per_head,
        averaged,
        sample_ids: prepared.into_iter().map(|p| p.id).collect(),
        total_frames,
    })
}

// ───────────────────────── CSV output ─────────────────────────

/// Headerless L×L comma-separated floats — heatmap cell data, one file per
/// matrix. (The run-wide CSV-header convention is deliberately waived here:
/// these files are consumed as plain matrices.)
pub fn write_js_matrix_csv(matrix: &Matrix<f64>, path: &Path) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in 0..matrix.rows() {
        let row: Vec<String> = matrix.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()
}

/// Writes `js_matrix_head{h}.csv` per head plus `js_matrix_avg.csv` into
/// `dir`; returns the paths written.
pub fn write_js_analysis(analysis: &JsAnalysis, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (h, m) in analysis.per_head.iter().enumerate() {
        let path = dir.join(format!("js_matrix_head{h}.csv"));
        write_js_matrix_csv(m, &path)?;
        paths.push(path);
    }
    let avg = dir.join("js_matrix_avg.csv");
    write_js_matrix_csv(&analysis.averaged, &avg)?;
    paths.push(avg);
    Ok(paths)
}
