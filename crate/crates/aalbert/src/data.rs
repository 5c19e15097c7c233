//! Feature ingestion and corpus plumbing.
//!
//! The model consumes precomputed log-mel features; this module appends
//! first-order deltas, applies per-utterance CMVN, reads and writes the
//! binary feature-file format, builds speaker-stratified corpus splits, and
//! synthesizes a desk-scale corpus with planted speaker and phone structure
//! so the whole pipeline can be exercised without an external dataset.
//!
//! Synthetic-corpus construction, in one breath: every phone class has a
//! fixed spectral template, every speaker has a fixed additive offset *and*
//! a fixed mixing matrix applied to the templates. The offset makes raw
//! frames trivially speaker-separable; per-utterance CMVN then removes
//! it (and any per-frame linear readout of a CMVN'd utterance mean-pools
//! to exactly zero), so whatever survives to a pooled classifier has to be
//! structure a trained encoder extracts — the mixing matrices, and, when
//! `speaker_phone_bias` is set, each speaker's own phone-frequency profile.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, Scalar};

/// Phoneme label alphabet size; stored labels must lie below this.
pub const PHONE_CLASSES: usize = 72;

const FEATURE_MAGIC: &[u8; 4] = b"AALB";
const FEATURE_VERSION: u32 = 1;

/// Delta regression window.
const DELTA_WINDOW: usize = 2;
/// CMVN standard-deviation floor.
const STD_FLOOR: f64 = 1e-10;

// Synthetic-corpus geometry. Offsets dominate noise so raw frames separate
// speakers; the mixing scale controls how much speaker identity survives
// CMVN for the encoder to find.
const TEMPLATE_SCALE: f64 = 1.0;
const OFFSET_SCALE: f64 = 1.5;
const MIX_SCALE: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("not a feature file (bad magic {found:?})")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported feature-file version {found}; this build reads version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated feature file: expected {needed} more bytes")]
    Truncated { needed: usize },
    #[error("label sequence length {labels} does not match frame count {frames}")]
    LabelLengthMismatch { labels: usize, frames: usize },
    #[error("phoneme label {value} outside [0, {limit})")]
    LabelOutOfRange { value: u16, limit: usize },
    #[error("feature file carries {extra} unexpected trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("malformed manifest line {line}: {msg}")]
    MalformedManifest { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One utterance: raw log-mel frames, the CMVN'd reconstruction target, and
/// optional per-frame phoneme labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceFeatures<F: Scalar> {
    pub id: String,
    pub speaker: u32,
    /// T×d_mel log-mel, before deltas and CMVN.
    pub mel: Matrix<F>,
    /// T×d_out reconstruction target, CMVN already applied.
    pub target: Matrix<F>,
    pub labels: Option<Vec<u16>>,
}

impl<F: Scalar> UtteranceFeatures<F> {
    pub fn frames(&self) -> usize {
        self.mel.rows()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if let Some(labels) = &self.labels {
            if labels.len() != self.frames() {
                return Err(DataError::LabelLengthMismatch {
                    labels: labels.len(),
                    frames: self.frames(),
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= PHONE_CLASSES) {
                return Err(DataError::LabelOutOfRange { value: bad, limit: PHONE_CLASSES });
            }
        }
        Ok(())
    }
}

// ───────────────────────── feature pipeline ─────────────────────────

/// Appends first-order deltas: Δₜ = Σₙ₌₁..₂ n·(xₜ₊ₙ − xₜ₋ₙ) / (2·Σₙ n²),
/// with out-of-range frames replicated from the nearest edge. T×d → T×2d.
pub fn add_deltas<F: Scalar>(mel: &Matrix<F>) -> Matrix<F> {
    let t = mel.rows();
    let d = mel.cols();
    let denom: f64 = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Matrix::zeros(t, 2 * d);
    let clamp = |i: isize| -> usize { i.clamp(0, t as isize - 1) as usize };
    for r in 0..t {
        out.row_mut(r)[..d].copy_from_slice(mel.row(r));
        for c in 0..d {
            let mut num = 0.0;
            for n in 1..=DELTA_WINDOW {
                let fwd = mel.get(clamp(r as isize + n as isize), c).as_f64();
                let bwd = mel.get(clamp(r as isize - n as isize), c).as_f64();
                num += n as f64 * (fwd - bwd);
            }
            out.set(r, d + c, F::of(num / denom));
        }
    }
    out
}

/// Per-utterance, per-dimension standardization: subtract the column mean,
/// divide by the population standard deviation (floored at 1e-10).
pub fn cmvn<F: Scalar>(features: &Matrix<F>) -> Matrix<F> {
    let t = features.rows();
    let d = features.cols();
    let mut out = Matrix::zeros(t, d);
    for c in 0..d {
        let mut mean = 0.0;
        for r in 0..t {
            mean += features.get(r, c).as_f64();
        }
        mean /= t as f64;
        let mut var = 0.0;
        for r in 0..t {
            let diff = features.get(r, c).as_f64() - mean;
            var += diff * diff;
        }
        var /= t as f64;
        let std = var.sqrt().max(STD_FLOOR);
        for r in 0..t {
            out.set(r, c, F::of((features.get(r, c).as_f64() - mean) / std));
        }
    }
    out
}

/// The full model-input pipeline: deltas, then CMVN over all 2·d_mel dims.
pub fn pipeline_input<F: Scalar>(mel: &Matrix<F>) -> Matrix<F> {
    cmvn(&add_deltas(mel))
}

// ───────────────────────── synthetic corpus ─────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub num_speakers: usize,
    pub num_phone_classes: usize,
    pub utterances_per_speaker: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Phone segments last this many consecutive frames; longer segments
    /// make masked frames easier to infer from their neighbors.
    pub min_segment_frames: usize,
    pub max_segment_frames: usize,
    /// Spread of per-speaker log-weights over phone classes. 0 keeps every
    /// speaker's phone distribution uniform; larger values give each speaker
    /// its own favored phones, so pooled phone statistics identify the
    /// speaker even after CMVN has erased the additive offset.
    pub speaker_phone_bias: f64,
    pub noise_level: f64,
    pub mel_dim: usize,
    pub target_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            num_speakers: 10,
            num_phone_classes: 8,
            utterances_per_speaker: 20,
            min_frames: 24,
            max_frames: 48,
            min_segment_frames: 2,
            max_segment_frames: 5,
            speaker_phone_bias: 0.0,
            noise_level: 0.1,
            mel_dim: 80,
            target_dim: 201,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let positive = [
            ("num_speakers", self.num_speakers),
            ("num_phone_classes", self.num_phone_classes),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("min_frames", self.min_frames),
            ("max_frames", self.max_frames),
            ("min_segment_frames", self.min_segment_frames),
            ("max_segment_frames", self.max_segment_frames),
            ("mel_dim", self.mel_dim),
            ("target_dim", self.target_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DataError::InvalidSpec(format!("{name} must be positive")));
            }
        }
        if self.min_frames > self.max_frames {
            return Err(DataError::InvalidSpec(format!(
                "min_frames {} exceeds max_frames {}",
                self.min_frames, self.max_frames
            )));
        }
        if self.min_segment_frames > self.max_segment_frames {
            return Err(DataError::InvalidSpec(format!(
                "min_segment_frames {} exceeds max_segment_frames {}",
                self.min_segment_frames, self.max_segment_frames
            )));
        }
        if self.num_phone_classes > PHONE_CLASSES {
            return Err(DataError::InvalidSpec(format!(
                "num_phone_classes {} exceeds the label alphabet {PHONE_CLASSES}",
                self.num_phone_classes
            )));
        }
        if !self.noise_level.is_finite() || self.noise_level < 0.0 {
            return Err(DataError::InvalidSpec("noise_level must be finite and ≥ 0".into()));
        }
        if !self.speaker_phone_bias.is_finite() || self.speaker_phone_bias < 0.0 {
            return Err(DataError::InvalidSpec("speaker_phone_bias must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

/// Stable derivation of an independent RNG stream from a base seed and a
/// tag path (splitmix64 steps folded together), so per-utterance streams
/// never depend on generation order.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e3779b97f4a7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    let mut s = splitmix(base);
    for &t in tags {
        s = splitmix(s ^ t);
    }
    s
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

/// Deterministic corpus with planted structure; see the module docs for why
/// the speaker signal is carried by both an additive offset (visible in raw
/// frames, erased by CMVN) and a per-speaker mixing of the phone templates
/// (which survives CMVN).
pub fn generate_synthetic_corpus<F: Scalar>(
    spec: &SyntheticCorpusSpec,
) -> Result<Vec<UtteranceFeatures<F>>, DataError> {
    spec.validate()?;
    let d = spec.mel_dim;
    let mut master = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0]));

    let templates: Vec<Vec<f64>> =
        (0..spec.num_phone_classes).map(|_| gaussian_vec(&mut master, d, TEMPLATE_SCALE)).collect();
    let offsets: Vec<Vec<f64>> =
        (0..spec.num_speakers).map(|_| gaussian_vec(&mut master, d, OFFSET_SCALE)).collect();
    // mixed templates: per speaker s, phone p: (I + MIX·G_s/√d)·τ_p
    let mixed: Vec<Vec<Vec<f64>>> = (0..spec.num_speakers)
        .map(|_| {
            let g = gaussian_vec(&mut master, d * d, 1.0);
            templates
                .iter()
                .map(|tau| {
                    (0..d)
                        .map(|i| {
                            let mut v = tau[i];
                            for j in 0..d {
                                v += MIX_SCALE * g[i * d + j] * tau[j] / (d as f64).sqrt();
                            }
                            v
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    // fixed random map from mel space to the target spectrogram space
    let target_map = gaussian_vec(&mut master, spec.target_dim * d, 1.0 / (d as f64).sqrt());
    // per-speaker phone priors: softmax of bias-scaled gaussian log-weights
    // (bias 0 → uniform, and sampling then stays on the unweighted path)
    let phone_priors: Vec<Vec<f64>> = (0..spec.num_speakers)
        .map(|_| {
            let logits = gaussian_vec(&mut master, spec.num_phone_classes, spec.speaker_phone_bias);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = exp.iter().sum();
            exp.iter().map(|&e| e / z).collect()
        })
        .collect();

    let mut corpus = Vec::with_capacity(spec.num_speakers * spec.utterances_per_speaker);
    for s in 0..spec.num_speakers {
        for u in 0..spec.utterances_per_speaker {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1, s as u64, u as u64]));
            let t = rng.gen_range(spec.min_frames..=spec.max_frames);
            let mut labels = Vec::with_capacity(t);
            while labels.len() < t {
                let phone = if spec.speaker_phone_bias == 0.0 {
                    rng.gen_range(0..spec.num_phone_classes) as u16
                } else {
                    WeightedIndex::new(&phone_priors[s]).expect("positive weights").sample(&mut rng)
                        as u16
                };
                let seg = rng.gen_range(spec.min_segment_frames..=spec.max_segment_frames);
                for _ in 0..seg.min(t - labels.len()) {
                    labels.push(phone);
                }
            }
            let mut mel = Matrix::<F>::zeros(t, d);
            let mut target_raw = Matrix::<f64>::zeros(t, spec.target_dim);
            for r in 0..t {
                let base = &mixed[s][labels[r] as usize];
                let mut frame = vec![0.0; d];
                for i in 0..d {
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise_level;
                    frame[i] = base[i] + offsets[s][i] + noise;
                    mel.set(r, i, F::of(frame[i]));
                }
                for o in 0..spec.target_dim {
                    let mut v = 0.0;
                    for i in 0..d {
                        v += target_map[o * d + i] * frame[i];
                    }
                    target_raw.set(r, o, v);
                }
            }
            corpus.push(UtteranceFeatures {
                id: format!("spk{s:03}_utt{u:03}"),
                speaker: s as u32,
                mel,
                target: cmvn(&target_raw).cast(),
                labels: Some(labels),
            });
        }
    }
    Ok(corpus)
}

// ───────────────────────── corpus splits ─────────────────────────

/// Disjoint train/dev/test utterance-id lists, 8:1:1 per speaker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

/// Speaker-stratified 8:1:1 split: each speaker's utterances are shuffled
/// with a per-speaker stream and a tenth (rounded down) goes to dev and to
/// test — so every speaker always keeps utterances in train.
pub fn split_corpus<F: Scalar>(corpus: &[UtteranceFeatures<F>], seed: u64) -> CorpusSplit {
    let mut by_speaker: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
    for utt in corpus {
        by_speaker.entry(utt.speaker).or_default().push(&utt.id);
    }
    let mut split = CorpusSplit { train: Vec::new(), dev: Vec::new(), test: Vec::new() };
    for (speaker, mut ids) in by_speaker {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2, speaker as u64]));
        ids.shuffle(&mut rng);
        let n = ids.len();
        let tenth = n / 10;
        for (i, id) in ids.into_iter().enumerate() {
            let bucket = if i < tenth {
                &mut split.test
            } else if i < 2 * tenth {
                &mut split.dev
            } else {
                &mut split.train
            };
            bucket.push(id.to_string());
        }
    }
    split
}

/// Resolves a list of ids against the corpus, preserving corpus order.
pub fn select_by_ids<'a, F: Scalar>(
    corpus: &'a [UtteranceFeatures<F>],
    ids: &[String],
) -> Vec<&'a UtteranceFeatures<F>> {
    let wanted: std::collections::HashSet<&str> = ids.iter().map(|s| s.as_str()).collect();
    corpus.iter().filter(|u| wanted.contains(u.id.as_str())).collect()
}

// ───────────────────────── feature files ─────────────────────────

/// Binary layout: magic `AALB`, version u32, id length u32 + UTF-8 bytes,
/// speaker u32, T u32, d_mel u32, d_out u32, has_labels u8, then the mel and
/// target matrices row-major as little-endian f32, then T u16 labels if
/// present. All integers little-endian.
pub fn write_feature_file<F: Scalar>(
    path: &Path,
    utt: &UtteranceFeatures<F>,
) -> Result<(), DataError> {
    utt.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(utt.id.len() as u32).to_le_bytes());
    buf.extend_from_slice(utt.id.as_bytes());
    buf.extend_from_slice(&utt.speaker.to_le_bytes());
    buf.extend_from_slice(&(utt.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(utt.mel.cols() as u32).to_le_bytes());
    buf.extend_from_slice(&(utt.target.cols() as u32).to_le_bytes());
    buf.push(utt.labels.is_some() as u8);
    for &v in utt.mel.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    for &v in utt.target.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    if let Some(labels) = &utt.labels {
        for &l in labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_file<F: Scalar>(path: &Path) -> Result<UtteranceFeatures<F>, DataError> {
    let bytes = fs::read(path)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], DataError> {
        if *off + n > bytes.len() {
            return Err(DataError::Truncated { needed: *off + n - bytes.len() });
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let magic = take(&mut off, 4)?;
    if magic != FEATURE_MAGIC {
        return Err(DataError::BadMagic { found: magic.to_vec() });
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(DataError::VersionMismatch { found: version, supported: FEATURE_VERSION });
    }
    let id_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let id = String::from_utf8_lossy(take(&mut off, id_len)?).into_owned();
    let speaker = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    let t = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let d_mel = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let d_out = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let has_labels = take(&mut off, 1)?[0] != 0;

    let read_matrix = |off: &mut usize, rows: usize, cols: usize| -> Result<Matrix<F>, DataError> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let s = take(off, 4)?;
            data.push(F::of(f32::from_le_bytes(s.try_into().unwrap()) as f64));
        }
        Ok(Matrix::from_vec(rows, cols, data))
    };
    let mel = read_matrix(&mut off, t, d_mel)?;
    let target = read_matrix(&mut off, t, d_out)?;

    let remaining = bytes.len() - off;
    let labels = if has_labels {
        // whatever tail the file carries must be exactly T u16 labels
        if remaining != 2 * t {
            return Err(DataError::LabelLengthMismatch { labels: remaining / 2, frames: t });
        }
        let mut labels = Vec::with_capacity(t);
        for _ in 0..t {
            labels.push(u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()));
        }
        Some(labels)
    } else {
        if remaining != 0 {
            return Err(DataError::TrailingBytes { extra: remaining });
        }
        None
    };
    let utt = UtteranceFeatures { id, speaker, mel, target, labels };
    utt.validate()?;
    Ok(utt)
}

// ───────────────────────── manifest & directory scan ─────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub utterance_id: String,
    pub path: PathBuf,
    pub speaker_id: u32,
}

pub const MANIFEST_HEADER: &str = "utterance_id,path,speaker_id";

/// Corpus manifest CSV. Ids and paths must not contain commas (the
/// synthetic generator and `write_corpus_dir` never produce any).
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), DataError> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.utterance_id, r.path.display(), r.speaker_id));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != MANIFEST_HEADER {
                return Err(DataError::MalformedManifest {
                    line: 1,
                    msg: format!("expected header `{MANIFEST_HEADER}`, found `{line}`"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(DataError::MalformedManifest {
                line: i + 1,
                msg: format!("expected 3 fields, found {}", parts.len()),
            });
        }
        let speaker_id = parts[2].parse().map_err(|e| DataError::MalformedManifest {
            line: i + 1,
            msg: format!("bad speaker id: {e}"),
        })?;
        rows.push(ManifestRow {
            utterance_id: parts[0].to_string(),
            path: PathBuf::from(parts[1]),
            speaker_id,
        });
    }
    Ok(rows)
}

/// Writes every utterance as `<id>.aalb` under `dir` plus a `manifest.csv`,
/// returning the manifest rows.
pub fn write_corpus_dir<F: Scalar>(
    dir: &Path,
    corpus: &[UtteranceFeatures<F>],
) -> Result<Vec<ManifestRow>, DataError> {
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(corpus.len());
    for utt in corpus {
        let path = dir.join(format!("{}.aalb", utt.id));
        write_feature_file(&path, utt)?;
        rows.push(ManifestRow {
            utterance_id: utt.id.clone(),
            path,
            speaker_id: utt.speaker,
        });
    }
    write_manifest(&dir.join("manifest.csv"), &rows)?;
    Ok(rows)
}

/// Loads every readable feature file under `dir` (sorted by file name for
/// determinism). Unreadable or foreign files are skipped with a warning and
/// counted, never aborting the scan.
pub fn load_feature_dir<F: Scalar>(
    dir: &Path,
) -> Result<(Vec<UtteranceFeatures<F>>, usize), DataError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().map_or(false, |x| x == "aalb"))
        .collect();
    paths.sort();
    let mut corpus = Vec::new();
    let mut skipped = 0;
    for p in paths {
        match read_feature_file(&p) {
            Ok(utt) => corpus.push(utt),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                skipped += 1;
            }
        }
    }
    Ok((corpus, skipped))
}
