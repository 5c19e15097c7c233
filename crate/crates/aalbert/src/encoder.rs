//! Post-norm transformer encoder with optional cross-layer weight sharing.
//!
//! With `share_weights` on, exactly one layer block exists and every layer
//! indexes it — mutating the block changes all layers, and during training
//! each of its parameters is staged on the tape once, so the tape's gradient
//! accumulation hands it the sum of all per-layer gradients. The unshared
//! variant stores `num_layers` independent blocks.
//!
//! A layer is: multi-head self-attention with a residual connection and
//! layer norm, then a GELU feed-forward with residual and layer norm. The
//! input projection maps acoustic frames to the hidden width, a fixed
//! sinusoidal table supplies positions, and a linear reconstruction head
//! maps the last layer back to the target width.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Matrix, NodeId, Scalar, Tape, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

const CHECKPOINT_MAGIC: &[u8; 8] = b"AALBCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub input_dim: usize,
    pub target_dim: usize,
    pub share_weights: bool,
    pub dropout_rate: f64,
    pub max_sequence_length: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ff_dim: 3072,
            input_dim: 160,
            target_dim: 201,
            share_weights: true,
            dropout_rate: 0.1,
            max_sequence_length: 2048,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.num_layers == 0 {
            return Err(EncoderError::InvalidConfig("num_layers must be at least 1".into()));
        }
        if self.hidden_dim == 0 || self.ff_dim == 0 || self.input_dim == 0 || self.target_dim == 0 {
            return Err(EncoderError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EncoderError::InvalidConfig(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.max_sequence_length == 0 {
            return Err(EncoderError::InvalidConfig("max_sequence_length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("input width {found} does not match encoder input_dim {expected}")]
    InputDimMismatch { expected: usize, found: usize },
    #[error("sequence length {t} exceeds max_sequence_length {max}")]
    SequenceTooLong { t: usize, max: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("dropout requested without an RNG")]
    DropoutWithoutRng,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a weight checkpoint (bad magic {found:?})")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint format version {found}; this build reads version {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint stores {found}-byte elements but {requested}-byte precision was requested")]
    PrecisionMismatch { found: u8, requested: usize },
    #[error("malformed embedded config: {0}")]
    MalformedConfig(String),
    #[error("truncated checkpoint: expected {needed} more bytes")]
    Truncated { needed: usize },
    #[error(
        "config/weight shape disagreement: embedded config implies {expected} parameter bytes, \
         file carries {found}"
    )]
    ShapeDisagreement { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One transformer layer's parameters: the four attention projections, the
/// two feed-forward layers, and the two layer-norm affine pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerBlock<F: Scalar> {
    pub q_w: Matrix<F>,
    pub q_b: Matrix<F>,
    pub k_w: Matrix<F>,
    pub k_b: Matrix<F>,
    pub v_w: Matrix<F>,
    pub v_b: Matrix<F>,
    pub o_w: Matrix<F>,
    pub o_b: Matrix<F>,
    pub ff1_w: Matrix<F>,
    pub ff1_b: Matrix<F>,
    pub ff2_w: Matrix<F>,
    pub ff2_b: Matrix<F>,
    pub ln1_g: Matrix<F>,
    pub ln1_b: Matrix<F>,
    pub ln2_g: Matrix<F>,
    pub ln2_b: Matrix<F>,
}

impl<F: Scalar> LayerBlock<F> {
    fn params(&self) -> [(&'static str, &Matrix<F>); 16] {
        [
            ("q.w", &self.q_w),
            ("q.b", &self.q_b),
            ("k.w", &self.k_w),
            ("k.b", &self.k_b),
            ("v.w", &self.v_w),
            ("v.b", &self.v_b),
            ("o.w", &self.o_w),
            ("o.b", &self.o_b),
            ("ff1.w", &self.ff1_w),
            ("ff1.b", &self.ff1_b),
            ("ff2.w", &self.ff2_w),
            ("ff2.b", &self.ff2_b),
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
        ]
    }

    fn params_mut(&mut self) -> [(&'static str, &mut Matrix<F>); 16] {
        [
            ("q.w", &mut self.q_w),
            ("q.b", &mut self.q_b),
            ("k.w", &mut self.k_w),
            ("k.b", &mut self.k_b),
            ("v.w", &mut self.v_w),
            ("v.b", &mut self.v_b),
            ("o.w", &mut self.o_w),
            ("o.b", &mut self.o_b),
            ("ff1.w", &mut self.ff1_w),
            ("ff1.b", &mut self.ff1_b),
            ("ff2.w", &mut self.ff2_w),
            ("ff2.b", &mut self.ff2_b),
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
        ]
    }
}

/// All learned parameters plus the fixed positional table. `blocks` holds
/// one element when sharing is on and `num_layers` elements otherwise; layer
/// indexing goes through [`EncoderWeights::block`], which aliases every
/// layer to block 0 in shared mode.
#[derive(Clone, Debug)]
pub struct EncoderWeights<F: Scalar> {
    pub config: EncoderConfig,
    pub input_w: Matrix<F>,
    pub input_b: Matrix<F>,
    /// Sinusoidal, never trained, recomputed from config on load.
    pub positional: Matrix<F>,
    blocks: Vec<LayerBlock<F>>,
    pub recon_w: Matrix<F>,
    pub recon_b: Matrix<F>,
}

pub(crate) fn trunc_normal<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<F> {
    // resample anything beyond ±2σ; drawn in f64 so every precision sees
    // the same stream
    let data: Vec<F> = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = rng.sample::<f64, _>(StandardNormal) * INIT_STD;
            if v.abs() <= 2.0 * INIT_STD {
                break F::of(v);
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

fn init_block<F: Scalar>(rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> LayerBlock<F> {
    let d = cfg.hidden_dim;
    let ff = cfg.ff_dim;
    LayerBlock {
        q_w: trunc_normal(rng, d, d),
        q_b: Matrix::zeros(1, d),
        k_w: trunc_normal(rng, d, d),
        k_b: Matrix::zeros(1, d),
        v_w: trunc_normal(rng, d, d),
        v_b: Matrix::zeros(1, d),
        o_w: trunc_normal(rng, d, d),
        o_b: Matrix::zeros(1, d),
        ff1_w: trunc_normal(rng, d, ff),
        ff1_b: Matrix::zeros(1, ff),
        ff2_w: trunc_normal(rng, ff, d),
        ff2_b: Matrix::zeros(1, d),
        ln1_g: Matrix::filled(1, d, F::one()),
        ln1_b: Matrix::zeros(1, d),
        ln2_g: Matrix::filled(1, d, F::one()),
        ln2_b: Matrix::zeros(1, d),
    }
}

/// pos[t, 2i] = sin(t / 10000^(2i/d)), pos[t, 2i+1] = cos(same).
fn sinusoid_table<F: Scalar>(max_len: usize, d: usize) -> Matrix<F> {
    let mut table = Matrix::zeros(max_len, d);
    for t in 0..max_len {
        for i in 0..d {
            let exponent = 2.0 * (i / 2) as f64 / d as f64;
            let angle = t as f64 / 10000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            table.set(t, i, F::of(v));
        }
    }
    table
}

/// Parameter totals, with the per-section breakdown used by the reporting
/// table. Aliased shared blocks count once.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub input_projection: usize,
    pub layer_block: usize,
    pub distinct_blocks: usize,
    pub reconstruction_head: usize,
    pub num_layers: usize,
    pub shared: bool,
}

impl ParamCount {
    pub fn blocks_total(&self) -> usize {
        self.layer_block * self.distinct_blocks
    }
}

/// Parameter count derived from the config alone (no allocation).
pub fn count_from_config(cfg: &EncoderConfig) -> ParamCount {
    let d = cfg.hidden_dim;
    let ff = cfg.ff_dim;
    let input_projection = cfg.input_dim * d + d;
    let layer_block = 4 * (d * d + d)      // q, k, v, o projections
        + (d * ff + ff) + (ff * d + d)     // feed-forward
        + 2 * (d + d); // two layer-norm affine pairs
    let distinct_blocks = if cfg.share_weights { 1 } else { cfg.num_layers };
    let reconstruction_head = d * cfg.target_dim + cfg.target_dim;
    ParamCount {
        total: input_projection + distinct_blocks * layer_block + reconstruction_head,
        input_projection,
        layer_block,
        distinct_blocks,
        reconstruction_head,
        num_layers: cfg.num_layers,
        shared: cfg.share_weights,
    }
}

impl<F: Scalar> EncoderWeights<F> {
    /// Fresh weights: truncated normal (±2σ at σ=0.02) for projections,
    /// zeros for biases, ones/zeros for layer-norm affines. The same seed
    /// always produces the same weights.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let input_w = trunc_normal(&mut rng, config.input_dim, d);
        let input_b = Matrix::zeros(1, d);
        let n_blocks = if config.share_weights { 1 } else { config.num_layers };
        let blocks = (0..n_blocks).map(|_| init_block(&mut rng, config)).collect();
        let recon_w = trunc_normal(&mut rng, d, config.target_dim);
        let recon_b = Matrix::zeros(1, config.target_dim);
        let positional = sinusoid_table(config.max_sequence_length, d);
        Ok(EncoderWeights {
            config: config.clone(),
            input_w,
            input_b,
            positional,
            blocks,
            recon_w,
            recon_b,
        })
    }

    /// The block used by `layer`; in shared mode every layer yields the
    /// same block (identity, not a copy).
    pub fn block(&self, layer: usize) -> &LayerBlock<F> {
        assert!(layer < self.config.num_layers, "layer {layer} out of range");
        if self.config.share_weights {
            &self.blocks[0]
        } else {
            &self.blocks[layer]
        }
    }

    /// Mutable counterpart of [`block`](Self::block); in shared mode a write
    /// through any layer index lands in the single shared block.
    pub fn block_mut(&mut self, layer: usize) -> &mut LayerBlock<F> {
        assert!(layer < self.config.num_layers, "layer {layer} out of range");
        if self.config.share_weights {
            &mut self.blocks[0]
        } else {
            &mut self.blocks[layer]
        }
    }

    /// The distinct blocks actually stored (1 when shared).
    pub fn distinct_blocks(&self) -> &[LayerBlock<F>] {
        &self.blocks
    }

    pub fn distinct_blocks_mut(&mut self) -> &mut [LayerBlock<F>] {
        &mut self.blocks
    }

    /// Visits every distinct parameter array once, in the canonical order
    /// used by staging, checkpoints, and the optimizer.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Matrix<F>)) {
        f("input.w", &self.input_w);
        f("input.b", &self.input_b);
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, m) in b.params() {
                f(&format!("block{i}.{name}"), m);
            }
        }
        f("recon.w", &self.recon_w);
        f("recon.b", &self.recon_b);
    }

    /// Mutable parameter list in canonical order (for optimizer updates).
    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Matrix<F>)> {
        let mut out: Vec<(String, &mut Matrix<F>)> = Vec::new();
        out.push(("input.w".into(), &mut self.input_w));
        out.push(("input.b".into(), &mut self.input_b));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, m) in b.params_mut() {
                out.push((format!("block{i}.{name}"), m));
            }
        }
        out.push(("recon.w".into(), &mut self.recon_w));
        out.push(("recon.b".into(), &mut self.recon_b));
        out
    }

    /// Counts each distinct parameter array once by walking the stored
    /// matrices; agrees with [`count_from_config`] by construction.
    pub fn count_parameters(&self) -> ParamCount {
        let mut input_projection = 0;
        let mut blocks_total = 0;
        let mut reconstruction_head = 0;
        self.visit_params(|name, m| {
            if name.starts_with("input.") {
                input_projection += m.len();
            } else if name.starts_with("block") {
                blocks_total += m.len();
            } else {
                reconstruction_head += m.len();
            }
        });
        ParamCount {
            total: input_projection + blocks_total + reconstruction_head,
            input_projection,
            layer_block: blocks_total / self.blocks.len(),
            distinct_blocks: self.blocks.len(),
            reconstruction_head,
            num_layers: self.config.num_layers,
            shared: self.config.share_weights,
        }
    }

    /// FNV-1a over the exact bit patterns of every parameter, for
    /// frozen-encoder assertions.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut bytes = Vec::new();
        self.visit_params(|_, m| {
            for &v in m.data() {
                v.write_le(&mut bytes);
            }
        });
        for b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash
    }

    // ─────────────────────────── checkpoint I/O ───────────────────────────

    /// Writes the canonical binary checkpoint: magic, format version,
    /// element width, embedded JSON config, then every distinct parameter
    /// array in canonical order as little-endian floats. The write goes to
    /// a temp file in the target directory and is renamed into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(F::WIDTH as u8);
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(&cfg);
        self.visit_params(|_, m| {
            for &v in m.data() {
                v.write_le(&mut buf);
            }
        });

        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&buf)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`save`](Self::save), with distinct
    /// diagnostics for bad magic, version or precision mismatch, truncation,
    /// and config/weight shape disagreement.
    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            if *off + n > bytes.len() {
                return Err(CheckpointError::Truncated { needed: *off + n - bytes.len() });
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };

        let magic = take(&mut off, CHECKPOINT_MAGIC.len())?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic { found: magic.to_vec() });
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let width = take(&mut off, 1)?[0];
        if width as usize != F::WIDTH {
            return Err(CheckpointError::PrecisionMismatch { found: width, requested: F::WIDTH });
        }
        let cfg_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let config: EncoderConfig = serde_json::from_slice(take(&mut off, cfg_len)?)
            .map_err(|e| CheckpointError::MalformedConfig(e.to_string()))?;
        config
            .validate()
            .map_err(|e| CheckpointError::MalformedConfig(e.to_string()))?;

        let expected = count_from_config(&config).total * F::WIDTH;
        let found = bytes.len() - off;
        if found < expected {
            return Err(CheckpointError::Truncated { needed: expected - found });
        }
        if found > expected {
            return Err(CheckpointError::ShapeDisagreement { expected, found });
        }

        let read_matrix = |off: &mut usize, rows: usize, cols: usize| -> Matrix<F> {
            let n = rows * cols;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let s = &bytes[*off..*off + F::WIDTH];
                *off += F::WIDTH;
                data.push(F::read_le(s));
            }
            Matrix::from_vec(rows, cols, data)
        };

        let d = config.hidden_dim;
        let ff = config.ff_dim;
        let input_w = read_matrix(&mut off, config.input_dim, d);
        let input_b = read_matrix(&mut off, 1, d);
        let n_blocks = if config.share_weights { 1 } else { config.num_layers };
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            blocks.push(LayerBlock {
                q_w: read_matrix(&mut off, d, d),
                q_b: read_matrix(&mut off, 1, d),
                k_w: read_matrix(&mut off, d, d),
                k_b: read_matrix(&mut off, 1, d),
                v_w: read_matrix(&mut off, d, d),
                v_b: read_matrix(&mut off, 1, d),
                o_w: read_matrix(&mut off, d, d),
                o_b: read_matrix(&mut off, 1, d),
                ff1_w: read_matrix(&mut off, d, ff),
                ff1_b: read_matrix(&mut off, 1, ff),
                ff2_w: read_matrix(&mut off, ff, d),
                ff2_b: read_matrix(&mut off, 1, d),
                ln1_g: read_matrix(&mut off, 1, d),
                ln1_b: read_matrix(&mut off, 1, d),
                ln2_g: read_matrix(&mut off, 1, d),
                ln2_b: read_matrix(&mut off, 1, d),
            });
        }
        let recon_w = read_matrix(&mut off, d, config.target_dim);
        let recon_b = read_matrix(&mut off, 1, config.target_dim);
        let positional = sinusoid_table(config.max_sequence_length, d);
        Ok(EncoderWeights { config, input_w, input_b, positional, blocks, recon_w, recon_b })
    }

    // ───────────────────────────── forward ─────────────────────────────

    /// Inserts every distinct parameter array onto the tape once. Shared
    /// mode stages one block whose node ids are reused by all layers, which
    /// is exactly what makes the summed gradient appear on it.
    pub fn stage(&self, tape: &mut Tape<F>, trainable: bool) -> Staged {
        let input_w = tape.leaf(&self.input_w, trainable);
        let input_b = tape.leaf(&self.input_b, trainable);
        let blocks = self
            .blocks
            .iter()
            .map(|b| StagedBlock {
                q_w: tape.leaf(&b.q_w, trainable),
                q_b: tape.leaf(&b.q_b, trainable),
                k_w: tape.leaf(&b.k_w, trainable),
                k_b: tape.leaf(&b.k_b, trainable),
                v_w: tape.leaf(&b.v_w, trainable),
                v_b: tape.leaf(&b.v_b, trainable),
                o_w: tape.leaf(&b.o_w, trainable),
                o_b: tape.leaf(&b.o_b, trainable),
                ff1_w: tape.leaf(&b.ff1_w, trainable),
                ff1_b: tape.leaf(&b.ff1_b, trainable),
                ff2_w: tape.leaf(&b.ff2_w, trainable),
                ff2_b: tape.leaf(&b.ff2_b, trainable),
                ln1_g: tape.leaf(&b.ln1_g, trainable),
                ln1_b: tape.leaf(&b.ln1_b, trainable),
                ln2_g: tape.leaf(&b.ln2_g, trainable),
                ln2_b: tape.leaf(&b.ln2_b, trainable),
            })
            .collect();
        let recon_w = tape.leaf(&self.recon_w, trainable);
        let recon_b = tape.leaf(&self.recon_b, trainable);
        Staged {
            share_weights: self.config.share_weights,
            input_w,
            input_b,
            blocks,
            recon_w,
            recon_b,
        }
    }

    /// One forward pass over a staged parameter set. `input` is T×input_dim
    /// at the utterance's true length (no padding anywhere).
    pub fn forward_on(
        &self,
        tape: &mut Tape<F>,
        staged: &Staged,
        input: &Matrix<F>,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<ForwardOutput<F>, EncoderError> {
        let cfg = &self.config;
        let t = input.rows();
        if t == 0 {
            return Err(EncoderError::EmptyInput);
        }
        if input.cols() != cfg.input_dim {
            return Err(EncoderError::InputDimMismatch {
                expected: cfg.input_dim,
                found: input.cols(),
            });
        }
        if t > cfg.max_sequence_length {
            return Err(EncoderError::SequenceTooLong { t, max: cfg.max_sequence_length });
        }
        if opts.dropout_rate > 0.0 && opts.dropout_rng.is_none() {
            return Err(EncoderError::DropoutWithoutRng);
        }

        let d = cfg.hidden_dim;
        let heads = cfg.num_heads;
        let head_dim = d / heads;
        let scale = F::of(1.0 / (head_dim as f64).sqrt());
        let eps = F::of(LAYER_NORM_EPS);

        let x_in = tape.leaf(input, false);
        let mut x = tape.linear(x_in, staged.input_w, staged.input_b)?;
        let pos = {
            let mut rows = Matrix::zeros(t, d);
            for r in 0..t {
                rows.row_mut(r).copy_from_slice(self.positional.row(r));
            }
            tape.leaf(&rows, false)
        };
        x = tape.add(x, pos)?;
        x = Self::maybe_dropout(tape, x, opts);

        let mut layer_nodes = Vec::with_capacity(cfg.num_layers);
        let mut attention = if opts.capture_attention {
            Some(AttentionRecord { layers: Vec::with_capacity(cfg.num_layers) })
        } else {
            None
        };

        for layer in 0..cfg.num_layers {
            let b = staged.block(layer);
            let q = tape.linear(x, b.q_w, b.q_b)?;
            let k = tape.linear(x, b.k_w, b.k_b)?;
            let v = tape.linear(x, b.v_w, b.v_b)?;

            let mut head_outs = Vec::with_capacity(heads);
            let mut head_attn = Vec::with_capacity(heads);
            for h in 0..heads {
                let qa = tape.slice_cols(q, h * head_dim, head_dim)?;
                let ka = tape.slice_cols(k, h * head_dim, head_dim)?;
                let va = tape.slice_cols(v, h * head_dim, head_dim)?;
                let kt = tape.transpose(ka)?;
                let scores = tape.matmul(qa, kt)?;
                let scaled = tape.scale(scores, scale);
                let attn = tape.softmax_rows(scaled)?;
                if attention.is_some() {
                    head_attn.push(tape.value(attn));
                }
                head_outs.push(tape.matmul(attn, va)?);
            }
            if let Some(rec) = attention.as_mut() {
                rec.layers.push(head_attn);
            }

            let merged = tape.concat_cols(&head_outs)?;
            let mut attn_out = tape.linear(merged, b.o_w, b.o_b)?;
            attn_out = Self::maybe_dropout(tape, attn_out, opts);
            let res1 = tape.add(x, attn_out)?;
            x = tape.layer_norm_rows(res1, b.ln1_g, b.ln1_b, eps)?;

            let ff_in = tape.linear(x, b.ff1_w, b.ff1_b)?;
            let ff_act = tape.gelu(ff_in);
            let mut ff_out = tape.linear(ff_act, b.ff2_w, b.ff2_b)?;
            ff_out = Self::maybe_dropout(tape, ff_out, opts);
            let res2 = tape.add(x, ff_out)?;
            x = tape.layer_norm_rows(res2, b.ln2_g, b.ln2_b, eps)?;

            layer_nodes.push(x);
        }

        let reconstruction = tape.linear(x, staged.recon_w, staged.recon_b)?;
        Ok(ForwardOutput { layer_nodes, reconstruction, attention })
    }

    fn maybe_dropout(tape: &mut Tape<F>, x: NodeId, opts: &mut ForwardOptions<'_>) -> NodeId {
        match (&mut opts.dropout_rng, opts.dropout_rate) {
            (Some(rng), rate) if rate > 0.0 => tape.dropout(x, rate, &mut **rng),
            _ => x,
        }
    }

    /// Inference shortcut: fresh tape, no gradients, no dropout. Returns
    /// owned per-layer representations, the reconstruction, and (optionally)
    /// every attention distribution.
    pub fn infer(
        &self,
        input: &Matrix<F>,
        capture_attention: bool,
    ) -> Result<InferOutput<F>, EncoderError> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let mut opts = ForwardOptions {
            capture_attention,
            dropout_rate: 0.0,
            dropout_rng: None,
        };
        let out = self.forward_on(&mut tape, &staged, input, &mut opts)?;
        Ok(InferOutput {
            layer_reps: out.layer_nodes.iter().map(|&id| tape.value(id)).collect(),
            reconstruction: tape.value(out.reconstruction),
            attention: out.attention,
        })
    }
}

/// Node ids of staged parameters. `blocks` holds distinct blocks only;
/// `block(layer)` resolves sharing exactly like the weights do.
pub struct Staged {
    share_weights: bool,
    pub input_w: NodeId,
    pub input_b: NodeId,
    pub blocks: Vec<StagedBlock>,
    pub recon_w: NodeId,
    pub recon_b: NodeId,
}

pub struct StagedBlock {
    pub q_w: NodeId,
    pub q_b: NodeId,
    pub k_w: NodeId,
    pub k_b: NodeId,
    pub v_w: NodeId,
    pub v_b: NodeId,
    pub o_w: NodeId,
    pub o_b: NodeId,
    pub ff1_w: NodeId,
    pub ff1_b: NodeId,
    pub ff2_w: NodeId,
    pub ff2_b: NodeId,
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
}

impl StagedBlock {
    fn node_list(&self) -> [NodeId; 16] {
        [
            self.q_w, self.q_b, self.k_w, self.k_b, self.v_w, self.v_b, self.o_w, self.o_b,
            self.ff1_w, self.ff1_b, self.ff2_w, self.ff2_b, self.ln1_g, self.ln1_b, self.ln2_g,
            self.ln2_b,
        ]
    }
}

impl Staged {
    pub fn block(&self, layer: usize) -> &StagedBlock {
        if self.share_weights {
            &self.blocks[0]
        } else {
            &self.blocks[layer]
        }
    }

    /// Staged node ids in the same canonical order as
    /// [`EncoderWeights::visit_params`] / `param_entries_mut`.
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut out = vec![self.input_w, self.input_b];
        for b in &self.blocks {
            out.extend_from_slice(&b.node_list());
        }
        out.push(self.recon_w);
        out.push(self.recon_b);
        out
    }
}

pub struct ForwardOptions<'r> {
    pub capture_attention: bool,
    pub dropout_rate: f64,
    pub dropout_rng: Option<&'r mut ChaCha8Rng>,
}

impl ForwardOptions<'static> {
    pub fn inference() -> Self {
        ForwardOptions { capture_attention: false, dropout_rate: 0.0, dropout_rng: None }
    }
}

pub struct ForwardOutput<F: Scalar> {
    /// Hidden states after each layer, in layer order (tape node ids).
    pub layer_nodes: Vec<NodeId>,
    pub reconstruction: NodeId,
    pub attention: Option<AttentionRecord<F>>,
}

/// Softmax attention weights captured during a forward pass:
/// `layers[l][h]` is the T×T row-stochastic matrix of layer l, head h.
#[derive(Clone, Debug)]
pub struct AttentionRecord<F: Scalar> {
    pub layers: Vec<Vec<Matrix<F>>>,
}

pub struct InferOutput<F: Scalar> {
    pub layer_reps: Vec<Matrix<F>>,
    pub reconstruction: Matrix<F>,
    pub attention: Option<AttentionRecord<F>>,
}
