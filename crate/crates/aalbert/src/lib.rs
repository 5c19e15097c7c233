//! Weight-shared transformer encoders for self-supervised speech
//! representation learning.
//!
//! The crate trains an AALBERT-style encoder — a transformer whose layer
//! blocks all alias one shared set of weights — by masked spectrogram
//! reconstruction, next to its unshared Mockingjay-style baseline, and then
//! measures what the learned layers know: downstream phoneme / speaker
//! classification, per-layer probing at several probe depths, and
//! Jensen-Shannon divergence between attention distributions across layers.
//!
//! Everything runs at desk scale on a CPU: the numerics core is a small
//! tape-based reverse-mode autodiff engine (`tensor`), and the data module
//! can synthesize a corpus with planted speaker and phone structure so the
//! whole pipeline is exercisable without any external dataset.
//!
//! The primary interface is the `examples/` directory — one runnable
//! program per capability:
//!
//! ```text
//! cargo run --release -p aalbert --example count_parameters
//! cargo run --release -p aalbert --example feature_pipeline
//! cargo run --release -p aalbert --example pretrain_smoke
//! cargo run --release -p aalbert --example downstream_speaker
//! cargo run --release -p aalbert --example probe_layers
//! cargo run --release -p aalbert --example attention_divergence
//! ```
//!
//! A thin `aalbert` binary wraps the same entry points as subcommands
//! (`pretrain`, `downstream`, `probe`, `analyze-attention`, `count-params`)
//! for scripted runs; see `aalbert --help`.

pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod downstream;
pub mod encoder;
pub mod gradcheck;
pub mod optim;
pub mod pretrain;
pub mod probe;
pub mod tensor;

pub use encoder::{count_from_config, EncoderConfig, EncoderWeights};
pub use pretrain::MaskPolicy;
pub use tensor::{Matrix, Scalar, Tape};
