//! Two-stage vocabulary-inversion forecasting against a frozen transformer.
//!
//! Stage 1 learns a per-window pseudo-word vocabulary `V` plus a shared
//! dataset embedding `s` by optimizing them (together with a patch embedder,
//! a statistics projector, and a linear forecast head) through a frozen
//! decoder-only backbone. Stage 2 forecasts with that vocabulary, either by
//! similarity-based selection over a learned core lexicon or by multi-head
//! cross-attention reprogramming of the patch embeddings.
//!
//! Everything is f64, seeded, and single-threaded deterministic: identical
//! config + seed reproduce identical artifacts bit for bit.
//!
//! ## Runnable examples
//!
//! One example per major capability, under `examples/`:
//!
//! - **`train_stage1`** — vocabulary inversion on a synthetic sinusoid suite
//! - **`forecast_sim`** — full two-stage run, similarity-selection mode
//! - **`forecast_attn`** — full two-stage run, cross-attention mode, with
//!   attention-weight export
//! - **`compare_vocab`** — learned vocabulary vs. a random frozen one
//! - **`gradient_check`** — finite-difference validation of the tape
//! - **`export_embeddings`** — vocabulary CSV / checkpoint export
//!
//! ```bash
//! cargo run --release --example forecast_sim
//! ```
//!
//! The `vitro` binary wraps the same pipeline behind subcommands
//! (`train-stage1`, `train-stage2`, `predict`, `eval`, `compare-vocab`,
//! `export-embeddings`); see the README.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod vocab;

pub use autodiff::{Adam, AdamConfig, Tape, Tensor};
pub use error::{Error, Result};
