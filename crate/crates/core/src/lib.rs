//! A minimal decoder-only transformer for character-level language modeling,
//! built on a self-contained reverse-mode autodiff tape, with pluggable
//! query-key normalization in the attention logits:
//!
//! * `standard` — classic scaled dot-product attention, `q . k / sqrt(d_k)`;
//! * `qknorm`   — rows of q and k are l2-normalized, logits scaled by a
//!   learnable per-layer `alpha`;
//! * `lp`       — the generalization to an arbitrary lp norm (`p >= 1`),
//!   `s_ij = alpha * (q_i / max(||q_i||_p, eps)) . (k_j / max(||k_j||_p, eps))`.
//!
//! The crate also provides the experiment plumbing: deterministic data folds
//! over a character corpus, an AdamW training loop with warmup + cosine decay,
//! metrics CSV serialization, checkpointing, and an independent verification
//! module (finite-difference gradient checks and invariant probes).
//!
//! Everything is CPU-only, single-threaded per run, and bitwise reproducible
//! for a fixed seed.

pub mod attention;
pub mod data;
pub mod error;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;

pub use attention::{AttentionConfig, AttentionLayer, AttentionVariant};
pub use error::{Error, Result};
pub use model::{GptModel, ModelConfig};
pub use training::{MetricsRecord, RunMeta, RunResult, TrainConfig};
