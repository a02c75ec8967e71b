//! Experiment harness for the lp-attention language model: configuration
//! presets and layering, the K-fold × p sweep runner, cross-fold
//! aggregation, and result export (CSV tables and SVG charts).

pub mod aggregate;
pub mod config;
pub mod export;
pub mod selftest;
pub mod sweep;

pub use aggregate::{aggregate, GroupSummary, RuntimeStats, SweepSummary};
pub use config::{Preset, Settings, SweepSettings};
pub use sweep::{grid, run_sweep, summarize_dir, RunSpec, SweepOutcome};
