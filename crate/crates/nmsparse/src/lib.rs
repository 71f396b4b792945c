//! Post-training N:M and unstructured sparsification of neural-network
//! activations and weights.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - **Scoring** (`criteria`): magnitude (`act`/`wt`), cosine-loss (`clact`),
//!   and outlier-clipped channel-norm (`amber`) importance criteria.
//! - **Masking** (`masks`): exact-count unstructured masks and N:M
//!   semi-structured masks (2:4, 4:8, 8:16, 16:32) over score matrices.
//! - **Error mitigation** (`transforms`): per-token shifts (dynamic, static,
//!   learnable), per-token variance correction, per-channel smoothing,
//!   learnable diagonal scaling, and a low-rank residual path.
//! - **Compressed storage** (`sparse_format`): bit-packed N:M encoding with
//!   colexicographic pattern indices, metadata-cost arithmetic, and a
//!   sparse x dense product over the compressed form.
//! - **A tiny byte-level language model** (`toylm`) whose linear layers
//!   accept sparsification policies, for measuring perplexity degradation.
//! - **An experiment harness** (`harness`) that runs policy grids from a
//!   config file and emits CSV/markdown drop reports.
//!
//! Start with the runnable programs under `examples/`; the `nmsparse` binary
//! exposes the same machinery as subcommands.

#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod criteria;
pub mod error;
pub mod harness;
pub mod masks;
pub mod sparse_format;
pub mod tensor;
pub mod toylm;
pub mod transforms;

pub use criteria::{score_act, score_amber, score_clact, score_wt, Criterion, ScoreMatrix};
pub use error::{Error, Result};
pub use harness::{
    emit_report, run, DropReport, ExperimentConfig, ModelSource, ReportFormat, ReportRow,
    RowOutcome,
};
pub use masks::{
    apply_mask, nm_mask, retained_score, unstructured_mask, Mask, MaskPattern, PatternSpec,
};
pub use sparse_format::{
    decode, encode, metadata_bits_per_block, metadata_bits_per_element, pattern_count, spmm,
    stacked_config_count, CompressedNM,
};
pub use tensor::{matmul, row_mean, row_var, Matrix, Rng};
pub use toylm::{
    train, CalibrationSettings, LayerSite, PolicyArtifacts, PolicyTarget, PreparedPolicy, Probe,
    SiteName, SparsityPolicy, ToyLM, ToyLMConfig,
};
pub use transforms::{
    calibrate_spts, fit_lpts, forward_baseline, forward_dpts, forward_lpts, forward_pcs,
    forward_rsparse, forward_spts, forward_var, pcs_scales, rsparse_factors, variance_scales,
    LearnableParams, LowRankFactors, ScaleVector, ShiftKind, ShiftVector, Transform,
};
