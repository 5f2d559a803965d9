//! Experiment runner for the multi-scale video–audio model: corpus export,
//! pretraining with per-step logs and per-epoch checkpoints, generation and
//! retrieval evaluation, and the component ablation grid.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod data;
pub mod eval;
pub mod train;

pub use config::ExperimentConfig;

// Training allocates and frees large temporaries every step.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use avpyramid_core::Error;

/// Process exit code for an error: 2 for configuration problems, 3 for
/// numeric failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}
