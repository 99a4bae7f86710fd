//! Denoising diffusion for dense vision tasks at desk scale.
//!
//! The crate trains and runs conditional denoising diffusion models that map
//! RGB conditioning to dense optical flow or monocular depth, with the pieces
//! that make sparse, noisy ground truth workable: nearest-neighbor infilling,
//! a masked L1 epsilon-loss, step-unrolled training, DDPM ancestral sampling,
//! replacement-guided imputation, and coarse-to-fine tiled refinement.
//! Everything runs on procedurally generated toy scenes in double precision
//! on the CPU.
//!
//! Start with the runnable examples (one per capability):
//!
//! ```text
//! cargo run --release --example train_constant_toy
//! cargo run --release --example sample_ensemble
//! cargo run --release --example impute_depth
//! cargo run --release --example coarse_to_fine
//! cargo run --release --example flow_dataset
//! cargo run --release --example gradient_check
//! cargo run --release --example evaluate_metrics
//! ```
//!
//! The `ddvm` binary wraps the same library functions behind batch
//! subcommands (`gen-data`, `train`, `sample`, `refine`, `impute`,
//! `evaluate`, `viz`).

pub mod error;
pub mod field;
pub mod graph;
pub mod rng;
pub mod schedule;
pub mod sparse;

pub use error::{Error, Result};
pub use field::DenseField;
