//! Dynamic mode decomposition with ensemble Kalman filtering of its
//! temporal modes, plus baselines, synthetic generators and evaluation
//! metrics for comparing them.

pub mod baselines;
pub mod dmd;
pub mod dmdenkf;
pub mod error;
pub mod evaluation;
pub mod filters;
pub mod ili;
pub mod linalg;
pub mod rng;
pub mod synthetic;

pub use dmd::{
    build_snapshots, fit_exact_dmd, fit_tdmd, DmdModel, DmdWarning, ModeLink, Pairing, SnapshotPair, SvdTruncation,
};
pub use error::{Error, ErrorKind, Result};
