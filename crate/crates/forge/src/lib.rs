//! Std companion to `igpo-core`: file formats, checkpoints, a rayon-backed
//! executor and the `igpo-forge` command line.

pub mod checkpoint;
pub mod cli;
pub mod exec;
pub mod io;
pub mod report;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use exec::{RayonExec, THREADS_ENV};
