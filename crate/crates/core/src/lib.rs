//! Core algorithms for training small search-and-browse agents with
//! turn-level information-gain rewards.
//!
//! The crate is `no_std` (it needs `alloc`) and contains no IO. Every
//! operation is a pure function of its inputs, so the std companion crate can
//! run rollouts and per-record cleaning in parallel and still reduce results
//! in a fixed order.
//!
//! Module map:
//!
//! - [`traj`], [`grammar`], [`vocab`]: trajectories, the flat turn grammar,
//!   token serialization with agent-token masks.
//! - [`pipeline`]: schema alignment, pruning, de-duplication, correctness
//!   filtering and turn-aware resampling of SFT data.
//! - [`env`]: synthetic corpus, lexical search index, multi-hop tasks and the
//!   episode stepper.
//! - [`policy`]: feature-hashed linear-softmax policy with exact gradients.
//! - [`reward`]: information-gain rewards, browse-aware assignment, format
//!   penalty, group normalization, IG-Scale and discounted returns.
//! - [`objective`]: masked SFT loss, clipped surrogate with KL, sparse GRPO
//!   advantages, Adam, finite-difference checking.
//! - [`train`]: rollouts and the per-step training pipeline.
//! - [`eval`]: Pass@K and browse-ratio analysis.

#![cfg_attr(not(test), no_std)]
#![cfg_attr(test, allow(clippy::needless_range_loop))]

extern crate alloc;

pub mod env;
pub mod eval;
pub mod grammar;
pub mod objective;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod train;
pub mod traj;
pub mod vocab;

pub use grammar::{render_action, validate_turn_format};
pub use policy::{ContextFeatures, Gradient, PolicyParams};
pub use traj::{Action, ActionKind, GroundTruth, Termination, TokenizedView, Trajectory, Turn};
pub use vocab::Vocabulary;
