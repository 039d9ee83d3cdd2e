//! Parallel action-query trajectory decoding for driving.
//!
//! A small transformer encodes ego-history tokens; a bank of learnable action
//! queries, seeded from corpus trajectory statistics, attends to that context
//! and regresses the whole future trajectory in one forward pass. Training is
//! supervised regression followed by group-relative policy optimization with
//! rule-based trajectory, steering, and acceleration rewards.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod rewards;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
