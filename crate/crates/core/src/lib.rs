//! Self-supervised multi-object tracking trained by cross-input consistency.

pub mod cli;
pub mod consistency;
pub mod datamodel;
pub mod diffcore;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod simulator;
pub mod trainer;
pub mod transition;
