//! A small dense-network engine: parameter containers, a layer graph with
//! batch normalization, losses, optimizers and a finite-difference checker.

pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod loss;
pub mod optim;
pub mod params;
pub mod spec;

pub use graph::{backward, backward_full, commit_running_stats, forward, forward_from, Batch, BnStats, ForwardPass, Mode, Upstream};
pub use optim::{Optimizer, OptimizerConfig};
pub use params::{Gradients, ParamEntry, ParamSet, Role, Tensor};
pub use spec::{Layer, ModelSpec};
