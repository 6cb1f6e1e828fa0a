//! Differentiable structural pruning.
//!
//! Every prunable dependency group carries logits over "keep the first `k`
//! channels". Training couples a soft network (parameters scaled by the
//! relaxed mask) with a hard network (parameters sliced to the binary
//! prefix) so that the mask found by gradient descent is the one that
//! survives export.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod graph;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod persist;
pub mod pruner;
pub mod rng;

pub use autodiff::{grad_check, GradCheckReport, GradientMap, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use graph::{
    validate_model, Bound, CompactModel, Diagnostic, ForwardMode, GroupSpec, InputSpec, LayerKind, LayerParams,
    LayerSpec, ModelGraph, ModelSpec, Provenance, Rule,
};
pub use masking::{binarize_mask, relax_mask, relax_mask_values, soft_channel_count, Binarized, GroupMask};
pub use metrics::{GapReference, GapReport};
pub use pruner::{PruneRunConfig, RunMode, Trainer, TrajectoryRecord};
pub use persist::{log_trajectory, read_trajectory, Checkpoint, CheckpointKind};
