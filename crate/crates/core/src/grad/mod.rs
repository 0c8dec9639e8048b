//! Flat parameter storage, a matrix-level reverse-mode tape, masked
//! optimizer steps and the checkpoint format.

mod checkpoint;
mod optim;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{apply_masked_step, MaskedAdam, Optimizer, OptimizerKind};
pub use params::{GradVector, LayerSegment, Layout, ParamVector, SegmentId, SegmentKind};
pub use tape::{NodeId, Tape, Tensor};
