//! Prompt-conditioned decision transformer: token windows, the model, its
//! action loss and autoregressive rollout.

mod model;
mod rollout;
mod window;

#[cfg(test)]
mod tests;

pub use model::{DtConfig, DtModel};
pub use rollout::{rollout, rollout_batch, EpisodeRecord, RolloutRequest};
pub use window::{
    build_input, token_layout, HistoryWindow, Modality, PromptWindow, Segment, TargetReturn, TaskData,
    TokenRef, TrajectoryBatch, Triplet, PROMPT_POOL_FRACTION,
};
