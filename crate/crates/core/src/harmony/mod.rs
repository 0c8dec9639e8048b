//! Per-task mask machinery: masked gradients, agreement, importance and
//! harmony scores, ERK initialization, the cosine flip schedule, the mask
//! update and unseen-task voting.

mod erk;
mod gradients;
mod mask;
mod schedule;
mod scores;
mod select;
mod update;
mod vote;

#[cfg(test)]
pub(crate) mod testkit;

pub use erk::{erk_init, erk_plan, erk_ratio, ErkPlan};
pub use gradients::{collect_round, masked_gradient, MaskedGrad, RoundGradients, TaskObjective};
pub use mask::{active_count, BitMask, Owner};
pub use schedule::{cosine_alpha, FlipSchedule};
pub use scores::{
    agreement_score, averaged_harmony, fisher_importance, harmony_score, importance_score,
    magnitude_importance, mean_gradient, AveragedHarmony, HarmonyReport, Importance, ImportanceKind,
    FISHER_EPS,
};
pub use select::{arg_btm_k, arg_top_k, Selection};
pub use update::{mask_update, recovery_score, update_mask, MaskUpdateStats, OwnerUpdate};
pub use vote::vote_unseen_mask;

/// Default threshold for unseen-task voting.
pub const DEFAULT_VOTE_THRESHOLD: usize = 25;
