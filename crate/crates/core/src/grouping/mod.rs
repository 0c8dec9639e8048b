//! Task grouping: the warm-up harmony matrix, clustering, group masks and the
//! group-wise mask update.

mod assignment;
mod cluster;
mod scores;

pub use assignment::{ClusterMeta, GroupAssignment};
pub use cluster::{
    canonicalize, cluster, inertia, prepare_rows, warmup_and_cluster, KMEANS_RESTARTS, PROJECTED_DIM,
    PROJECTION_THRESHOLD,
};
pub use scores::{
    group_agreement, group_harmony, group_importance, group_mask_update, group_recovery, init_group_masks,
    HarmonyMatrix,
};
