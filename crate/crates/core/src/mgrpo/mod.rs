//! Group-relative advantages, trajectory alignment and clipped surrogates.

pub mod advantage;
pub mod align;
pub mod objective;

pub use advantage::{
    main_advantages, per_rollout_advantages, sub_advantages, sub_advantages_masked, GroupStats,
};
pub use align::{align, align_indices, estimate_d, AlignedBatch, AlignedSub, SubSource};
pub use objective::{
    check_behavior, l2_norm, surrogate_grad, surrogate_main, surrogate_sub, surrogate_with_grad,
    update, ClipConfig, RoleBatch, SurrogateEntry,
};
