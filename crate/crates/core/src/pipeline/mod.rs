//! Decoupled training: a main worker and a sub worker that exchange only
//! trajectories, rewards, barriers and sub-policy snapshots through a
//! write-once store, plus a single-process reference trainer.

pub mod curriculum;
pub mod store;
pub mod worker;

pub use curriculum::{
    main_worker_loop, run_curriculum, run_decoupled, run_reference, run_single_agent,
    sub_worker_loop, CurriculumResult, MainRun,
};
pub use store::{DirStore, MainRewardRecord, MemoryStore, RecordKind, Store, StoreKey, SubStats};
pub use worker::{
    generate_groups, initial_policies, initial_solo_policy, main_update, main_worker_step,
    reference_trainer_step, single_agent_step, step_queries, sub_update, sub_worker_step,
    MainUpdate, StepPlan, StepReport, SubGroup, SubUpdate,
};
