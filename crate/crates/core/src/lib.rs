//! Hierarchical group-relative policy optimization for a main agent that
//! delegates to a sub agent, trained on a synthetic multi-hop lookup task.

pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod mgrpo;
pub mod pipeline;
pub mod policy;
pub mod record;
pub mod rewards;
pub mod trajectory;

pub use config::{Mode, RunConfig, StoreBackend};
pub use error::{Error, Result};
