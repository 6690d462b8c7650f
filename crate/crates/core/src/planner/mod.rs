//! Online planning: particle belief, rollout abstraction and tree search.

pub mod belief;
pub mod pomcp;
pub mod rollout;

pub use belief::Belief;
pub use pomcp::{Decision, KnownState, PlanError, Pomcp, SolverConfig};
pub use rollout::{RolloutConfig, RolloutError, RolloutValueTable};
