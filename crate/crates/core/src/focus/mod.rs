//! Query-time use of stored document caches.
//!
//! Retrieved caches are dealt into reuse groups that share one position range
//! ([`allocation`]), the query is pre-filled layer by layer while the least
//! attended documents are dropped ([`prefill`], [`pruning`]), and the
//! survivors are moved next to the query before decoding ([`layout`]).

pub mod allocation;
pub mod layout;
pub mod pipeline;
pub mod prefill;
pub mod pruning;

pub use allocation::{
    compute_n_reuse, n_reuse_for_capacity, plan_positions, usable_slots, AllocationPlan,
    AllocationStrategy, Placement,
};
pub use layout::{final_layout, final_reposition, proximity_order, FinalLayout, Survivor};
pub use pipeline::{
    prefix_tokens, query_tokens, run_with_documents, Mode, Pipeline, RunConfig, RunOutput, Trace,
};
pub use prefill::{layer_context, prefill_observed, prefill_with_pruning, PositionBudget, PrefillOutcome};
pub use pruning::{accumulate_scores, document_mass, PruningSchedule, PruningState};
