//! Long-context inference over reusable document KV caches.
//!
//! Documents are encoded once, offline, against a shared prefix. At query time
//! their caches are re-positioned with rotary-embedding arithmetic so that many
//! of them fit in the model's positional range, the least-attended ones are
//! pruned layer by layer while the query is pre-filled, and the survivors are
//! packed next to the query before greedy decoding.

pub mod bench;
mod binio;
pub mod cache_store;
pub mod corpus;
pub mod error;
pub mod focus;
pub mod metrics;
pub mod model;
pub mod retrieval;
pub mod rope;
pub mod tokenizer;

pub use error::{Error, Result};
