//! Reasoner/verifier retrieval-augmented dialogue with adversarial rewards,
//! entropy-pattern analysis and group-relative advantages.
//!
//! The crate is organised bottom-up: [`protocol`] parses the action tags,
//! [`gateway`] and [`retrieval`] talk to models and search services,
//! [`dialogue`] drives the two agents, [`reward`] and [`grpo`] turn traces
//! into training signal, and [`store`] persists both.

pub mod dialogue;
pub mod entropy;
pub mod gateway;
pub mod grpo;
pub mod metrics;
pub mod prompts;
pub mod protocol;
pub mod retrieval;
pub mod reward;
pub mod store;
