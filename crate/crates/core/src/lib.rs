//! Mental-health risk assessment from paired wearable behavior data and
//! self-reported mental records.
//!
//! The pipeline runs in stages that communicate through JSON Lines files:
//!
//! 1. [`ingestion`] parses delimited source files and aggregates them into
//!    weekly [`ingestion::AssessmentCase`]s.
//! 2. [`refine`] renders each behavior window as text and runs a bounded
//!    self-refine loop that shortens the rendering while keeping every
//!    signal and every observed day.
//! 3. [`causal`] runs factual pair extraction, counterfactual re-rating and a
//!    combined verdict per case.
//! 4. [`augment`] builds counterfactually distorted SFT records.
//! 5. [`evaluation`] computes classification metrics, perplexity, silhouette
//!    and k-fold consistency accuracy.
//!
//! Every language-model call goes through [`gateway::Gateway`], which can be
//! backed by a live HTTP endpoint, a recorded tape, or the rule-based
//! [`simulate::SimulatedModel`].

pub mod augment;
pub mod causal;
pub mod digest;
pub mod evaluation;
pub mod exec;
pub mod fixtures;
pub mod gateway;
pub mod ingestion;
pub mod jsonl;
pub mod prompts;
pub mod refine;
pub mod simulate;
pub mod structured;

pub use exec::Execution;
pub use gateway::Gateway;
