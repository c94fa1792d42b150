//! Matrix: experience-driven memory refinement for document-extraction agents.
//!
//! An agent answers extraction queries over UBL invoices by writing small
//! scripts that an executor runs against the document. A training loop
//! collects trajectories over a task batch, reflects on them against ground
//! truth, and asks an optimizer model to distill the lessons into a versioned
//! list of insight strings — the memory — which is injected into the agent's
//! system prompt on the next epoch.
//!
//! Module map:
//! - [`corpus`] — datasets, manifests, splits, tokenization, synthesis
//! - [`gateway`] — chat backends (live HTTP, deterministic scripted), usage
//!   and cost accounting
//! - [`agent`] — the two-agent runtime (assistant + script executor) and its
//!   sandbox
//! - [`evaluator`] — answer matching, per-set reports
//! - [`trainer`] — the reflect-and-optimize training loop
//! - [`baselines`] — chain-of-thought, vanilla agent, and retry-with-
//!   reflections baselines
//! - [`parallel`] — bounded deterministic parallel map

pub mod agent;
pub mod baselines;
pub mod corpus;
pub mod evaluator;
pub mod gateway;
pub mod parallel;
pub mod trainer;
