//! Engine for generating step-wise preference datasets over reasoning tasks.
//!
//! A problem corpus is pushed through pruned dual-chain rollouts against a
//! policy/reward backend: at every level the engine samples a budget of
//! candidate next-steps, keeps only the highest- and lowest-reward ones, and
//! grows a max-chain and a min-chain to completion. Each problem is then
//! routed through one of three data-evolution stages (direct pair emission,
//! self-correction, diversity augmentation with a smaller policy), and the
//! surviving chosen/rejected trajectory pairs are validated and exported as
//! JSONL for preference training. A verified DPO loss/gradient module and a
//! toy tabular trainer close the loop on the exported data.

pub mod answer;
pub mod backend;
pub mod config;
pub mod curator;
pub mod dpo;
pub mod hashing;
pub mod pipeline;
pub mod reward;
pub mod rollout;
pub mod stages;

pub use backend::{BackendConfig, InferenceGateway, MockWorldSpec, Problem, Role};
pub use config::PipelineConfig;
pub use curator::{DatasetStats, PreferencePair, Stage};
