//! Batch evaluation harness for recommenders, with first-class support for
//! LLM-as-recommender pipelines.
//!
//! The crate covers the whole path from raw interaction logs to metric
//! reports: k-core filtering and leave-one-out splitting ([`corpus`]),
//! distribution-gated user sampling ([`sampling`]), candidate pool
//! construction and arrangement ([`candidates`]), in-repo reference rankers
//! ([`baselines`]), prompt rendering ([`prompting`]), a cached chat-completion
//! client ([`gateway`]), response parsing with hallucination detection
//! ([`parsing`]), the metric catalog ([`metrics`]) and end-to-end experiment
//! drivers ([`experiments`]).

pub mod baselines;
pub mod candidates;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod gateway;
pub mod ids;
pub mod metrics;
pub mod mock;
pub mod parsing;
pub mod prompting;
pub mod report;
pub mod rundir;
pub mod sampling;
pub mod seed;
pub mod text;

pub use candidates::{CandidatePool, Placement, Provenance, RunFile};
pub use corpus::{InteractionLog, PopularityTable, SplitDataset};
pub use error::{Error, Result};
pub use ids::{ItemId, UserId};
pub use metrics::{EvalContext, MetricReport};
pub use parsing::{MatchScope, MatchedRecommendation};
pub use sampling::{KsReport, UserSample};
