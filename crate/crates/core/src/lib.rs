//! Clinical decision rule (CDR) agent.
//!
//! A note is matched against a registry of rule definitions by anomaly
//! detection over embedding similarities ([`selection`]), the selected
//! rules' variables are extracted by a language model ([`extraction`]), and
//! each rule's decision tree is executed deterministically ([`rules`]).
//! [`pipeline`] ties the stages together and [`eval`] scores runs against
//! labelled notes.

pub mod embedding;
pub mod eval;
pub mod extraction;
pub mod llm;
pub mod pipeline;
pub mod provider;
pub mod registry;
pub mod rules;
pub mod selection;
pub mod value;

pub use embedding::{EmbeddingCache, EmbeddingProvider, EmbeddingVector, MockEmbedder, RemoteEmbedder};
pub use extraction::{ExclusionVerdict, ExtractedVariables, NoteMeta, Provenance};
pub use llm::{CompletionRequest, LlmProvider, MockLlm, RemoteLlm};
pub use pipeline::{AnalysisSession, Overrides, Pipeline, PipelineConfig, SessionStatus};
pub use provider::{ProviderError, RetryPolicy};
pub use registry::{CdrDefinition, Registry, RegistryError};
pub use rules::{CdrResult, CdrStatus, ExecutionReport, Outcome};
pub use selection::{select_cdrs, SelectionConfig, SimilarityProfile};
pub use value::{Value, VarType};
