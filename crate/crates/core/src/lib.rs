//! Building faithfulness preference data from an LLM's own
//! summarize → critique → refine loop, plus a checked DPO+NLL objective on a
//! tabular toy policy.

pub mod critique;
pub mod gateway;
pub mod generation;
pub mod parse;
pub mod pipeline;
pub mod prefloss;
pub mod prompt;
pub mod types;

pub use critique::{Critic, CritiqueConfig, CritiqueError, CritiqueResult, CritiqueStrategy};
pub use gateway::{BackendConfig, BackendKind, ChatBackend, ChatRequest, Gateway, GatewayError};
pub use generation::{GenerationError, Generator};
pub use pipeline::{
    DatasetManifest, DatasetSinks, Engine, PipelineConfig, PipelineError, PreferenceTriplet,
    Selection, SkipReason, TripletCandidatePool,
};
pub use prompt::{PromptSet, PromptTemplate, TemplateName};
pub use types::{Document, GenerationParams, HallucinationScore, Summary};
