//! Mobility-aware semantic cache engine for agent-based human-mobility
//! simulation: latent reasoning chains are stored in a reconstructible tree
//! cache, recombined via similarity search scored by a trained evaluator, and
//! decoded by a distilled lightweight decoder, with a full quality and
//! efficiency measurement harness.

pub mod cache;
pub mod checkpoint;
pub mod decoder;
pub mod domain;
pub mod evaluator;
pub mod geo;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod teacher;

pub use cache::{CacheEntry, CacheError, CacheIndex, CacheNode, Candidate, ChainId, NodeId};
pub use decoder::{DecoderError, DistillationExample, StudentDecoder};
pub use domain::{
    context_features, context_similarity, decode_tokens, encode_tokens, euclid_km, Activity,
    ActivityKind, DomainError, GeoPoint, LatentStep, Profile, Provenance, ReasoningChain,
    SimulationContext, TokenSequence, Trajectory, EMBED_DIM,
};
pub use evaluator::{EvaluatorError, EvaluatorExample, EvaluatorModel};
pub use geo::{generate_city, gravity_assign, materialize, City, GeoError, GravityParams, Poi};
pub use inference::{
    BatchResult, BranchScorer, ChainDecoder, InferenceConfig, RunRecord, SimError, Simulator,
    Strategy, StrategyOutcome,
};
pub use metrics::{EfficiencyReport, Histogram, MetricsError};
pub use teacher::{
    decode_step_reference, encode_step, simulate_backend_cost, BackendCostModel, StepSemantics,
    SyntheticTeacher, TeacherBackend, TeacherError, TeacherPolicy,
};
