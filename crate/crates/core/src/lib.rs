//! Federated prompt learning for joint class and domain generalization.
//!
//! Clients are grouped by domain. Each group trains a cross-attention prompt
//! network that turns class-name token embeddings into prompt tokens, which
//! lets the classifier extend to classes no client has seen. Alternating with
//! that, clients train a shared global prompt and per-domain prompts; domain
//! prompts are aggregated with dataset-size weights and smoothed with Beta
//! momentum over their history. At inference the per-domain classifiers and
//! the global one are mixed by the image's similarity to each domain.
//!
//! Everything runs on frozen embeddings (see [`store`]) with a deterministic
//! text-encoder stand-in, so a full run is reproducible from its seed.

pub mod checkpoint;
mod codec;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod math;
pub mod prompt;
pub mod protocol;
pub mod store;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use inference::{evaluate, Aggregator, EvalResults, InferenceModel, PredictionReport, TextFeatures};
pub use prompt::{NetShape, OptimizerState, PromptBank, PromptNetParams, TextEncoderStub};
pub use protocol::{ClientUpdate, ProtocolConfig, RoundLog, RoundState, Stage};
pub use store::{
    generate_synthetic, load_store, partition_clients, save_store, ClientPartition, EmbeddingStore,
    SyntheticSpec,
};
