//! Synthetic search & recommendation workload: data, prompts, the toy
//! model, constrained decoding and ranking metrics.

pub mod beam;
pub mod data;
pub mod metrics;
pub mod model;
pub mod vocab;

pub use beam::{constrained_beam_search, exhaustive_ranking, IdScorer, Ranked};
pub use data::{generate_dataset, Dataset, DatasetConfig, EvalRecord, Interaction, ItemId, Task};
pub use metrics::{evaluate, hit_at_k, ndcg_at_k, EvalConfig, MetricsTable};
pub use model::{KvCache, ModelConfig, ToyModel, TrainSample};
pub use vocab::{PromptFormat, Vocab};
