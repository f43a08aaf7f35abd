pub mod backbone;
pub mod contradiction;
pub mod corpus;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod gradsuite;
pub mod layers;
pub mod optim;
pub mod promptvq;
pub mod toylm;
pub mod trainer;

pub use error::{CocoError, Result};
pub use corpus::{Batch, EvalSplit, InteractionDataset, ItemMeta, SynthConfig, UserSequence};
pub use diffcore::{Gradients, Graph, ParamId, ParameterRegistry, Tensor, Var};
pub use evalkit::{EvalOptions, MetricsReport};
pub use promptvq::{PromptCodebook, PromptSelection};
pub use trainer::{CocoModel, Decisions, TrainConfig, TrainState, Variant};
