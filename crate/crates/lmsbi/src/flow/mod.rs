//! Conditional density estimation with a masked autoregressive flow.

pub mod checkpoint;
pub mod made;
pub mod maf;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, ConditioningSection, EmbeddingSection};
pub use made::{MadeLayer, ALPHA_CLAMP};
pub use maf::{FlowConfig, MafGradients, MafStack, Standardizer, LN_2PI};
pub use optim::Adam;
pub use train::{train, EpochRecord, TrainConfig, TrainLog};
