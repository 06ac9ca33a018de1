//! Visually guided acoustic highlighting network, its training objective,
//! trainer, inference and checkpoint format.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod infer;
pub mod loss;
pub mod net;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ContextInput, ModelConfig, Preset};
pub use error::{Error, Result};
pub use net::{build_model, Model, Trace};
pub use train::{train, Example, TrainConfig, Trainer};
