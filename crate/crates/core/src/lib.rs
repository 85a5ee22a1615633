//! Length-aware mixup and center-loss training for utterance-level emotion
//! classification on variable-length frame sequences.

pub mod augment;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod mixup;
pub mod model;
pub mod optim;
pub mod train;

pub use data::{EmotionSet, SoftLabel, SpeechSample, SynthSpec};
pub use error::{Error, Result};
pub use mixup::{MixupMode, MixupPolicy};
pub use model::{ModelConfig, Params};
pub use train::{TrainConfig, TrainReport};
