//! Desk-scale experiments: synthetic data, a small segmentation network,
//! training, checkpoints and ablations.

pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use data::{generate_dataset, load_dataset, save_dataset, DataConfig, KindMix, SynthKind, SynthSample};
pub use experiment::{ablation_suite, run_on, split_dataset, AblationTable, RunConfig, RunOutcome};
pub use model::{BlockKind, MiniNet, NetConfig};
pub use train::{evaluate, train, Adam, AdamConfig, EvalReport, Model, TrainConfig, TrainReport};
