//! Optimizers, checkpoints, autoencoder pretraining and the adversarial
//! segmenter training loop.

mod adam;
mod cache;
mod checkpoint;
mod config;
mod moves;
mod pretrain;
mod run;

pub use adam::{Adam, AdamConfig};
pub use cache::FeatureCache;
pub use checkpoint::{Checkpoint, CheckpointHeader, RngState, TensorEntry, FORMAT_VERSION, MAGIC};
pub use config::{
    DiscInput, MoveConfig, OptimConfig, PathsConfig, PretrainConfig, SupervisedConfig, TrainConfig,
};
pub use moves::{
    load_segmenter, predict_masks, IterLog, MoveTrainer, SupervisedTrainer, MOVE_KIND, SUPERVISED_KIND,
};
pub use pretrain::{
    load_mae, mae_checkpoint, random_token_split, reconstruction_mse, sparse_reconstruct, validation_masks,
    MaePretrainer, MAE_KIND,
};
pub use run::{
    load_pipeline, run_move, run_pretrain, run_supervised, CsvLog, MoveSummary, PretrainSummary,
    SupervisedSummary, VAL_CSV_HEADER,
};
