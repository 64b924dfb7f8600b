//! Experiment plumbing: synthetic graphs, splits, configs, checkpoints and
//! the end-to-end pipeline.

mod checkpoint;
mod config;
mod experiment;
mod split;
mod synth;

pub use checkpoint::{Checkpoint, CheckpointKind, MAGIC, VERSION};
pub use config::{apply_override, DataConfig, DataSource, ExperimentConfig, SweepConfig};
pub use experiment::{finetune_best_lr, pretrain_stage, run_experiment, stage_data, Report, ResultRow, StageData};
pub use split::{make_splits, split_graph_set, DatasetSplit, Setting, SplitConfig, SplitGraphs};
pub use synth::{block_means, gen_sbm, gen_transfer_pair, FeatureModel, SbmConfig, TransferPair};
