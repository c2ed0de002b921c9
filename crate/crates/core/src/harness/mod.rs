//! Synthetic worlds, the two-phase training protocol, ablations, checkpoints
//! and the command-line front end.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod report;
pub mod train;

pub use config::{BankConfig, DataConfig, ExperimentConfig};
pub use data::{generate_dataset, Split, SyntheticDataset};
pub use train::{
    build_model, evaluate_split, pretrain_phase, train, train_full, tune_phase, ChecksumPair, Pretrained, RunReport,
    Timing, TrainedRun,
};
pub use ablation::{run_ablation, run_grid, run_sweep, CellSummary, GridResult, RunRecord, SweepAxis};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use report::CsvTable;
