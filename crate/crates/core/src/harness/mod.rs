//! Data loading, synthetic tasks, checkpoints, training runs and sweeps.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod run;
pub mod sweep;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, Manifest, TrainingContext};
pub use config::KvConfig;
pub use data::{
    encode_records, load_generation_outputs, load_jsonl, make_synthetic_task, split_hash, write_jsonl, DatasetRecord, LoadReport, SyntheticTask,
    TaskKind, TaskSpec,
};
pub use run::{train_run, RunOptions, RunSummary};
pub use sweep::{
    pareto_front, read_sweep_csv, run_sweep, write_plots, write_sweep_csv, LengthMode, SweepGrid, SweepOptions,
    SweepPoint, SweepRecord,
};
