//! Stage-by-stage experiment runner and presets.
//!
//! Every stage writes into `<run-dir>/<preset>/<stage>/`, clearing it first, and finishes
//! with a `summary.txt` listing its inputs and outputs.

mod config;
mod stages;

pub use config::{
    Binding, CorpusSpec, Experiment, ExperimentConfig, FinetuneCorpus, KEYS, PRESETS,
};
pub use stages::{
    binding_path, run_preset, run_stage, stage_dir, PresetReport, Stage, StageSummary, SUMMARY_FILE,
};
