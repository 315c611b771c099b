//! Config-driven training runs with per-epoch layer selection, timing of
//! the backward pass, and CSV/JSON result files.

mod config;
mod output;
mod runner;

pub use config::{
    apply_overrides, parse_key_values, parse_seeds, AnalysisConfig, ArchConfig, DataConfig,
    ExperimentConfig, InitConfig, PolicyConfig,
};
pub use output::{
    emit_bench, emit_frequency, emit_profiles, emit_reinit, emit_results, epochs_csv, mean_stderr,
    reinit_csv, summary_json,
};
pub use runner::{
    backward_timings, run_bench, run_experiment, run_frequency_experiment, run_profile_experiment,
    run_reinit_experiment, seed_stream, shuffle_seed, stochastic_gradient, train_seed, BenchResult,
    EpochHook, EpochRecord, Experiment, FrequencyResult, ProfileResult, ReinitResult, ReinitRow,
    RunRecord, StopLayerTiming,
};
