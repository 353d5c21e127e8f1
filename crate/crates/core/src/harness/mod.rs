//! Synthetic tasks, continual-request orchestration, metrics and reports.

mod config;
mod report;
mod run;
mod tasks;
mod verify;

pub use config::{Ablations, BetaMode, CompensatorSection, ExperimentConfig, ModelSection, SweepSection, ABLATION_NAMES, DESK_CONFIG};
pub use report::{
    adapter_file, detector_file, emit_report, emit_sweeps, load_model, load_run, read_records, training_log_file, write_run, LoadedRun,
    ReportFiles, BASE_FILE, CONFIG_FILE, MODEL_FILE, RECORDS_FILE, TABLE_FILE,
};
pub use run::{
    beta_sweep, make_suite, pretrain_base, resolve_betas, run_continual, run_continual_with, sub_seed, BaseMetrics, BetaTrace,
    CompositeSummary, Metrics, RecordLog, RequestRecord, RunOutput, SweepCurve, SweepPoint, SweepShape,
};
pub use tasks::{gen_tasks, DomainRole, TaskConfig, TaskSuite};
pub use verify::{gradient_suite, taylor_suite, theorem1_suite, theorem2_suite, verify_all, SuiteReport, GRADIENT_LOSSES};
