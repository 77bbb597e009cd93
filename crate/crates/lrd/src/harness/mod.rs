//! Synthetic tasks, run configuration, training, and the benchmark /
//! ablation / sweep runners behind the `lrd` CLI.

pub mod config;
pub mod runner;
pub mod task;

pub use config::RunConfig;
pub use runner::{
    ablation_methods, bench_results_to_csv, emit_kl_dynamics, run_ablations, run_benchmark,
    run_sweeps, sweep_rows_to_csv, train_model, truncate_at_eos, BenchResult, KlDynamics, Method,
    MethodSpec, SweepRow, ALIGNED_CSV_HEADER, BENCH_CSV_HEADER, CONVERGENCE_CSV_HEADER,
    RF_GRID, SWEEP_CSV_HEADER, TOP_P_GRID,
};
pub use task::{generate_task, SyntheticTask, TaskKind};
