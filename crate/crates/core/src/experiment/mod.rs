//! Config parsing, single runs, sweeps and artifact emission.

pub mod config;
pub mod run;
pub mod summary;
pub mod sweep;

pub use config::{parse_config, AdaptiveConfig, ExperimentConfig, FixedConfig, PolicyConfig};
pub use run::{execute, run_experiment, write_artifacts, RunArtifacts};
pub use summary::{read_trace, summarize, summarize_dir, write_trace, Probe, Summary};
pub use sweep::{run_sweep, tabulate, Cell, SweepRow, SweepTable};
