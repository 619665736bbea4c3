//! Configuration, datasets, artifacts and the experiment commands behind
//! the `afan` binary.

mod commands;
mod config;
mod data;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_landscape, cmd_train, prepare_dataset, train_run, AblationRow, AblationTable, CellRun,
    EvalReport, LandscapeEntry, RobustPoint, RunResult, INCOMPLETE_MARKER,
};
pub use config::{
    resolve_output, AblateConfig, AblationCell, DataConfig, DataSource, EvalConfig, ExperimentConfig, KvConfig,
    LandscapeConfig, OUTPUT_ROOT_ENV,
};
pub use data::{
    gen_synthetic, gen_synthetic_with, load_external, parse_csv, parse_raw_gray, write_csv, write_raw_gray, Dataset,
    ExternalFormat, Split, SyntheticKind, SyntheticSpec, RAW_GRAY_MAGIC,
};
