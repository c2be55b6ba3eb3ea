//! Data supply and the experiment engine: datasets, exit logs, policy
//! evaluation and sweeps.

mod data;
mod eval;
mod exitlog;

pub use data::{
    gen_synthetic, load_csv_dataset, read_csv_dataset, save_csv_dataset, write_csv_dataset, Dataset, Sample,
    SyntheticKind,
};
pub use eval::{
    compare_policies, early_exit_inference, evaluate, mean_pairwise_disagreement, outcomes, parse_grid,
    per_layer_accuracy, sweep, write_histogram_csv, write_report_csv, EarlyExitRun, PolicyGrid, SweepPoint,
    HISTOGRAM_HEADER, REPORT_HEADER,
};
pub use exitlog::{dump_exitlog, load_exitlog, read_exitlog, write_exitlog, ExitLog, EXITLOG_SUM_TOLERANCE};
