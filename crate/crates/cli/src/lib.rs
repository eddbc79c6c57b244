//! Library surface of the `cmn` command-line tool, exposed so integration
//! tests drive the same code paths as the binary.

pub mod commands;
pub mod runconfig;

pub use commands::{
    cmd_evaluate, cmd_export_attn, cmd_gen_corpus, cmd_generate, cmd_param_count, cmd_sweep,
    cmd_train, GenerationRecord, MetricsReport, SweepAxis, TrainOutcome,
};
pub use runconfig::RunConfig;

/// Process exit code for an error, per the documented taxonomy:
/// 2 usage/config, 3 state mismatch, 4 i/o, 1 anything else.
pub fn exit_code(err: &cmn_core::Error) -> i32 {
    use cmn_core::Error::*;
    match err {
        Argument(_) | Dimension { .. } | Index { .. } => 2,
        Consistency(_) => 3,
        Io(_) | Format(_) => 4,
        Training(_) => 1,
    }
}
