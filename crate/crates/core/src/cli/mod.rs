//! Run configuration, checkpoints and the command implementations behind
//! the `pocca` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod gradcheck;

pub use checkpoint::{peek_precision, Checkpoint, CheckpointKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use commands::{
    cmd_ablate, cmd_gradcheck, cmd_pretrain, cmd_probe, cmd_sample, exit_code, format_summary, max_workers,
    read_hash_line, summarize, AblateArgs, GradcheckArgs, Outcome, PatchEntry, PretrainArgs, PretrainSummary,
    ProbeArgs, ProbeSummary, SampleArgs,
};
pub use config::{
    desk_cells, hex_digest, parse_override, set_path, AblationSettings, CellSpec, ProbeSettings, RunConfig,
};
pub use gradcheck::{check_model, parse_op, run_gradcheck, CheckLine};
