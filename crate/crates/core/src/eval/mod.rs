//! Synthetic shapes, frozen-feature probes and the ablation harness.

mod ablation;
mod dataset;
mod features;
mod probe;

pub use ablation::{
    csv_header, embedding_spread, format_table, median, probe_params, run_ablation, run_experiment, AblationCell,
    AblationRow, CellOutcome, Experiment, ABLATION_COLUMNS, SPREAD_CLOUDS,
};
pub use dataset::{
    generate_dataset, sample_shape, DatasetConfig, ShapeClass, SyntheticDataset, CONE_RADIUS, CYLINDER_RADIUS,
    HOLE_RADIUS, TORUS_MAJOR, TORUS_MINOR,
};
pub use features::{calibrated_encoder, encoder_features, frozen_features, probe_input, CALIBRATION_CLOUDS};
pub use probe::{
    evaluate, few_shot_probe, linear_probe, Features, FewShotResult, ProbeResult, SoftmaxProbe, PROBE_GRAD_TOL,
    PROBE_LAMBDA, PROBE_MAX_ITERS,
};
