use crate::autodiff::Real;
use crate::error::Result;
use crate::geometry::{fps, Point3, PointCloud};
use crate::model::{encode_batch, BnMode, ModelParams, ENCODER_ONLINE};

/// Clouds used to estimate batch-norm statistics before probing.
pub const CALIBRATION_CLOUDS: usize = 64;
const CHUNK: usize = 32;

/// Deterministic FPS subsample starting from point 0.
pub fn probe_input(cloud: &PointCloud, points: usize) -> Result<Vec<Point3>> {
    let m = points.min(cloud.len());
    Ok(cloud.select(&fps(cloud, m, 0)?).points().to_vec())
}

/// Online encoder with its batch-norm running statistics replaced by the
/// exact batch statistics of `calibration` (at most [`CALIBRATION_CLOUDS`]).
pub fn calibrated_encoder<T: Real>(params: &ModelParams<T>, calibration: &[Vec<Point3>]) -> Result<ModelParams<T>> {
    let mut out = params.clone();
    let take = calibration.len().min(CALIBRATION_CLOUDS);
    let refs: Vec<&[Point3]> = calibration[..take].iter().map(Vec::as_slice).collect();
    let (_, records) = encode_batch(params, ENCODER_ONLINE, &refs, BnMode::Train)?;
    let group = &mut out.groups[ENCODER_ONLINE];
    for r in records {
        group
            .buffer_mut(&format!("{}.running_mean", r.layer))
            .expect("batch-norm buffer")
            .value = r.stats.mean;
        group
            .buffer_mut(&format!("{}.running_var", r.layer))
            .expect("batch-norm buffer")
            .value = r.stats.var;
    }
    Ok(out)
}

/// Eval-mode online-encoder features, row-major `[n, d]`.
pub fn encoder_features<T: Real>(params: &ModelParams<T>, inputs: &[Vec<Point3>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len() * params.config.dim);
    for chunk in inputs.chunks(CHUNK) {
        let refs: Vec<&[Point3]> = chunk.iter().map(Vec::as_slice).collect();
        let (f, _) = encode_batch(params, ENCODER_ONLINE, &refs, BnMode::Eval)?;
        out.extend(f.iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

/// Frozen features for a train and a test split: FPS subsample, calibrate
/// batch norm on the train split, then encode both in eval mode.
pub fn frozen_features<T: Real>(
    params: &ModelParams<T>,
    train: &[PointCloud],
    test: &[PointCloud],
    points: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let tr = train
        .iter()
        .map(|c| probe_input(c, points))
        .collect::<Result<Vec<_>>>()?;
    let te = test
        .iter()
        .map(|c| probe_input(c, points))
        .collect::<Result<Vec<_>>>()?;
    let enc = calibrated_encoder(params, &tr)?;
    Ok((encoder_features(&enc, &tr)?, encoder_features(&enc, &te)?))
}
