use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{generate_dataset, DatasetConfig, SyntheticDataset};
use super::features::frozen_features;
use super::probe::{linear_probe, Features, ProbeResult};
use crate::autodiff::{Precision, Real};
use crate::error::{invalid, Error, Result};
use crate::geometry::{KernelSelection, SamplingMethod};
use crate::model::{
    online_embeddings, prepare_views, BnMode, FusionVariant, MergeMode, ModelConfig, ModelParams, MomentumBranch,
    ViewConfig,
};
use crate::train::{collapse_metrics, mix, TrainConfig, Trainer};

/// Clouds whose embeddings feed the collapse diagnostics.
pub const SPREAD_CLOUDS: usize = 32;
const SPREAD_STREAM: u64 = 0x5350_5244;

/// One fully specified pretrain-and-probe run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub views: ViewConfig,
    pub dataset: DatasetConfig,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.dataset.validate()?;
        self.views.validate(self.dataset.points)
    }
}

/// What a finished cell reports.
#[derive(Clone, Debug, PartialEq)]
pub struct CellOutcome {
    pub probe: ProbeResult,
    /// Mean per-dimension std of normalized online embeddings (eval mode).
    pub per_dim_std: f64,
    pub mean_cosine: f64,
    pub final_loss: f64,
    pub steps: u64,
}

/// Embedding spread of the online branch on held-out clouds.
pub fn embedding_spread<T: Real>(
    params: &ModelParams<T>,
    views: &ViewConfig,
    clouds: &[crate::geometry::PointCloud],
    seed: u64,
) -> Result<(f64, f64)> {
    let take = clouds.len().min(SPREAD_CLOUDS);
    let pairs = clouds[..take]
        .iter()
        .enumerate()
        .map(|(i, c)| {
            prepare_views(
                c,
                views,
                &mut ChaCha8Rng::seed_from_u64(mix(seed, SPREAD_STREAM, i as u64)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let z: Vec<f64> = online_embeddings(params, &pairs, BnMode::Eval)?
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let m = collapse_metrics(&z, params.config.dim)?;
    Ok((m.per_dim_std, m.mean_pairwise_cosine))
}

/// Linear probe of the frozen online encoder on a generated dataset.
pub fn probe_params<T: Real>(params: &ModelParams<T>, data: &SyntheticDataset, points: usize) -> Result<ProbeResult> {
    let (tr, te) = frozen_features(params, &data.train, &data.test, points)?;
    let d = params.config.dim;
    let train = Features::new(tr, d, SyntheticDataset::labels(&data.train))?;
    let test = Features::new(te, d, SyntheticDataset::labels(&data.test))?;
    linear_probe(&train, &test, data.classes.len())
}

fn run_typed<T: Real>(exp: &Experiment, pretrain: bool) -> Result<CellOutcome> {
    let data = generate_dataset(&exp.dataset, exp.dataset.seed)?;
    let mut trainer = Trainer::<T>::new(exp.train.clone(), &exp.model, exp.views.clone(), data.train.clone())?;
    let mut final_loss = f64::NAN;
    if pretrain {
        let trace = trainer.run(None, |_, _| Ok(()))?;
        final_loss = trace.last().map_or(f64::NAN, |m| m.loss);
    }
    let probe = probe_params(&trainer.params, &data, exp.views.global_points)?;
    let (per_dim_std, mean_cosine) = embedding_spread(&trainer.params, &exp.views, &data.test, exp.train.seed)?;
    Ok(CellOutcome {
        probe,
        per_dim_std,
        mean_cosine,
        final_loss,
        steps: trainer.state.step,
    })
}

/// Pretrain per `exp` and probe the frozen online encoder. With
/// `pretrain = false` the freshly initialized encoder is probed instead.
pub fn run_experiment(exp: &Experiment, pretrain: bool) -> Result<CellOutcome> {
    exp.validate()?;
    match exp.train.precision {
        Precision::F32 => run_typed::<f32>(exp, pretrain),
        Precision::F64 => run_typed::<f64>(exp, pretrain),
    }
}

/// A named configuration at one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub name: String,
    pub seed: u64,
    pub experiment: Experiment,
}

impl AblationCell {
    /// Identifier used to skip finished cells on resume.
    pub fn key(&self) -> String {
        format!("{}@{}", self.name, self.seed)
    }
}

/// Column headers, named after the ablation tables they mirror.
pub const ABLATION_COLUMNS: [&str; 13] = [
    "cell",
    "seed",
    "Sub-branch",
    "Momentum Updated Encoder Branch",
    "Sub-branch Merge",
    "Local-Global Merge",
    "Predictor",
    "Patch Sampling Method",
    "Kernel Points for KNN",
    "Accuracy",
    "per_dim_std",
    "mean_cosine",
    "steps",
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub momentum_branch: String,
    pub sub_branch_merge: String,
    pub local_global_merge: String,
    pub predictor: String,
    pub sampling_method: String,
    pub kernel_points: String,
    /// Linear-probe accuracy in percent.
    pub accuracy: f64,
    pub per_dim_std: f64,
    pub mean_cosine: f64,
    pub steps: u64,
}

fn momentum_label(m: MomentumBranch) -> &'static str {
    match m {
        MomentumBranch::TargetGlobal => "Target global",
        MomentumBranch::TargetPatch => "Target patch",
        MomentumBranch::TargetBoth => "Target both",
        MomentumBranch::None => "None",
    }
}

fn merge_label(m: MergeMode) -> &'static str {
    match m {
        MergeMode::Aligner => "Aligner",
        MergeMode::Concat => "Concat.",
        MergeMode::None => "-",
    }
}

fn fusion_label(f: FusionVariant) -> &'static str {
    match f {
        FusionVariant::Classical => "Classical CA",
        FusionVariant::Offset => "Offset CA",
        FusionVariant::ConcatBaseline => "Concat.",
    }
}

fn sampling_labels(views: &ViewConfig) -> (String, String) {
    let s = &views.sampler;
    if !s.method.is_knn() {
        return (s.method.label().to_string(), "-".to_string());
    }
    let scales = s.scales.iter().map(u32::to_string).collect::<Vec<_>>().join(", ");
    let method = match s.method {
        SamplingMethod::KnnDirect => format!("Direct KNN scale {scales}"),
        _ => format!("KNN scale {scales}"),
    };
    let kernel = match s.kernel_selection {
        KernelSelection::Fps => "FPS",
        KernelSelection::Random => "random",
    };
    (method, kernel.to_string())
}

impl AblationRow {
    pub fn new(cell: &AblationCell, outcome: &CellOutcome) -> Self {
        let exp = &cell.experiment;
        let (sampling_method, kernel_points) = sampling_labels(&exp.views);
        AblationRow {
            cell: cell.name.clone(),
            seed: cell.seed,
            momentum_branch: momentum_label(exp.model.momentum_branch).into(),
            sub_branch_merge: merge_label(exp.model.merge_mode).into(),
            local_global_merge: fusion_label(exp.model.fusion).into(),
            predictor: if exp.model.use_predictor { "yes" } else { "-" }.into(),
            sampling_method,
            kernel_points,
            accuracy: 100.0 * outcome.probe.overall_accuracy,
            per_dim_std: outcome.per_dim_std,
            mean_cosine: outcome.mean_cosine,
            steps: outcome.steps,
        }
    }

    pub fn key(&self) -> String {
        format!("{}@{}", self.cell, self.seed)
    }

    /// Values in [`ABLATION_COLUMNS`] order.
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.cell.clone(),
            self.seed.to_string(),
            "yes".into(),
            self.momentum_branch.clone(),
            self.sub_branch_merge.clone(),
            self.local_global_merge.clone(),
            self.predictor.clone(),
            self.sampling_method.clone(),
            self.kernel_points.clone(),
            format!("{:.2}", self.accuracy),
            format!("{:.6}", self.per_dim_std),
            format!("{:.6}", self.mean_cosine),
            self.steps.to_string(),
        ]
    }

    pub fn csv_row(&self) -> String {
        self.fields().iter().map(|f| csv_quote(f)).collect::<Vec<_>>().join(",")
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f = split_csv(line)?;
        if f.len() != ABLATION_COLUMNS.len() {
            return Err(Error::Format(format!("ablation row has {} fields: {line}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")));
        let int = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::Format(format!("bad integer {s:?}")))
        };
        Ok(AblationRow {
            cell: f[0].clone(),
            seed: int(&f[1])?,
            momentum_branch: f[3].clone(),
            sub_branch_merge: f[4].clone(),
            local_global_merge: f[5].clone(),
            predictor: f[6].clone(),
            sampling_method: f[7].clone(),
            kernel_points: f[8].clone(),
            accuracy: num(&f[9])?,
            per_dim_std: num(&f[10])?,
            mean_cosine: num(&f[11])?,
            steps: int(&f[12])?,
        })
    }
}

fn csv_quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv(line: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', true) => quoted = false,
            ('"', false) if cur.is_empty() => quoted = true,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    if quoted {
        return Err(Error::Format(format!("unterminated quote in {line:?}")));
    }
    out.push(cur);
    Ok(out)
}

pub fn csv_header() -> String {
    ABLATION_COLUMNS
        .iter()
        .map(|c| csv_quote(c))
        .collect::<Vec<_>>()
        .join(",")
}

/// Aligned plain-text rendering of `rows`.
pub fn format_table(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows.iter().map(AblationRow::fields).collect();
    let widths: Vec<usize> = (0..ABLATION_COLUMNS.len())
        .map(|j| {
            body.iter()
                .map(|r| r[j].len())
                .chain([ABLATION_COLUMNS[j].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(ABLATION_COLUMNS.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &body {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Run every cell whose key is not in `done`, in order, on up to `workers`
/// threads. `on_row` sees each new row as soon as its cell finishes.
pub fn run_ablation(
    cells: &[AblationCell],
    done: &HashSet<String>,
    workers: usize,
    mut on_row: impl FnMut(&AblationRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    if workers == 0 {
        return invalid("workers must be at least 1");
    }
    for c in cells {
        c.experiment.validate()?;
    }
    let pending: Vec<&AblationCell> = cells.iter().filter(|c| !done.contains(&c.key())).collect();
    let mut rows = Vec::with_capacity(pending.len());
    for chunk in pending.chunks(workers) {
        let results: Vec<Result<CellOutcome>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|c| s.spawn(move || run_experiment(&c.experiment, true)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| invalid("ablation worker panicked")))
                .collect()
        });
        for (cell, res) in chunk.iter().zip(results) {
            let row = AblationRow::new(cell, &res?);
            on_row(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> AblationRow {
        AblationRow {
            cell: "merge, none".into(),
            seed: 2,
            momentum_branch: "Target global".into(),
            sub_branch_merge: "-".into(),
            local_global_merge: "Classical CA".into(),
            predictor: "yes".into(),
            sampling_method: "KNN scale 0, 1, 2".into(),
            kernel_points: "FPS".into(),
            accuracy: 87.5,
            per_dim_std: 0.061234,
            mean_cosine: 0.5,
            steps: 510,
        }
    }

    #[test]
    fn csv_round_trip() {
        let r = row();
        assert_eq!(AblationRow::parse_csv(&r.csv_row()).unwrap(), r);
        assert_eq!(split_csv(&csv_header()).unwrap(), ABLATION_COLUMNS.to_vec());
    }

    #[test]
    fn table_is_aligned() {
        let t = format_table(&[row(), row()]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("cell"));
        assert!(lines[1].chars().all(|c| c == '-'));
        assert_eq!(lines[2], lines[3]);
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
