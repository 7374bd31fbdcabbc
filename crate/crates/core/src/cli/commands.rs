use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::checkpoint::{peek_precision, Checkpoint, CheckpointKind};
use super::config::RunConfig;
use super::gradcheck::{parse_op, run_gradcheck, CheckLine};
use crate::autodiff::{Precision, Real};
use crate::error::{invalid, Error, Result};
use crate::eval::{
    csv_header, few_shot_probe, format_table, frozen_features, generate_dataset, linear_probe, median, run_ablation,
    AblationRow, Features, SyntheticDataset,
};
use crate::geometry::io::{read_cloud, write_text};
use crate::geometry::{sample_patches, PointCloud};
use crate::model::{ModelParams, ENCODER_ONLINE};
use crate::train::{init_params, StepMetrics, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.pcck";
pub const ENCODER_FILE: &str = "encoder.pcck";
pub const RUN_FILE: &str = "run.json";
pub const DUMP_FILE: &str = "nonfinite_dump.txt";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_TXT: &str = "ablation.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Result of a command that completed without an error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

/// Process exit status for an outcome or error.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::CheckFailed) => 1,
        Err(Error::NonFinite { .. }) => 3,
        Err(_) => 2,
    }
}

/// Upper bound for `--workers`.
pub fn max_workers() -> usize {
    std::thread::available_parallelism().map_or(1, usize::from)
}

fn check_workers(workers: usize) -> Result<usize> {
    if workers == 0 {
        return invalid("--workers must be at least 1");
    }
    Ok(workers.min(max_workers()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))
}

fn hash_line(hash: &str) -> String {
    format!("# config_hash={hash}")
}

/// Hash recorded in the first line of an artifact, if any.
pub fn read_hash_line(path: &Path) -> Result<Option<String>> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    Ok(first.trim_end().strip_prefix("# config_hash=").map(str::to_string))
}

fn write_run_file(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let doc = serde_json::json!({ "config_hash": cfg.hash(), "config": cfg });
    fs::write(dir.join(RUN_FILE), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct PretrainArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub resume: Option<PathBuf>,
    pub allow_config_mismatch: bool,
    /// Stop after this many steps in this invocation.
    pub max_steps: Option<u64>,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSummary {
    pub output_dir: PathBuf,
    pub steps_run: u64,
    pub final_step: u64,
    pub final_loss: Option<f64>,
    pub finished: bool,
}

/// Metrics file positioned for appending after `step` rows.
fn open_metrics(path: &Path, hash: &str, resume_step: Option<u64>) -> Result<File> {
    match resume_step {
        Some(step) if path.exists() => {
            if read_hash_line(path)?.as_deref() != Some(hash) {
                return invalid(format!("{} was written by a different config", path.display()));
            }
            let text = fs::read_to_string(path)?;
            let mut kept = String::new();
            for line in text.lines() {
                let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if row_step.is_none_or(|s| s < step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            fs::write(path, kept)?;
            Ok(OpenOptions::new().append(true).open(path)?)
        }
        _ => {
            let mut f = File::create(path)?;
            writeln!(f, "{}", hash_line(hash))?;
            writeln!(f, "{}", StepMetrics::CSV_HEADER)?;
            Ok(f)
        }
    }
}

fn pretrain_typed<T: Real>(cfg: &RunConfig, args: &PretrainArgs) -> Result<PretrainSummary> {
    let hash = cfg.hash();
    let json = cfg.canonical_json();
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let data = generate_dataset(&cfg.dataset, cfg.dataset.seed)?;

    let (params, state) = match &args.resume {
        Some(path) => {
            let bytes = read_file(path)?;
            if peek_precision(&bytes)? != T::PRECISION {
                return invalid("checkpoint precision differs from train.precision");
            }
            let ckpt = Checkpoint::<T>::decode(&bytes)?;
            if ckpt.config_hash != hash && !args.allow_config_mismatch {
                return invalid(format!(
                    "checkpoint config hash {} differs from {hash}; pass --allow-config-mismatch to load it anyway",
                    ckpt.config_hash
                ));
            }
            if ckpt.kind != CheckpointKind::Full {
                return invalid("cannot resume from an encoder-only export");
            }
            let params = ModelParams::from_groups(&cfg.model, ckpt.groups)?;
            (params, ckpt.state)
        }
        None => (init_params::<T>(&cfg.model, cfg.train.seed)?, None),
    };
    let resume_step = state.as_ref().map(|s| s.step);
    let mut trainer = Trainer::from_parts(cfg.train.clone(), cfg.views.clone(), params, state, data.train)?;
    write_run_file(&dir, cfg)?;
    let mut metrics = open_metrics(&dir.join(METRICS_FILE), &hash, resume_step)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let every = cfg.checkpoint_every;
    let start = trainer.state.step;

    let result = trainer.run(args.max_steps, |m, t| {
        writeln!(metrics, "{}", m.csv_row())?;
        if every > 0 && t.state.step % every == 0 {
            Checkpoint::full(&t.params, &t.state, &hash, &json).save(&ckpt_path)?;
        }
        Ok(())
    });
    metrics.flush()?;
    let trace = match result {
        Ok(t) => t,
        Err(e @ Error::NonFinite { .. }) => {
            fs::write(dir.join(DUMP_FILE), format!("{}\n{e}\n", hash_line(&hash)))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let ckpt = Checkpoint::full(&trainer.params, &trainer.state, &hash, &json);
    ckpt.save(&ckpt_path)?;
    ckpt.encoder_only().save(&dir.join(ENCODER_FILE))?;
    Ok(PretrainSummary {
        output_dir: dir,
        steps_run: trainer.state.step - start,
        final_step: trainer.state.step,
        final_loss: trace.last().map(|m| m.loss),
        finished: trainer.is_done(),
    })
}

/// `--config` when given, else the config embedded in a checkpoint, else the
/// desk config; overrides apply on top.
fn resolve_config(path: Option<&Path>, overrides: &[String], embedded: Option<&str>) -> Result<RunConfig> {
    match (path, embedded) {
        (None, Some(json)) => {
            let v: Value = serde_json::from_str(json).map_err(|e| Error::Format(format!("embedded config: {e}")))?;
            RunConfig::from_value(v, overrides)
        }
        _ => RunConfig::load(path, overrides),
    }
}

fn embedded_config(bytes: &[u8]) -> Result<String> {
    Ok(match peek_precision(bytes)? {
        Precision::F32 => Checkpoint::<f32>::decode(bytes)?.config_json,
        Precision::F64 => Checkpoint::<f64>::decode(bytes)?.config_json,
    })
}

/// Pretrain per the config; writes metrics, a full checkpoint and an
/// encoder-only export into `output_dir`.
pub fn cmd_pretrain(args: &PretrainArgs) -> Result<PretrainSummary> {
    check_workers(args.workers.max(1))?;
    let embedded = match (&args.resume, &args.config) {
        (Some(path), None) => Some(embedded_config(&read_file(path)?)?),
        _ => None,
    };
    let cfg = resolve_config(args.config.as_deref(), &args.overrides, embedded.as_deref())?;
    match cfg.train.precision {
        Precision::F32 => pretrain_typed::<f32>(&cfg, args),
        Precision::F64 => pretrain_typed::<f64>(&cfg, args),
    }
}

#[derive(Clone, Debug, Default)]
pub struct ProbeArgs {
    pub checkpoint: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    /// Probe the untrained encoder of the config instead of a checkpoint.
    pub random_init: bool,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSummary {
    pub accuracy: f64,
    pub few_shot: Vec<(usize, usize, f64, f64)>,
    pub output_dir: PathBuf,
}

fn probe_config(args: &ProbeArgs, embedded: Option<&str>) -> Result<RunConfig> {
    resolve_config(args.config.as_deref(), &args.overrides, embedded)
}

fn probe_typed<T: Real>(cfg: &RunConfig, params: &ModelParams<T>, out: &Path) -> Result<ProbeSummary> {
    let hash = cfg.hash();
    fs::create_dir_all(out)?;
    let data = generate_dataset(&cfg.dataset, cfg.dataset.seed)?;
    let (tr, te) = frozen_features(params, &data.train, &data.test, cfg.views.global_points)?;
    let d = params.config.dim;
    let ytr = SyntheticDataset::labels(&data.train);
    let yte = SyntheticDataset::labels(&data.test);
    let train = Features::new(tr.clone(), d, ytr.clone())?;
    let test = Features::new(te.clone(), d, yte.clone())?;
    let classes = data.classes.len();
    let result = linear_probe(&train, &test, classes)?;

    let mut csv = format!(
        "{}\nmetric,value\noverall_accuracy,{:.6}\n",
        hash_line(&hash),
        result.overall_accuracy
    );
    for (c, acc) in data.classes.iter().zip(&result.per_class_accuracy) {
        csv.push_str(&format!("class_accuracy.{},{acc:.6}\n", c.name()));
    }
    fs::write(out.join("probe.csv"), csv)?;
    let mut conf = format!(
        "{}\ntrue\\predicted,{}\n",
        hash_line(&hash),
        data.classes.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
    );
    for (c, row) in data.classes.iter().zip(&result.confusion) {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        conf.push_str(&format!("{},{}\n", c.name(), cells.join(",")));
    }
    fs::write(out.join("confusion.csv"), conf)?;

    let pooled = Features::new([tr, te].concat(), d, [ytr, yte].concat())?;
    let mut few = format!("{}\nway,shot,episodes,mean,std,std_error\n", hash_line(&hash));
    let mut few_shot = Vec::new();
    for &[way, shot] in &cfg.probe.few_shot {
        let r = few_shot_probe(&pooled, way, shot, cfg.probe.episodes, cfg.probe.seed)?;
        few.push_str(&format!(
            "{way},{shot},{},{:.6},{:.6},{:.6}\n",
            cfg.probe.episodes, r.mean, r.std, r.std_error
        ));
        few_shot.push((way, shot, r.mean, r.std));
    }
    fs::write(out.join("few_shot.csv"), few)?;
    Ok(ProbeSummary {
        accuracy: result.overall_accuracy,
        few_shot,
        output_dir: out.to_path_buf(),
    })
}

fn probe_checkpoint<T: Real>(args: &ProbeArgs, bytes: &[u8]) -> Result<ProbeSummary> {
    let ckpt = Checkpoint::<T>::decode(bytes)?;
    let cfg = probe_config(args, Some(&ckpt.config_json))?;
    let encoder = ckpt.encoder()?.clone();
    let mut params = init_params::<T>(&cfg.model, cfg.train.seed)?;
    let slot = &params.groups[ENCODER_ONLINE];
    let buffers_match = slot.buffers.len() == encoder.buffers.len()
        && slot
            .buffers
            .iter()
            .zip(&encoder.buffers)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !slot.same_layout(&encoder) || !buffers_match {
        return invalid("checkpoint encoder does not match model config");
    }
    params.groups[ENCODER_ONLINE] = encoder;
    let out = args.output_dir.clone().unwrap_or_else(|| cfg.output_dir.join("probe"));
    probe_typed(&cfg, &params, &out)
}

/// Linear and few-shot probes of a frozen encoder.
pub fn cmd_probe(args: &ProbeArgs) -> Result<ProbeSummary> {
    match (&args.checkpoint, args.random_init) {
        (Some(_), true) => invalid("--checkpoint and --random-init are exclusive"),
        (None, false) => invalid("probe needs --checkpoint or --random-init"),
        (None, true) => {
            let cfg = probe_config(args, None)?;
            let out = args
                .output_dir
                .clone()
                .unwrap_or_else(|| cfg.output_dir.join("probe_random"));
            match cfg.train.precision {
                Precision::F32 => probe_typed(&cfg, &init_params::<f32>(&cfg.model, cfg.train.seed)?, &out),
                Precision::F64 => probe_typed(&cfg, &init_params::<f64>(&cfg.model, cfg.train.seed)?, &out),
            }
        }
        (Some(path), false) => {
            let bytes = read_file(path)?;
            match peek_precision(&bytes)? {
                Precision::F32 => probe_checkpoint::<f32>(args, &bytes),
                Precision::F64 => probe_checkpoint::<f64>(args, &bytes),
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub workers: usize,
}

/// Median accuracy and spread per cell name, in first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<(String, f64, f64)> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.cell.as_str()) {
            names.push(&r.cell);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.cell == n).map(|r| r.accuracy).collect();
            let std: Vec<f64> = rows.iter().filter(|r| r.cell == n).map(|r| r.per_dim_std).collect();
            (n.to_string(), median(&acc), median(&std))
        })
        .collect()
}

/// Per-cell medians as aligned text.
pub fn format_summary(rows: &[AblationRow]) -> String {
    let summary = summarize(rows);
    let w = summary.iter().map(|s| s.0.len()).chain([4]).max().unwrap_or(4);
    let mut out = format!(
        "{:<w$}  {:>15}  {:>18}\n",
        "cell", "median_accuracy", "median_per_dim_std"
    );
    for (name, acc, std) in summary {
        out.push_str(&format!("{name:<w$}  {acc:>15.2}  {std:>18.6}\n"));
    }
    out
}

/// Run the ablation matrix, appending to an existing table of the same
/// config and skipping its finished cells.
pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let workers = check_workers(args.workers.max(1))?;
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    if cfg.ablation.cells.is_empty() || cfg.ablation.seeds.is_empty() {
        return invalid("ablation.cells and ablation.seeds must be non-empty");
    }
    let cells = cfg.ablation_cells()?;
    let hash = cfg.hash();
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    write_run_file(&dir, &cfg)?;
    let csv_path = dir.join(ABLATION_CSV);
    let mut previous = Vec::new();
    if csv_path.exists() {
        if read_hash_line(&csv_path)?.as_deref() != Some(hash.as_str()) {
            return invalid(format!("{} belongs to a different config", csv_path.display()));
        }
        let text = fs::read_to_string(&csv_path)?;
        for line in text.lines().skip(2).filter(|l| !l.trim().is_empty()) {
            previous.push(AblationRow::parse_csv(line)?);
        }
    } else {
        fs::write(&csv_path, format!("{}\n{}\n", hash_line(&hash), csv_header()))?;
    }
    let done: HashSet<String> = previous.iter().map(AblationRow::key).collect();
    let mut file = OpenOptions::new().append(true).open(&csv_path)?;
    let fresh = run_ablation(&cells, &done, workers, |row| {
        writeln!(file, "{}", row.csv_row())?;
        file.flush()?;
        Ok(())
    })?;
    // Fresh rows go through their CSV form so a resumed run reports the same numbers.
    let fresh = fresh
        .iter()
        .map(|r| AblationRow::parse_csv(&r.csv_row()))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<AblationRow> = previous.into_iter().chain(fresh).collect();
    let ordered: Vec<AblationRow> = cells
        .iter()
        .filter_map(|c| all.iter().find(|r| r.key() == c.key()).cloned())
        .collect();
    let txt = format!(
        "{}\n{}\n{}",
        hash_line(&hash),
        format_table(&ordered),
        format_summary(&ordered)
    );
    fs::write(dir.join(ABLATION_TXT), txt)?;
    Ok(ordered)
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckArgs {
    pub seed: u64,
    pub inject_fault: Option<String>,
    pub output: Option<PathBuf>,
}

/// Finite-difference check of every primitive and the full model.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(Outcome, Vec<CheckLine>)> {
    let fault = args.inject_fault.as_deref().map(parse_op).transpose()?;
    let lines = run_gradcheck(args.seed, fault)?;
    let failed: Vec<&CheckLine> = lines.iter().filter(|l| !l.passes()).collect();
    let mut report: String = lines.iter().map(|l| l.format() + "\n").collect();
    if failed.is_empty() {
        report.push_str("gradcheck: all checks passed\n");
    } else {
        let names: Vec<&str> = failed.iter().map(|l| l.name.as_str()).collect();
        report.push_str(&format!("gradcheck: FAILED {}\n", names.join(" ")));
    }
    if let Some(p) = &args.output {
        fs::write(p, &report)?;
    }
    print!("{report}");
    let outcome = if failed.is_empty() {
        Outcome::Success
    } else {
        Outcome::CheckFailed
    };
    Ok((outcome, lines))
}

#[derive(Clone, Debug, Default)]
pub struct SampleArgs {
    pub input: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEntry {
    pub file: String,
    pub kernel_index: usize,
    pub scale: u32,
    pub points: usize,
}

/// Sample patches of one cloud and write each as a text cloud file.
pub fn cmd_sample(args: &SampleArgs) -> Result<Vec<PatchEntry>> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let cloud = read_cloud(&args.input)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", args.input.display())))?;
    let sampler = &cfg.views.sampler;
    sampler.validate(cloud.len())?;
    let patches = sample_patches(&cloud, sampler, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    let hash = cfg.hash();
    let dir = args
        .output_dir
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("patches"));
    fs::create_dir_all(&dir)?;
    let mut manifest = format!("{}\nfile,kernel_index,scale,points\n", hash_line(&hash));
    let mut entries = Vec::new();
    for (i, pts) in patches.patches.iter().enumerate() {
        let (kernel, scale) = (patches.kernel_indices[i], patches.scale_tags[i]);
        let file = format!("patch_s{scale}_{i:03}.txt");
        let header = vec![
            format!("config_hash={hash}"),
            format!("kernel_index={kernel} scale={scale}"),
        ];
        write_text(&dir.join(&file), &PointCloud::new(pts.clone())?, &header)?;
        manifest.push_str(&format!("{file},{kernel},{scale},{}\n", pts.len()));
        entries.push(PatchEntry {
            file,
            kernel_index: kernel,
            scale,
            points: pts.len(),
        });
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(entries)
}
