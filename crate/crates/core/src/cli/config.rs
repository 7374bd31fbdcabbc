use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autodiff::Precision;
use crate::error::{invalid, Error, Result};
use crate::eval::{AblationCell, DatasetConfig, Experiment};
use crate::geometry::{AugmentParams, RotationMode, SamplerConfig};
use crate::model::{ModelConfig, ViewConfig};
use crate::train::TrainConfig;

/// Frozen-encoder evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    /// `[way, shot]` episode specs.
    pub few_shot: Vec<[usize; 2]>,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            few_shot: vec![[5, 10], [5, 20]],
            episodes: 10,
            seed: 0,
        }
    }
}

/// One named ablation configuration: dotted-path overrides of the base run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    /// Every cell runs once per seed; the seed replaces both `train.seed`
    /// and `dataset.seed`.
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSpec>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            seeds: vec![0, 1, 2],
            cells: Vec::new(),
        }
    }
}

/// Top-level fields left out of the config hash.
pub const LOGISTICS_FIELDS: [&str; 2] = ["output_dir", "checkpoint_every"];

/// Everything a command needs, serialized as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub views: ViewConfig,
    pub dataset: DatasetConfig,
    pub probe: ProbeSettings,
    pub ablation: AblationSettings,
    pub output_dir: PathBuf,
    /// Write the full checkpoint every this many steps; 0 writes only at the end.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            views: ViewConfig::default(),
            dataset: DatasetConfig::default(),
            probe: ProbeSettings::default(),
            ablation: AblationSettings::default(),
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    /// Small model and dataset that pretrain in seconds on one core.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig {
                dim: 64,
                encoder_hidden: [32, 64],
                heads: 4,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                lr: 2e-3,
                epochs: 34,
                batch_size: 8,
                precision: Precision::F32,
                ..TrainConfig::default()
            },
            views: ViewConfig {
                augment: AugmentParams {
                    rotation: RotationMode::GravityAxis,
                    ..AugmentParams::default()
                },
                sampler: SamplerConfig {
                    n_patches_per_scale: 4,
                    patch_size: 16,
                    ..SamplerConfig::default()
                },
                global_points: 128,
            },
            dataset: DatasetConfig {
                points: 256,
                ..DatasetConfig::default()
            },
            ablation: AblationSettings {
                seeds: vec![0, 1, 2],
                cells: desk_cells(),
            },
            output_dir: PathBuf::from("runs/desk"),
            ..RunConfig::default()
        }
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            model: self.model.clone(),
            train: self.train.clone(),
            views: self.views.clone(),
            dataset: self.dataset.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment().validate()?;
        if self.probe.episodes == 0 {
            return invalid("probe.episodes must be positive");
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.ablation.cells {
            if c.name.is_empty() || !names.insert(c.name.as_str()) {
                return invalid(format!(
                    "ablation cell names must be unique and non-empty: {:?}",
                    c.name
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))
    }

    /// Read `path` (or start from [`RunConfig::desk`] when `None`), apply
    /// `key=value` overrides and validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?
            }
            None => serde_json::to_value(RunConfig::desk())?,
        };
        Self::from_value(value, overrides)
    }

    /// Apply overrides to a JSON document, then deserialize and validate.
    pub fn from_value(mut value: Value, overrides: &[String]) -> Result<Self> {
        if let (Value::Object(m), Value::Object(defaults)) = (&mut value, serde_json::to_value(RunConfig::default())?) {
            for (k, v) in defaults {
                m.entry(k).or_insert(v);
            }
        }
        for o in overrides {
            let (key, raw) = parse_override(o)?;
            set_path(&mut value, &key, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical JSON: sorted keys, no whitespace, without the fields that
    /// only say where and how often to write.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            for k in LOGISTICS_FIELDS {
                m.remove(k);
            }
        }
        serde_json::to_string(&v).expect("config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::canonical_json`].
    pub fn hash(&self) -> String {
        hex_digest(self.canonical_json().as_bytes())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Expand the ablation matrix into one cell per (spec, seed).
    pub fn ablation_cells(&self) -> Result<Vec<AblationCell>> {
        let base = serde_json::to_value(self.experiment())?;
        let mut out = Vec::new();
        for spec in &self.ablation.cells {
            for &seed in &self.ablation.seeds {
                let mut v = base.clone();
                for (k, val) in &spec.overrides {
                    set_path(&mut v, k, val.clone())
                        .map_err(|e| Error::InvalidInput(format!("ablation cell {}: {e}", spec.name)))?;
                }
                set_path(&mut v, "train.seed", Value::from(seed))?;
                set_path(&mut v, "dataset.seed", Value::from(seed))?;
                let experiment: Experiment = serde_json::from_value(v)
                    .map_err(|e| Error::InvalidInput(format!("ablation cell {}: {e}", spec.name)))?;
                experiment.validate()?;
                out.push(AblationCell {
                    name: spec.name.clone(),
                    seed,
                    experiment,
                });
            }
        }
        Ok(out)
    }
}

fn cell(name: &str, overrides: &[(&str, Value)]) -> CellSpec {
    CellSpec {
        name: name.to_string(),
        overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    }
}

/// The base configuration followed by one-factor variations of it.
pub fn desk_cells() -> Vec<CellSpec> {
    vec![
        cell("base", &[]),
        cell("no merge", &[("model.merge_mode", Value::from("none"))]),
        cell("concat merge", &[("model.merge_mode", Value::from("concat"))]),
        cell("offset fusion", &[("model.fusion", Value::from("offset"))]),
        cell("concat fusion", &[("model.fusion", Value::from("concat_baseline"))]),
        cell("no predictor", &[("model.use_predictor", Value::from(false))]),
        cell(
            "random kernel scale 0",
            &[
                ("views.sampler.kernel_selection", Value::from("random")),
                ("views.sampler.scales", serde_json::json!([0])),
            ],
        ),
    ]
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Split `key=value`; the value is JSON when it parses as JSON and a
/// string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let s = s.trim_start_matches("--");
    let Some((key, raw)) = s.split_once('=') else {
        return invalid(format!("override {s:?} must look like key=value"));
    };
    if key.is_empty() {
        return invalid(format!("override {s:?} has an empty key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Replace the field at dotted `path`; every segment must already exist.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let here = segments[..=i].join(".");
        cur = match cur {
            Value::Object(m) => match m.get_mut(*seg) {
                Some(v) => v,
                None => return invalid(format!("unknown config field {here}")),
            },
            Value::Array(a) => match seg.parse::<usize>().ok().and_then(|j| a.get_mut(j)) {
                Some(v) => v,
                None => return invalid(format!("config field {here} is not a valid index")),
            },
            _ => return invalid(format!("config field {here} has no sub-fields")),
        };
    }
    *cur = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_nested_fields() {
        let cfg = RunConfig::load(None, &["model.dim=32".into(), "--train.schedule=constant".into()]).unwrap();
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.train.schedule, crate::train::Schedule::Constant);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = RunConfig::load(None, &["model.width=3".into()]).unwrap_err();
        assert!(err.to_string().contains("model.width"), "{err}");
    }

    #[test]
    fn invalid_value_is_rejected() {
        assert!(RunConfig::load(None, &["train.tau=1.5".into()]).is_err());
        assert!(RunConfig::load(None, &["model.heads=5".into()]).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_and_key_order() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.checkpoint_every = 7;
        assert_eq!(a.hash(), b.hash());
        b.train.lr *= 2.0;
        assert_ne!(a.hash(), b.hash());
        let json = a.to_pretty_json();
        assert_eq!(RunConfig::from_json(&json).unwrap().hash(), a.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn ablation_cells_expand_per_seed() {
        let mut cfg = RunConfig::desk();
        cfg.ablation.cells = vec![
            CellSpec {
                name: "base".into(),
                overrides: BTreeMap::new(),
            },
            CellSpec {
                name: "no merge".into(),
                overrides: [("model.merge_mode".to_string(), Value::from("none"))].into(),
            },
        ];
        let cells = cfg.ablation_cells().unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[4].experiment.model.merge_mode, crate::model::MergeMode::None);
        assert_eq!(cells[4].experiment.train.seed, 1);
        assert_eq!(cells[4].experiment.dataset.seed, 1);
    }
}
