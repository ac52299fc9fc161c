//! The run configuration file (TOML) and `--set` overrides.

use std::path::{Path, PathBuf};

use glacio::dataset::{Selector, SplitMode, SplitSpec, Task};
use glacio::model::NetworkSpec;
use glacio::phenology::{DateFormat, PhenologyConfig};
use glacio::pipeline::PipelineConfig;
use glacio::synth::SeasonParams;
use glacio::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Every section and key is optional; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `ice_segmentation` or `lake_detection`.
    pub task: Task,
    pub paths: Paths,
    /// `network.num_classes` always follows `task`.
    pub network: NetworkSpec,
    pub train: TrainSection,
    pub split: SplitSection,
    pub phenology: PhenologyConfig,
    pub pipeline: PipelineConfig,
    pub synth: SynthSection,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::IceSegmentation,
            paths: Paths::default(),
            network: NetworkSpec::default(),
            train: TrainSection::default(),
            split: SplitSection::default(),
            phenology: PhenologyConfig::default(),
            pipeline: PipelineConfig::default(),
            synth: SynthSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset index CSV.
    pub index: PathBuf,
    /// Directory runs write into.
    pub out_dir: PathBuf,
    /// Checkpoint used by `eval`.
    pub checkpoint: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            index: PathBuf::from("data/index.csv"),
            out_dir: PathBuf::from("out"),
            checkpoint: PathBuf::from("out/train/best.ckpt"),
        }
    }
}

/// Training hyper-parameters. Crop and batch size default to the task's
/// reference values (500/4 for lake detection, 321/8 for ice).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub crop_size: Option<usize>,
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = TrainConfig::for_task(Task::IceSegmentation);
        Self {
            crop_size: None,
            batch_size: None,
            epochs: p.epochs,
            base_lr: p.base_lr,
            poly_power: p.poly_power,
            seed: p.seed,
            validation_fraction: p.validation_fraction,
            checkpoint_every_epoch: p.checkpoint_every_epoch,
        }
    }
}

impl TrainSection {
    pub fn resolve(&self, task: Task) -> TrainConfig {
        let d = TrainConfig::for_task(task);
        TrainConfig {
            task,
            crop_size: self.crop_size.unwrap_or(d.crop_size),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs,
            base_lr: self.base_lr,
            poly_power: self.poly_power,
            seed: self.seed,
            validation_fraction: self.validation_fraction,
            checkpoint_every_epoch: self.checkpoint_every_epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    /// `same_camera`, `cross_camera` or `cross_winter`; unset uses every frame.
    pub mode: Option<SplitMode>,
    pub train_camera: Option<String>,
    pub train_winter: Option<String>,
    pub test_camera: Option<String>,
    pub test_winter: Option<String>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = SplitSpec::default();
        Self {
            mode: None,
            train_camera: None,
            train_winter: None,
            test_camera: None,
            test_winter: None,
            train_fraction: d.train_fraction,
            seed: d.seed,
        }
    }
}

impl SplitSection {
    /// For `same_camera` without a test filter, the test side uses the
    /// training filter.
    pub fn resolve(&self) -> Option<SplitSpec> {
        let mode = self.mode?;
        let mut spec = SplitSpec {
            mode,
            train_selector: Selector {
                camera_id: self.train_camera.clone(),
                winter_id: self.train_winter.clone(),
            },
            test_selector: Selector {
                camera_id: self.test_camera.clone(),
                winter_id: self.test_winter.clone(),
            },
            train_fraction: self.train_fraction,
            seed: self.seed,
        };
        if mode == SplitMode::SameCamera && spec.test_selector == Selector::default() {
            spec.test_selector = spec.train_selector.clone();
        }
        Some(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Number of independent scenes for `synth scenes`.
    pub n_scenes: usize,
    /// Scene side length in pixels.
    pub size: usize,
    pub seed: u64,
    /// Parameters of `synth season`.
    pub season: SeasonParams,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            size: 64,
            seed: 0,
            season: SeasonParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// `iso` (2017-01-29) or `paper` (29.01.17).
    pub date_format: DateFormat,
}

impl RunConfig {
    #[cfg(test)]
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid configuration: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Reads `path` (or starts from defaults), then applies `--set`
    /// overrides and `GLACIO_SEED`.
    pub fn load(path: Option<&Path>, overrides: &[String], seed_env: Option<&str>) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| CliError::config(format!("invalid configuration: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| CliError::config(format!("invalid configuration: {e}")))?;
        if let Some(raw) = seed_env {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("GLACIO_SEED must be an unsigned integer, got `{raw}`")))?;
            cfg.set_seed(seed);
        }
        cfg.network.num_classes = glacio::dataset::ClassLegend::for_task(cfg.task).num_classes();
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.split.seed = seed;
        self.synth.seed = seed;
        self.synth.season.seed = seed;
    }
}

/// `section.key=value`; the value is read as a TOML literal and falls back to
/// a plain string.
fn apply_override(table: &mut toml::Table, raw: &str) -> Result<(), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects key=value, got `{raw}`")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("--set: malformed key `{key}`")));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let (last, sections) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for s in sections {
        let entry = cur
            .entry(s.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("--set: `{s}` is not a section")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}
