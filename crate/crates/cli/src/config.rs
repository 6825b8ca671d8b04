//! Run configuration: presets, JSON overrides, and command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use flowdisagg::data::SynthSpec;
use flowdisagg::model::ModelConfig;
use flowdisagg::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Samples drawn per window by `sample` unless `--n` says otherwise.
pub const DEFAULT_SAMPLE_N: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of per-meter CSV files. When absent, `synth` generates the data.
    pub csv_dir: Option<PathBuf>,
    /// Manifest path; defaults to `<csv_dir>/manifest.json`.
    pub manifest: Option<PathBuf>,
    pub synth: SynthSpec,
    pub window_len: usize,
    pub stride: usize,
    /// Fraction of windows (in time order) used for training; the rest is held out.
    pub holdout_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples averaged per window when scoring.
    pub n_samples: usize,
    pub nde_sqrt: bool,
    /// Samples per window for the `sample` command.
    pub sample_n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let eval = EvalConfig {
            n_samples: 20,
            nde_sqrt: false,
            sample_n: DEFAULT_SAMPLE_N,
        };
        match preset {
            Preset::Paper => Self {
                preset,
                data: DataConfig {
                    csv_dir: None,
                    manifest: None,
                    synth: SynthSpec {
                        length: 32_768,
                        ..SynthSpec::default()
                    },
                    window_len: 256,
                    stride: 128,
                    holdout_fraction: 0.8,
                },
                model: ModelConfig::default(),
                train: TrainConfig::default(),
                eval,
                output_dir: PathBuf::from("runs/paper"),
            },
            Preset::Desk => Self {
                preset,
                data: DataConfig {
                    csv_dir: None,
                    manifest: None,
                    synth: SynthSpec::default(),
                    window_len: 64,
                    stride: 32,
                    holdout_fraction: 0.8,
                },
                model: ModelConfig {
                    window_len: 64,
                    latent_channels: 8,
                    n_encoder_blocks: 2,
                    n_decoder_blocks: 2,
                    n_flow_blocks: 4,
                    hidden_channels: 16,
                    prior_weight: 1e-4,
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    batch_size: 32,
                    epochs: 200,
                    ..TrainConfig::default()
                },
                eval,
                output_dir: PathBuf::from("runs/desk"),
            },
        }
    }

    /// Preset, then the JSON file (any subset of fields), then `overrides`.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut value = serde_json::to_value(Self::preset(preset))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let patch: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if patch.get("preset").is_some_and(|p| p != &value["preset"]) {
                bail!("config file preset {} conflicts with --preset", patch["preset"]);
            }
            merge(&mut value, patch);
        }
        let mut config: Self = serde_json::from_value(value).context("config does not match the schema")?;
        overrides.apply(&mut config);
        config.model.window_len = config.data.window_len;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.window_len == 0 || d.stride == 0 {
            bail!("window_len and stride must be positive");
        }
        if !(d.holdout_fraction > 0.0 && d.holdout_fraction < 1.0) {
            bail!("holdout_fraction {} outside (0, 1)", d.holdout_fraction);
        }
        if self.eval.n_samples == 0 || self.eval.sample_n == 0 {
            bail!("sample counts must be positive");
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        let dir = self.data.csv_dir.as_ref()?;
        Some(self.data.manifest.clone().unwrap_or_else(|| dir.join("manifest.json")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        flowdisagg::data::atomic_write(&path, |w| {
            serde_json::to_writer_pretty(&mut *w, self).map_err(std::io::Error::from)?;
            Ok(())
        })?;
        Ok(())
    }
}

/// Values given on the command line; they win over preset and file.
///
/// `seed` drives initialization, shuffling, and sampling. The synthetic data
/// keeps its own `data.synth.seed` so seeds can be compared on one dataset.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub nde_sqrt: bool,
    pub sample_n: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, c: &mut RunConfig) {
        if let Some(seed) = self.seed {
            c.train.seed = seed;
            c.model.init_seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            c.output_dir = dir.clone();
        }
        if self.nde_sqrt {
            c.eval.nde_sqrt = true;
        }
        if let Some(n) = self.sample_n {
            c.eval.sample_n = n;
        }
    }
}

/// Recursive object merge; non-object values in `patch` replace `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
