use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gla_core::datasets::{make_shifted_task, DomainPair, Provenance, Shift, SyntheticPreset, TaskKind, SAMPLES_PER_DOMAIN};
use gla_core::training::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Marks errors caused by the invocation or the configuration (exit 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn default_n() -> usize {
    SAMPLES_PER_DOMAIN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// One of the four alignment-only presets.
    Preset {
        name: SyntheticPreset,
        #[serde(default = "default_n")]
        n: usize,
    },
    /// A labeled task whose target is a transformed copy of the source.
    Shifted {
        task: TaskKind,
        #[serde(default)]
        shift: Shift,
        #[serde(default = "default_n")]
        n: usize,
    },
    /// `x0,x1,label,domain` rows.
    Csv { path: PathBuf },
}

impl DatasetSpec {
    /// Moons, target rotated 30 degrees, 500 points per domain.
    pub fn rotated_moons() -> Self {
        DatasetSpec::Shifted {
            task: TaskKind::Moons,
            shift: Shift::rotation(30.0),
            n: SAMPLES_PER_DOMAIN,
        }
    }

    pub fn load(&self, seed: u64) -> Result<DomainPair> {
        Ok(match self {
            DatasetSpec::Preset { name, n } => name.generate(*n, seed)?,
            DatasetSpec::Shifted { task, shift, n } => make_shifted_task(*task, *shift, *n, seed)?,
            DatasetSpec::Csv { path } => {
                let file = File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
                let provenance = Provenance {
                    generator: "csv".into(),
                    params: [("path".to_string(), Value::from(path.display().to_string()))].into(),
                    seed,
                };
                DomainPair::read_csv(BufReader::new(file), provenance)?
            }
        })
    }
}

/// Optional outputs beyond the fixed set every command writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `latent_histogram.csv`: pre-activation values of the last encoder layer.
    LatentHistogram,
    /// `norm_trace.csv`: mean feature norm over the first iterations (feature-norm runs).
    NormTrace,
}

/// The configuration file as written by the user; `train` is a partial
/// override merged onto the command's defaults.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: Option<DatasetSpec>,
    #[serde(default)]
    train: Map<String, Value>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    metrics: Vec<Metric>,
    ablation_variants: Option<Vec<usize>>,
}

/// A fully resolved experiment, echoed to `config_echo.json`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub output_dir: Option<PathBuf>,
    pub metrics: Vec<Metric>,
    pub ablation_variants: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synthetic,
    Adapt,
    Ablation,
}

impl Command {
    fn defaults(self) -> (DatasetSpec, TrainConfig) {
        match self {
            Command::Synthetic => (
                DatasetSpec::Preset {
                    name: SyntheticPreset::GaussSameCov,
                    n: SAMPLES_PER_DOMAIN,
                },
                TrainConfig::synthetic(),
            ),
            Command::Adapt | Command::Ablation => (DatasetSpec::rotated_moons(), TrainConfig::rotated_moons()),
        }
    }
}

/// Where the seed came from, highest precedence first.
pub struct SeedSources {
    pub flag: Option<u64>,
    pub env: Option<String>,
}

impl SeedSources {
    pub fn from_env(flag: Option<u64>) -> Self {
        Self {
            flag,
            env: std::env::var("GLA_SEED").ok(),
        }
    }

    fn resolve(&self) -> Result<Option<u64>> {
        if self.flag.is_some() {
            return Ok(self.flag);
        }
        match &self.env {
            Some(s) => s
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("GLA_SEED `{s}` is not a non-negative integer"))),
            None => Ok(None),
        }
    }
}

impl ExperimentConfig {
    /// Reads `path` (or starts empty), applies the command's defaults, the
    /// seed precedence `--seed` > `GLA_SEED` > file, and `--out`.
    pub fn resolve(
        command: Command,
        path: Option<&Path>,
        seeds: &SeedSources,
        out: Option<PathBuf>,
    ) -> Result<Self> {
        let raw: RawConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", p.display())))?
            }
            None => RawConfig::default(),
        };
        let (dataset, base) = command.defaults();
        let mut merged = match serde_json::to_value(&base)? {
            Value::Object(m) => m,
            _ => unreachable!("TrainConfig serializes to an object"),
        };
        merged.extend(raw.train);
        let mut train: TrainConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("invalid train section: {e}")))?;
        if let Some(seed) = seeds.resolve()? {
            train.seed = seed;
        }
        train.validate().map_err(|e| usage(e.to_string()))?;
        if command == Command::Synthetic && train.variant != Variant::DalOnly {
            return Err(usage(format!("synthetic runs train dal_only, not `{}`", train.variant)));
        }
        let dataset = raw.dataset.unwrap_or(dataset);
        if command == Command::Synthetic && !matches!(dataset, DatasetSpec::Preset { .. }) {
            return Err(usage("synthetic runs need a preset dataset"));
        }
        let ablation_variants = raw.ablation_variants.unwrap_or_else(|| (1..=6).collect());
        Ok(Self {
            dataset,
            train,
            output_dir: out.or(raw.output_dir),
            metrics: raw.metrics,
            ablation_variants,
        })
    }

    /// Checks every path before any work starts and creates the output
    /// directory (its parent must exist).
    pub fn prepare_paths(&self) -> Result<PathBuf> {
        if let DatasetSpec::Csv { path } = &self.dataset {
            if !path.is_file() {
                return Err(usage(format!("dataset file {} does not exist", path.display())));
            }
        }
        let Some(dir) = &self.output_dir else {
            return Err(usage("no output directory given (use --out or output_dir)"));
        };
        if dir.is_dir() {
            return Ok(dir.clone());
        }
        if dir.exists() {
            return Err(usage(format!("output directory {} is not a directory", dir.display())));
        }
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() {
            bail!(UsageError(format!(
                "output directory {} cannot be created: {} does not exist",
                dir.display(),
                parent.display()
            )));
        }
        std::fs::create_dir(dir).map_err(|e| usage(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(dir.clone())
    }
}
