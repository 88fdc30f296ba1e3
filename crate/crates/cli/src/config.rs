//! Run configuration: a flat JSON object holding every training field plus paths.

use std::path::{Path, PathBuf};

use qgen_core::{TaskMode, TrainConfig};
use serde_json::{Map, Value};

use crate::CliError;

const PATH_KEYS: [&str; 5] = ["train_path", "dev_path", "test_path", "embeddings_path", "output_dir"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub embeddings_path: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a config object; relative paths resolve against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut map: Map<String, Value> = serde_json::from_str(text)
            .map_err(|e| CliError::usage(format!("config is not a JSON object: {e}")))?;
        let mut take = |key: &str| -> Result<Option<PathBuf>, CliError> {
            match map.remove(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(base.join(s))),
                Some(_) => Err(CliError::usage(format!("config key {key:?} must be a string path"))),
            }
        };
        let [train_path, dev_path, test_path, embeddings_path, output_dir] = [
            take(PATH_KEYS[0])?,
            take(PATH_KEYS[1])?,
            take(PATH_KEYS[2])?,
            take(PATH_KEYS[3])?,
            take(PATH_KEYS[4])?,
        ];
        let train: TrainConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        Ok(Self {
            train,
            train_path,
            dev_path,
            test_path,
            embeddings_path,
            output_dir,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// The file at `path` if given, else defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Flags shared by every subcommand; set values override the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Task orientation: qg (answer -> question) or qa (question -> answer).
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<TaskMode>,
}

pub fn parse_mode(s: &str) -> Result<TaskMode, String> {
    s.parse().map_err(|e: qgen_core::Error| e.to_string())
}

impl Overrides {
    pub fn apply(&self, config: &mut TrainConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(mode) = self.mode {
            config.mode = mode;
        }
    }
}

/// Fails with a usage error naming the first path that does not exist.
pub fn require_exists(label: &str, path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{label} not found: {}", path.display())))
    }
}
