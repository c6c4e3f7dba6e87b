use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steervec_core::experiment::{MeansSource, Orientation, RunConfig, SteeringMode};
use steervec_core::Error;

/// Artifact locations; flags take precedence over these.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub vector: Option<PathBuf>,
    pub dump: Option<PathBuf>,
}

/// The TOML config file: a [`RunConfig`] plus a `[paths]` table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    pub paths: PathConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }
}

/// Flags shared by every command.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<SteeringMode>,
    #[arg(long, global = true)]
    pub alpha: Option<f32>,
    /// Token position of the candidate vectors (0 is CLS).
    #[arg(long, global = true)]
    pub position: Option<usize>,
    /// Class whose majority and minority groups define the vector.
    #[arg(long, global = true)]
    pub class: Option<u32>,
    #[arg(long, global = true, value_parser = parse_orientation)]
    pub orientation: Option<Orientation>,
    /// Dataset split used for the group means.
    #[arg(long, global = true, value_parser = parse_means)]
    pub means_from: Option<MeansSource>,
}

fn parse_mode(s: &str) -> Result<SteeringMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_orientation(s: &str) -> Result<Orientation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_means(s: &str) -> Result<MeansSource, String> {
    match s {
        "train" => Ok(MeansSource::Train),
        "val" => Ok(MeansSource::Val),
        other => Err(format!("unknown means source {other:?} (train or val)")),
    }
}

impl CommonArgs {
    /// Loads the config file and applies flag overrides.
    pub fn resolve(&self) -> Result<CliConfig, Error> {
        let mut cfg = CliConfig::load(self.config.as_deref())?;
        let s = &mut cfg.run.steering;
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(mode) = self.mode {
            s.mode = mode;
        }
        if let Some(alpha) = self.alpha {
            s.alpha = alpha;
        }
        if let Some(position) = self.position {
            s.position = position;
        }
        if let Some(class) = self.class {
            s.class = class;
        }
        if let Some(orientation) = self.orientation {
            s.orientation = orientation;
        }
        if let Some(means) = self.means_from {
            s.means_from = means;
        }
        if let Some(out) = &self.out {
            cfg.paths.out = Some(out.clone());
        }
        Ok(cfg)
    }
}

/// Returns `flag`, falling back to the configured path.
pub fn pick(
    flag: &Option<PathBuf>,
    configured: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, Error> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or [paths] entry)")))
}

/// Creates the output directory; failure is a configuration problem.
pub fn out_dir(cfg: &CliConfig) -> Result<PathBuf, Error> {
    let dir = cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| {
        Error::Config(format!(
            "output directory {} is not writable: {e}",
            dir.display()
        ))
    })?;
    Ok(dir)
}
