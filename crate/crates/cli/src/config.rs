//! Run configuration, read from TOML and overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splatstream::stream::SessionConfig;
use splatstream::synth::{AppearanceEvent, RigSpec, SceneSpec};
use splatstream::train::{LossWeights, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Grouping quality threshold, dB.
    pub tau: f64,
    /// Bandwidth trace CSV. Without one, a constant `bandwidth_mbps` link is
    /// simulated.
    pub trace: Option<PathBuf>,
    pub bandwidth_mbps: f64,
    pub scene: SceneSpec,
    pub rig: RigSpec,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub stream: SessionConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            tau: 30.0,
            trace: None,
            bandwidth_mbps: 100.0,
            scene: SceneSpec::default(),
            rig: RigSpec::default(),
            weights: LossWeights::default(),
            train: TrainConfig::default(),
            stream: SessionConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Constant link bandwidth used without a trace, Mbit/s.
    #[arg(long)]
    pub bandwidth_mbps: Option<f64>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub primitives: Option<usize>,
    #[arg(long)]
    pub mover_fraction: Option<f64>,
    /// Appearance event as `frame:count:x,y,z:scale`.
    #[arg(long = "appearance", value_parser = parse_appearance)]
    pub appearances: Vec<AppearanceEvent>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub lambda_inf: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Target frame rate, frames per second.
    #[arg(long)]
    pub rate: Option<f64>,
}

fn parse_appearance(s: &str) -> Result<AppearanceEvent, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [frame, count, center, scale] = parts[..] else {
        return Err("expected frame:count:x,y,z:scale".into());
    };
    let c: Vec<f64> = center
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let [x, y, z] = c[..] else {
        return Err("center needs three coordinates".into());
    };
    Ok(AppearanceEvent {
        frame: frame.parse().map_err(|e| format!("frame: {e}"))?,
        count: count.parse().map_err(|e| format!("count: {e}"))?,
        center: [x, y, z],
        scale: scale.parse().map_err(|e| format!("scale: {e}"))?,
        color: [0.9, 0.3, 0.1],
    })
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        // Relative trace paths are taken relative to the config file.
        if let (Some(t), Some(dir)) = (&cfg.trace, path.parent()) {
            if t.is_relative() {
                cfg.trace = Some(dir.join(t));
            }
        }
        Ok(cfg)
    }

    /// File (or defaults) plus overrides, validated.
    pub fn resolve(o: &Overrides) -> CliResult<Self> {
        let mut cfg = match &o.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = o.seed {
            cfg.seed = v;
        }
        if let Some(v) = &o.out {
            cfg.out = v.clone();
        }
        if let Some(v) = o.tau {
            cfg.tau = v;
        }
        if let Some(v) = &o.trace {
            cfg.trace = Some(v.clone());
        }
        if let Some(v) = o.bandwidth_mbps {
            cfg.bandwidth_mbps = v;
        }
        if let Some(v) = o.frames {
            cfg.scene.frames = v;
        }
        if let Some(v) = o.primitives {
            cfg.scene.primitives = v;
        }
        if let Some(v) = o.mover_fraction {
            cfg.scene.mover_fraction = v;
        }
        if !o.appearances.is_empty() {
            cfg.scene.appearances = o.appearances.clone();
        }
        if let Some(v) = o.iterations {
            cfg.train.iterations = v;
        }
        if let Some(v) = o.lambda_inf {
            cfg.weights.lambda_inf = v;
        }
        if let Some(v) = o.beta {
            cfg.stream.cliff_beta = v;
        }
        if let Some(v) = o.rate {
            cfg.stream.target_rate = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.weights.validate()?;
        self.train.validate()?;
        self.stream.validate()?;
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return Err(CliError::config(format!("tau {} must be finite and non-negative", self.tau)));
        }
        if !(self.bandwidth_mbps > 0.0) {
            return Err(CliError::config("bandwidth_mbps must be positive"));
        }
        if let Some(t) = &self.trace {
            if !t.is_file() {
                return Err(CliError::missing(t, "trace file not found"));
            }
        }
        Ok(())
    }
}
