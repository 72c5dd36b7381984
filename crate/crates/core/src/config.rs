//! Run configuration: one JSON document with a section per stage. Unknown
//! keys are rejected; every missing key takes its documented default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::Level;
use crate::head::DecodeConfig;
use crate::kernels::LossConfig;
use crate::model::ModelConfig;
use crate::streaming::LatencyModel;
use crate::synth::SceneConfig;
use crate::train::TrainConfig;
use crate::view::GridView;
use crate::voxelize::{GridConfig, GridSpec};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub n_sectors: Vec<usize>,
    pub latency: LatencyModel,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { n_sectors: vec![1, 2, 4, 6, 8], latency: LatencyModel::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Difficulty level, 1 or 2.
    pub level: u8,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { level: 2 }
    }
}

impl EvalConfig {
    pub fn level(&self) -> Result<Level> {
        Level::from_number(self.level).ok_or_else(|| Error::config(format!("eval.level must be 1 or 2, got {}", self.level)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolutionConfig {
    /// Voxel size multipliers.
    pub scales: Vec<usize>,
    /// Points a cell can hold before the rest count as lost.
    pub capacity: usize,
}

impl Default for ResolutionConfig {
    fn default() -> Self {
        Self { scales: vec![1, 2, 3, 4, 5], capacity: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub scene: SceneConfig,
    /// Scenes written by one `synth` run; seeds are `seed, seed+1, ...`.
    pub n_scenes: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { scene: SceneConfig::default(), n_scenes: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory searched for scene files when a command takes none.
    pub scenes: Option<PathBuf>,
    /// Default checkpoint directory.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub decode: DecodeConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub stream: StreamConfig,
    pub eval: EvalConfig,
    pub resolution: ResolutionConfig,
    pub synth: SynthSection,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            grid: GridConfig::default(),
            model: ModelConfig::default(),
            decode: DecodeConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            stream: StreamConfig::default(),
            eval: EvalConfig::default(),
            resolution: ResolutionConfig::default(),
            synth: SynthSection::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Settings of the reference training run: narrow model, default grid.
    pub fn reference() -> Self {
        Self { model: ModelConfig::reference(), ..Self::default() }
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::json(path, e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        let spec = self.grid_spec()?;
        self.model.validate(&GridView::full(&spec))?;
        self.decode.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.stream.latency.validate()?;
        self.eval.level()?;
        self.synth.scene.validate()?;
        if self.resolution.scales.iter().any(|&s| s == 0) {
            return Err(Error::config("resolution.scales must be positive"));
        }
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.clone())
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}
