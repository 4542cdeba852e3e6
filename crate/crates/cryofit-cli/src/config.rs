//! Pipeline configuration: a single TOML file drives every subcommand,
//! with CLI flags able to override the seed and thresholds.

use std::path::PathBuf;

use cryofit_core::features::NoiseSpec;
use cryofit_core::fitting::TopologyParams;
use cryofit_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub thresholds: Thresholds,
    pub noise: NoiseSpec,
    pub labels: LabelConfig,
    pub topology: TopologyParams,
    pub fitting: FittingConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Experimental (or simulated stand-in) density map, used by the
    /// experimental / correlation fitting stages.
    pub map: Option<PathBuf>,
    /// Ground-truth or initial structure, depending on the subcommand.
    pub structure: PathBuf,
    pub sequence: PathBuf,
    pub feature_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            map: None,
            structure: PathBuf::from("structure.pdb"),
            sequence: PathBuf::from("sequence.fasta"),
            feature_dir: PathBuf::from("features"),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// CA detection probability cutoff in (0, 1).
    pub detection: f64,
    /// Squared distance bound on the linking criterion, in square angstroms.
    pub epsilon_sq: f64,
    /// Fragments shorter than this are pruned.
    pub min_len: usize,
    /// Alignment confidence acceptance threshold.
    pub confidence: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            detection: 0.5,
            epsilon_sq: 1.0,
            min_len: 3,
            confidence: 3.4,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.detection > 0.0 && self.detection < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "detection threshold {} outside (0, 1)",
                self.detection
            )));
        }
        if !(self.epsilon_sq > 0.0) {
            return Err(Error::InvalidArgument(
                "epsilon_sq must be positive".into(),
            ));
        }
        if self.min_len == 0 {
            return Err(Error::InvalidArgument("min_len must be >= 1".into()));
        }
        if !(self.confidence >= 0.0) {
            return Err(Error::InvalidArgument(
                "confidence threshold must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    /// Backbone-probability grid spacing, in angstroms.
    pub bb_spacing: f64,
    /// Padding around the structure bounding box, in angstroms.
    pub margin: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            bb_spacing: 1.0,
            margin: 8.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FittingConfig {
    /// Total pulling force constant, spread over the restrained atoms.
    pub h: f64,
    /// Pulling schedule length in steps.
    pub t_total: usize,
    pub max_steps: usize,
    pub force_tolerance: f64,
    pub friction: f64,
    pub dt: f64,
    pub k_pos: f64,
    /// Density-potential constant for the backbone-probability stage.
    pub backbone_map_k: f64,
    /// Density-potential constant for the experimental-map stage.
    pub experimental_map_k: f64,
    /// Correlation-potential constant.
    pub correlation_k: f64,
    /// Map-simulation resolution for the correlation stage, in angstroms.
    pub resolution: f64,
    pub ccc_target: Option<f64>,
    pub sample_interval: usize,
    /// Stage sequence; known names: tmd, backbone, experimental, correlation.
    pub stages: Vec<String>,
}

impl Default for FittingConfig {
    fn default() -> Self {
        Self {
            h: 50.0,
            t_total: 400,
            max_steps: 1200,
            force_tolerance: 1e-3,
            friction: 0.9,
            dt: 0.1,
            k_pos: 10.0,
            backbone_map_k: 5.0,
            experimental_map_k: 5.0,
            correlation_k: 50.0,
            resolution: 4.0,
            ccc_target: None,
            sample_interval: 10,
            stages: vec!["tmd".into(), "backbone".into()],
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: Self =
            toml::from_str(&text).map_err(|e| Error::Serialize(format!("config: {e}")))?;
        config.thresholds.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialize(e.to_string()))
    }
}
