use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use oid_core::config::RunConfig;
use oid_core::format::{self, GroundTruth};
use oid_core::{EmbeddingSet, ProjectionMatrix};

use crate::{io_err, CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_unit: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unit: Option<String>,
}

/// Record of one run: enough to repeat it and to audit what it read and
/// wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub version: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub timings: Vec<Timing>,
}

impl Manifest {
    pub fn new(subcommand: &str, argv: Vec<String>, cfg: &RunConfig) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            argv,
            config: cfg.clone(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: not a run manifest: {e}", path.display())))
    }

    pub fn load_embeddings(&mut self, path: &Path) -> Result<EmbeddingSet> {
        self.inputs.push(path.display().to_string());
        Ok(format::load_embeddings(path)?)
    }

    pub fn load_projection(&mut self, path: &Path) -> Result<ProjectionMatrix> {
        self.inputs.push(path.display().to_string());
        Ok(format::load_projection(path)?)
    }

    pub fn load_truth(&mut self, path: &Path) -> Result<GroundTruth> {
        self.inputs.push(path.display().to_string());
        Ok(GroundTruth::load(path)?)
    }
}

pub struct Timer(Instant);

impl Timer {
    pub fn start() -> Self {
        Timer(Instant::now())
    }

    pub fn stop(self, stage: &str) -> Timing {
        Timing {
            stage: stage.to_string(),
            seconds: self.0.elapsed().as_secs_f64(),
            per_unit: None,
            unit: None,
        }
    }

    pub fn stop_per(self, stage: &str, units: usize, unit: &str) -> Timing {
        let mut t = self.stop(stage);
        t.per_unit = Some(t.seconds / units.max(1) as f64);
        t.unit = Some(unit.to_string());
        t
    }
}
