//! The `key = value` run configuration.
//!
//! ```text
//! seed = 7
//!
//! [sim]
//! n_origins = 2000
//! variants = 10
//! dim = 256
//! strengths = 0.3, 0.5, 0.7, 0.9
//!
//! [profile sd2]
//! sigma_resid = 0.6
//! style_seed = 1
//!
//! [train]
//! rank = 128
//! loss = cosface
//! profile = sd2
//! strength = 0.9
//!
//! [grid]
//! losses = cosface, softmax
//! ranks = 256, 32
//! ```
//!
//! `#` starts a comment. Unknown sections and keys are rejected with the
//! line they appear on.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::LossKind;
use crate::sim::{
    generate_dataset, generate_dataset_with_variants, NoiseSchedule, ResidualSpectrum, SimDataset,
    SimError, SimModelProfile,
};
use crate::train::{InitKind, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn line_err<T>(line: usize, msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Line {
        line,
        msg: msg.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSettings {
    pub n_origins: usize,
    /// Translations per origin and cell in the training dataset.
    pub variants: usize,
    pub dim: usize,
    pub strengths: Vec<f64>,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Residual spectrum; `None` uses the dimension's default.
    pub spectrum: Option<ResidualSpectrum>,
    /// Seed of the held-out dataset a grid evaluates on.
    pub test_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSettings {
    pub name: String,
    pub sigma_resid: f64,
    pub style_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub config: TrainConfig,
    /// Profile whose queries train `W`; the first profile when unset.
    pub profile: Option<String>,
    /// Strength whose queries train `W`; the largest strength when unset.
    pub strength: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSettings {
    pub losses: Vec<LossKind>,
    pub ranks: Vec<usize>,
    /// Evaluated strengths; all simulated strengths when empty.
    pub strengths: Vec<f64>,
    pub include_raw: bool,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimSettings,
    pub profiles: Vec<ProfileSettings>,
    pub train: TrainSettings,
    pub grid: GridSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = NoiseSchedule::default();
        let (beta_start, beta_end) = schedule.beta_range();
        let train = TrainConfig::new(128, LossKind::CosFace);
        Self {
            seed: 0,
            sim: SimSettings {
                n_origins: 2000,
                variants: 1,
                dim: 256,
                strengths: vec![0.9],
                schedule_steps: schedule.steps(),
                beta_start,
                beta_end,
                spectrum: None,
                test_seed: 1,
            },
            profiles: vec![ProfileSettings {
                name: "default".into(),
                sigma_resid: 0.6,
                style_seed: 1,
            }],
            train: TrainSettings {
                config: train,
                profile: None,
                strength: None,
            },
            grid: GridSettings {
                losses: vec![LossKind::CosFace],
                ranks: vec![128],
                strengths: Vec::new(),
                include_raw: true,
                k: 10,
            },
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| ConfigError::Line {
            line,
            msg: format!("bad value for {key}: {e}"),
        })
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(line, key, s))
        .collect()
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => line_err(line, format!("bad value for {key}: expected true or false")),
    }
}

enum Section {
    Top,
    Sim,
    Profile(usize),
    Train,
    Grid,
}

#[derive(Default)]
struct SpectrumKeys {
    clean_dims: Option<usize>,
    clean_variance: Option<f64>,
    spread: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses `text` over the defaults. Declaring any `[profile]` replaces the
    /// default profile list.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section = Section::Top;
        let mut profiles: Vec<ProfileSettings> = Vec::new();
        let mut spectrum = SpectrumKeys::default();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        let mut section_name = String::new();
        let mut steps_set = false;
        let mut warmup_set = false;
        let mut train_seed_set = false;

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(header) = body.strip_prefix('[') {
                let Some(header) = header.strip_suffix(']') else {
                    return line_err(line, "unterminated section header");
                };
                let mut parts = header.split_whitespace();
                section = match (parts.next(), parts.next(), parts.next()) {
                    (Some("sim"), None, _) => Section::Sim,
                    (Some("train"), None, _) => Section::Train,
                    (Some("grid"), None, _) => Section::Grid,
                    (Some("profile"), Some(name), None) => {
                        if profiles.iter().any(|p| p.name == name) {
                            return line_err(line, format!("duplicate profile {name:?}"));
                        }
                        profiles.push(ProfileSettings {
                            name: name.to_string(),
                            sigma_resid: 0.6,
                            style_seed: profiles.len() as u64 + 1,
                        });
                        Section::Profile(profiles.len() - 1)
                    }
                    (Some("profile"), _, _) => {
                        return line_err(line, "profile sections take exactly one name");
                    }
                    _ => return line_err(line, format!("unknown section [{header}]")),
                };
                section_name = header.trim().to_string();
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return line_err(line, format!("expected key = value, got {body:?}"));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert((section_name.clone(), key.to_string())) {
                return line_err(line, format!("duplicate key {key}"));
            }
            let unknown = || line_err(line, format!("unknown key {key}"));
            match section {
                Section::Top => match key {
                    "seed" => cfg.seed = parse_value(line, key, value)?,
                    _ => return unknown(),
                },
                Section::Sim => match key {
                    "n_origins" => cfg.sim.n_origins = parse_value(line, key, value)?,
                    "variants" => cfg.sim.variants = parse_value(line, key, value)?,
                    "dim" => cfg.sim.dim = parse_value(line, key, value)?,
                    "strengths" => cfg.sim.strengths = parse_list(line, key, value)?,
                    "schedule_steps" => cfg.sim.schedule_steps = parse_value(line, key, value)?,
                    "beta_start" => cfg.sim.beta_start = parse_value(line, key, value)?,
                    "beta_end" => cfg.sim.beta_end = parse_value(line, key, value)?,
                    "test_seed" => cfg.sim.test_seed = parse_value(line, key, value)?,
                    "clean_dims" => spectrum.clean_dims = Some(parse_value(line, key, value)?),
                    "clean_variance" => spectrum.clean_variance = Some(parse_value(line, key, value)?),
                    "spread" => spectrum.spread = Some(parse_value(line, key, value)?),
                    _ => return unknown(),
                },
                Section::Profile(p) => match key {
                    "sigma_resid" => profiles[p].sigma_resid = parse_value(line, key, value)?,
                    "style_seed" => profiles[p].style_seed = parse_value(line, key, value)?,
                    _ => return unknown(),
                },
                Section::Train => {
                    let t = &mut cfg.train.config;
                    match key {
                        "rank" => t.rank = parse_value(line, key, value)?,
                        "loss" => {
                            t.loss = parse_value(line, key, value)?;
                            (t.scale, t.margin) = t.loss.default_hyper();
                        }
                        "scale" => t.scale = parse_value(line, key, value)?,
                        "margin" => t.margin = parse_value(line, key, value)?,
                        "peak_lr" => t.peak_lr = parse_value(line, key, value)?,
                        "warmup_steps" => {
                            t.warmup_steps = parse_value(line, key, value)?;
                            warmup_set = true;
                        }
                        "total_steps" => {
                            t.total_steps = parse_value(line, key, value)?;
                            steps_set = true;
                        }
                        "batch_size" => t.batch_size = parse_value(line, key, value)?,
                        "seed" => {
                            t.seed = parse_value(line, key, value)?;
                            train_seed_set = true;
                        }
                        "weight_decay" => t.weight_decay = parse_value(line, key, value)?,
                        "init" => {
                            t.init = match value {
                                "gaussian" => InitKind::Gaussian,
                                "identity" => InitKind::Identity,
                                _ => {
                                    return line_err(
                                        line,
                                        "bad value for init: expected gaussian or identity",
                                    )
                                }
                            }
                        }
                        "profile" => cfg.train.profile = Some(value.to_string()),
                        "strength" => cfg.train.strength = Some(parse_value(line, key, value)?),
                        _ => return unknown(),
                    }
                }
                Section::Grid => match key {
                    "losses" => cfg.grid.losses = parse_list(line, key, value)?,
                    "ranks" => cfg.grid.ranks = parse_list(line, key, value)?,
                    "strengths" => cfg.grid.strengths = parse_list(line, key, value)?,
                    "raw" => cfg.grid.include_raw = parse_bool(line, key, value)?,
                    "k" => cfg.grid.k = parse_value(line, key, value)?,
                    _ => return unknown(),
                },
            }
        }

        if steps_set && !warmup_set {
            let t = &mut cfg.train.config;
            t.warmup_steps = t.total_steps / 20;
        }
        if !train_seed_set {
            cfg.train.config.seed = cfg.seed;
        }
        if !profiles.is_empty() {
            cfg.profiles = profiles;
        }
        if spectrum.clean_dims.is_some() || spectrum.clean_variance.is_some() || spectrum.spread.is_some() {
            let base = ResidualSpectrum::default_for(cfg.sim.dim);
            cfg.sim.spectrum = Some(ResidualSpectrum {
                clean_dims: spectrum.clean_dims.unwrap_or(base.clean_dims),
                clean_variance: spectrum.clean_variance.unwrap_or(base.clean_variance),
                spread: spectrum.spread.unwrap_or(base.spread),
            });
        }
        Ok(cfg)
    }

    /// Overrides the master seed and the training seed together.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.config.seed = seed;
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, SimError> {
        NoiseSchedule::linear(self.sim.schedule_steps, self.sim.beta_start, self.sim.beta_end)
    }

    pub fn spectrum(&self) -> ResidualSpectrum {
        self.sim
            .spectrum
            .unwrap_or_else(|| ResidualSpectrum::default_for(self.sim.dim))
    }

    pub fn build_profiles(&self) -> Result<Vec<SimModelProfile>, SimError> {
        self.profiles
            .iter()
            .map(|p| SimModelProfile::new(&p.name, p.sigma_resid, p.style_seed, self.sim.dim, self.spectrum()))
            .collect()
    }

    /// The training dataset, seeded by `seed`.
    pub fn train_dataset(&self) -> Result<SimDataset, SimError> {
        generate_dataset_with_variants(
            self.sim.n_origins,
            self.sim.variants,
            self.sim.dim,
            &self.build_profiles()?,
            &self.sim.strengths,
            self.seed,
            &self.schedule()?,
        )
    }

    /// The held-out dataset: fresh origins from `test_seed`, one
    /// translation each.
    pub fn test_dataset(&self) -> Result<SimDataset, SimError> {
        generate_dataset(
            self.sim.n_origins,
            self.sim.dim,
            &self.build_profiles()?,
            &self.sim.strengths,
            self.sim.test_seed,
            &self.schedule()?,
        )
    }

    pub fn train_profile(&self) -> Result<String, ConfigError> {
        match &self.train.profile {
            Some(p) if self.profiles.iter().any(|q| &q.name == p) => Ok(p.clone()),
            Some(p) => Err(ConfigError::Invalid(format!("train profile {p:?} is not defined"))),
            None => self
                .profiles
                .first()
                .map(|p| p.name.clone())
                .ok_or_else(|| ConfigError::Invalid("no profiles defined".into())),
        }
    }

    pub fn train_strength(&self) -> Result<f64, ConfigError> {
        match self.train.strength {
            Some(s) if self.sim.strengths.contains(&s) => Ok(s),
            Some(s) => Err(ConfigError::Invalid(format!(
                "train strength {s} is not among the simulated strengths"
            ))),
            None => self
                .sim
                .strengths
                .iter()
                .copied()
                .reduce(f64::max)
                .ok_or_else(|| ConfigError::Invalid("no strengths defined".into())),
        }
    }

    /// One training config per (loss, rank) grid point, sharing the
    /// `[train]` settings otherwise.
    pub fn grid_configs(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &loss in &self.grid.losses {
            for &rank in &self.grid.ranks {
                let mut c = self.train.config.clone();
                if c.loss != loss {
                    (c.scale, c.margin) = loss.default_hyper();
                }
                c.loss = loss;
                c.rank = rank;
                out.push(c);
            }
        }
        out
    }
}
