//! Flat key=value run configuration.
//!
//! Grammar: one `key = value` pair per line, `#` starts a comment, blank
//! lines are ignored. `branchiness` takes a comma list. Unknown keys are
//! rejected. Command-line flags override file keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use floodscen::distributions::FrechetParams;
use floodscen::flood::FloodModelConfig;

use crate::CliError;

/// Parsed run settings: the model constants plus the base-distribution and
/// sample plumbing the tree builder needs.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub flood: FloodModelConfig,
    pub lambda: f64,
    pub u: f64,
    pub epsilon: f64,
    /// Synthetic base-sample size (mid-quantile plug-in positions).
    pub sample_size: usize,
    /// Optional CSV with historical sample values (header `value`).
    pub sample_csv: Option<PathBuf>,
    /// Raw key/value view for the manifest snapshot.
    pub snapshot: BTreeMap<String, String>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            flood: FloodModelConfig::default(),
            lambda: 0.5,
            u: 1.0,
            epsilon: 0.0,
            sample_size: 1001,
            sample_csv: None,
            snapshot: BTreeMap::new(),
        }
    }
}

impl RunSettings {
    pub fn base_params(&self) -> Result<FrechetParams, CliError> {
        FrechetParams::new(self.lambda, self.u, self.epsilon)
            .map_err(|e| CliError::Input(format!("base distribution: {e}")))
    }

    /// Exposure from the config, or the 0.9999 quantile of the base law
    /// when the key is absent or zero.
    pub fn resolved_exposure(&self) -> Result<f64, CliError> {
        if self.flood.exposure > 0.0 {
            return Ok(self.flood.exposure);
        }
        let base = self.base_params()?;
        base.quantile(0.9999)
            .map_err(|e| CliError::Input(format!("deriving exposure: {e}")))
    }
}

pub fn parse_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Input(format!(
                "config line {}: expected `key = value`, got `{raw}`",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub fn settings_from_map(map: &BTreeMap<String, String>) -> Result<RunSettings, CliError> {
    let mut s = RunSettings {
        // the exposure key is optional; zero means "derive from the fit"
        flood: FloodModelConfig {
            exposure: 0.0,
            ..FloodModelConfig::default()
        },
        ..RunSettings::default()
    };
    let fparse = |key: &str, value: &str| -> Result<f64, CliError> {
        value
            .parse::<f64>()
            .map_err(|_| CliError::Input(format!("config key {key}: `{value}` is not a number")))
    };
    let uparse = |key: &str, value: &str| -> Result<u64, CliError> {
        value
            .parse::<u64>()
            .map_err(|_| CliError::Input(format!("config key {key}: `{value}` is not an integer")))
    };
    for (key, value) in map {
        match key.as_str() {
            "alpha" => s.flood.alpha = fparse(key, value)?,
            "beta" => s.flood.beta = fparse(key, value)?,
            "delta" => s.flood.delta = fparse(key, value)?,
            "rho" => s.flood.rho = fparse(key, value)?,
            "gamma" => s.flood.gamma = fparse(key, value)?,
            "load" => s.flood.load = fparse(key, value)?,
            "s0" => s.flood.s0 = fparse(key, value)?,
            "stages" => s.flood.stages = uparse(key, value)? as usize,
            "pnl" => s.flood.pnl = fparse(key, value)?,
            "exposure" => s.flood.exposure = fparse(key, value)?,
            "seed" => s.flood.seed = uparse(key, value)?,
            "trajectories" => s.flood.trajectories = uparse(key, value)? as usize,
            "branchiness" => {
                let parsed: Result<Vec<usize>, _> = value
                    .split(',')
                    .map(|p| p.trim().parse::<usize>())
                    .collect();
                s.flood.branchiness = parsed.map_err(|_| {
                    CliError::Input(format!("config key branchiness: `{value}` is not a comma list of counts"))
                })?;
            }
            "lambda" => s.lambda = fparse(key, value)?,
            "u" => s.u = fparse(key, value)?,
            "epsilon" => s.epsilon = fparse(key, value)?,
            "sample_size" => s.sample_size = uparse(key, value)? as usize,
            "sample_csv" => s.sample_csv = Some(PathBuf::from(value)),
            other => {
                return Err(CliError::Input(format!("unknown config key `{other}`")));
            }
        }
    }
    if s.flood.stages != s.flood.branchiness.len() {
        // branchiness wins when only stages was left at its default
        if !map.contains_key("stages") {
            s.flood.stages = s.flood.branchiness.len();
        } else if !map.contains_key("branchiness") {
            s.flood.branchiness = vec![4; s.flood.stages];
        } else {
            return Err(CliError::Input(format!(
                "stages = {} but branchiness has {} entries",
                s.flood.stages,
                s.flood.branchiness.len()
            )));
        }
    }
    s.snapshot = map.clone();
    Ok(s)
}

pub fn load(path: Option<&Path>) -> Result<RunSettings, CliError> {
    match path {
        Some(p) => {
            let map = parse_file(p)?;
            settings_from_map(&map)
        }
        None => {
            let mut s = RunSettings::default();
            s.flood.exposure = 0.0;
            Ok(s)
        }
    }
}
