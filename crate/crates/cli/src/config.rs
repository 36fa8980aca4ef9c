//! Run configuration: defaults, overridden by a JSON file, overridden by
//! command-line flags.

use std::path::{Path, PathBuf};

use dmdenkf::ili::{IliExperimentConfig, IliFixtureSpec};
use serde::{Deserialize, Serialize};

use crate::experiments::{Method, PandemicParams, RotationParams};
use crate::CliError;

pub const OUT_ENV: &str = "DMDENKF_OUT";
pub const DEFAULT_OUT: &str = "results";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfConfig {
    pub ensemble_sizes: Vec<usize>,
    pub particles: usize,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            ensemble_sizes: vec![5, 10, 20, 40, 50],
            particles: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IliRunConfig {
    /// ILI CSV; the synthetic fixture is used when absent.
    pub data: Option<PathBuf>,
    pub census: Option<PathBuf>,
    pub fixture: IliFixtureSpec,
    pub experiment: IliExperimentConfig,
    pub rank_sweep: Vec<usize>,
}

impl Default for IliRunConfig {
    fn default() -> Self {
        Self {
            data: None,
            census: None,
            fixture: IliFixtureSpec::default(),
            experiment: IliExperimentConfig::default(),
            rank_sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub runs: usize,
    pub sigma: Vec<f64>,
    pub methods: Vec<Method>,
    pub out: PathBuf,
    /// Worker threads; 0 lets the pool pick.
    pub workers: usize,
    pub rotation: RotationParams,
    pub pandemic: PandemicParams,
    pub pf: PfConfig,
    pub ili: IliRunConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            runs: 100,
            sigma: vec![0.05, 0.5],
            methods: Method::ALL.to_vec(),
            out: PathBuf::from(DEFAULT_OUT),
            workers: 0,
            rotation: RotationParams::default(),
            pandemic: PandemicParams::default(),
            pf: PfConfig::default(),
            ili: IliRunConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.runs == 0 {
            return Err(CliError::Config("--runs must be at least 1".into()));
        }
        if self.sigma.is_empty() || self.sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(CliError::Config("--sigma needs one or more finite non-negative values".into()));
        }
        if self.methods.is_empty() {
            return Err(CliError::Config("no methods selected".into()));
        }
        if self.pf.ensemble_sizes.iter().any(|n| *n < 2) {
            return Err(CliError::Config("ensemble sizes must be at least 2".into()));
        }
        Ok(())
    }

    /// Compact JSON used as the config-echo header of every output. The output
    /// directory and worker count do not affect results and are left out.
    pub fn echo(&self) -> String {
        self.echo_value().to_string()
    }

    pub fn echo_value(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out");
            obj.remove("workers");
        }
        v
    }
}

/// Parses `4..12` (inclusive) or a comma list such as `4,8,12`.
pub fn parse_rank_list(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Config(format!("cannot parse rank list '{s}' (use 4..12 or 4,6,8)"));
    let ranks: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if ranks.is_empty() || ranks.contains(&0) {
        return Err(bad());
    }
    Ok(ranks)
}

pub fn parse_sigma_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::Config(format!("cannot parse sigma '{v}'"))))
        .collect()
}
