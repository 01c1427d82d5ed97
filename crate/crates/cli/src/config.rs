//! Run configuration: one TOML file describing a reproduction run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use drcc::ac_model::FixedPointOptions;
use drcc::case_io::{build_fleet, load_case, to_network, NetworkCase, NetworkOptions, VreFleet};
use drcc::evaluation::{AcStudy, DcStudy, Study};
use drcc::scenario_mip::SelectionOptions;
use drcc::scenarios::{load_csv, sample, GaussianSpec, ScenarioSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config key `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub case: CaseConfig,
    pub fleet: FleetConfig,
    #[serde(default)]
    pub scenarios: ScenarioConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub ambiguity: AmbiguityConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    /// `bundled:<name>` or a path to a MATPOWER file, relative to the config.
    pub source: String,
    /// Rating (MW) for branches without one.
    pub default_line_limit_mw: Option<f64>,
    #[serde(default)]
    pub derive_missing_limits: bool,
    #[serde(default)]
    pub allow_negative_reactance: bool,
    /// Per-generator cost overrides in $/MWh, $/MW²h and $/h.
    pub cost_c2: Option<Vec<f64>>,
    pub cost_c1: Option<Vec<f64>>,
    pub cost_c0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    /// MATPOWER bus numbers.
    pub buses: Vec<i64>,
    pub forecasts_mw: Vec<f64>,
    #[serde(default)]
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub zeta: f64,
    pub rho: f64,
    pub clip: bool,
    pub train_size: usize,
    pub train_seed: u64,
    pub test_size: usize,
    pub test_seed: u64,
    /// Size of a separate set for the robust baseline; the training set is
    /// used when absent.
    pub ro_size: Option<usize>,
    pub ro_seed: u64,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            zeta: 0.05,
            rho: 0.2,
            clip: true,
            train_size: 200,
            train_seed: 1,
            test_size: 10_000,
            test_seed: 2,
            ro_size: None,
            ro_seed: 3,
            train_csv: None,
            test_csv: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Dc,
    Ac,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ModelKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmbiguityConfig {
    pub k: Option<usize>,
    pub epsilon_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Explicit list; takes precedence over the range keys.
    pub k: Option<Vec<usize>>,
    pub k_start: Option<usize>,
    pub k_stop: Option<usize>,
    pub k_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub node_limit: usize,
    pub time_limit_s: Option<f64>,
    pub rel_gap: f64,
    /// Worker threads; `DRCC_WORKERS` or all cores when absent.
    pub workers: Option<usize>,
    /// Fixed-point tolerance on the AC distance.
    pub eta: f64,
    pub max_outer: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let fp = FixedPointOptions::default();
        Self {
            node_limit: SelectionOptions::default().node_limit,
            time_limit_s: None,
            rel_gap: 0.0,
            workers: None,
            eta: fp.eta,
            max_outer: fp.max_outer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Relative paths resolve against the config file's directory.
    pub dir: PathBuf,
    /// Record wall times; off makes sweep outputs byte-reproducible.
    pub timing: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), timing: true }
    }
}

/// Ambiguity input after validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AmbiguityInput {
    K(usize),
    Target(f64),
}

/// A parsed config with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Directory that relative paths refer to.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text =
            fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let config = RunConfig::from_toml(&text)
            .map_err(|message| ConfigError::Parse { path: path.to_path_buf(), message })?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output.dir)
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Canonical TOML of the effective configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Hex SHA-256 of the canonical form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Comment line stamped on every output file.
    pub fn digest_line(&self) -> String {
        format!("# drcc config_sha256={}", self.digest())
    }

    pub fn ambiguity_input(&self) -> Result<AmbiguityInput, ConfigError> {
        match (self.ambiguity.k, self.ambiguity.epsilon_target) {
            (Some(k), None) => Ok(AmbiguityInput::K(k)),
            (None, Some(t)) => Ok(AmbiguityInput::Target(t)),
            (Some(_), Some(_)) => {
                Err(invalid("ambiguity", "give exactly one of `k` and `epsilon_target`, not both"))
            }
            (None, None) => Err(invalid("ambiguity", "one of `k` and `epsilon_target` is required")),
        }
    }

    pub fn sweep_values(&self) -> Result<Vec<usize>, ConfigError> {
        let s = &self.sweep;
        let values = match (&s.k, s.k_start, s.k_stop) {
            (Some(list), _, _) => list.clone(),
            (None, Some(start), Some(stop)) => {
                let step = s.k_step.unwrap_or(1);
                if step == 0 {
                    return Err(invalid("sweep.k_step", "must be positive"));
                }
                (start..=stop).step_by(step).collect()
            }
            _ => Vec::new(),
        };
        if values.is_empty() {
            return Err(invalid("sweep", "no k values; set `k` or `k_start`/`k_stop`"));
        }
        Ok(values)
    }

    pub fn selection_options(&self) -> SelectionOptions {
        SelectionOptions {
            node_limit: self.solver.node_limit,
            time_limit: self.solver.time_limit_s.map(Duration::from_secs_f64),
            rel_gap: self.solver.rel_gap,
            ..SelectionOptions::default()
        }
    }

    pub fn fixed_point_options(&self) -> FixedPointOptions {
        FixedPointOptions {
            eta: self.solver.eta,
            max_outer: self.solver.max_outer,
            selection: self.selection_options(),
            ..FixedPointOptions::default()
        }
    }
}

/// Network, fleet and scenario inputs built from a config.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub case: NetworkCase,
    pub fleet: VreFleet,
    pub spec: GaussianSpec,
}

impl LoadedConfig {
    pub fn load_network(&self) -> Result<NetworkCase, anyhow::Error> {
        let c = &self.config.case;
        let source = if c.source.starts_with("bundled:") {
            c.source.clone()
        } else {
            let path = self.resolve(Path::new(&c.source));
            if !path.exists() {
                anyhow::bail!("case file {} does not exist", path.display());
            }
            path.to_string_lossy().into_owned()
        };
        let raw = load_case(&source)?;
        let opts = NetworkOptions {
            default_line_limit: c.default_line_limit_mw.map_or(f64::INFINITY, |mw| mw / raw.base_mva),
            allow_negative_reactance: c.allow_negative_reactance,
            derive_missing_limits: c.derive_missing_limits,
        };
        let mut case = to_network(&raw, &opts)?;
        apply_costs(&mut case, c)?;
        Ok(case)
    }

    pub fn inputs(&self) -> Result<Inputs, anyhow::Error> {
        let case = self.load_network()?;
        let f = &self.config.fleet;
        if f.buses.len() != f.forecasts_mw.len() {
            return Err(invalid(
                "fleet.forecasts_mw",
                format!("{} forecasts for {} buses", f.forecasts_mw.len(), f.buses.len()),
            )
            .into());
        }
        let mut buses = Vec::with_capacity(f.buses.len());
        for &id in &f.buses {
            buses.push(case.bus_index(id).ok_or_else(|| invalid("fleet.buses", format!("unknown bus {id}")))?);
        }
        let forecasts: Vec<f64> = f.forecasts_mw.iter().map(|mw| mw / case.base_mva).collect();
        let fleet = build_fleet(&case, &buses, &forecasts, f.gamma)?;
        let s = &self.config.scenarios;
        let labels = f.buses.iter().map(|id| format!("bus{id}")).collect();
        let spec = GaussianSpec::new(labels, forecasts, s.zeta, s.rho, s.clip)?;
        Ok(Inputs { case, fleet, spec })
    }

    fn scenario_set(&self, csv: &Option<PathBuf>, size: usize, seed: u64, spec: &GaussianSpec) -> anyhow::Result<ScenarioSet> {
        match csv {
            Some(p) => Ok(load_csv(&self.resolve(p), Some(spec))?),
            None => Ok(sample(spec, size, seed)?),
        }
    }

    pub fn training_set(&self, spec: &GaussianSpec) -> anyhow::Result<ScenarioSet> {
        let s = &self.config.scenarios;
        self.scenario_set(&s.train_csv, s.train_size, s.train_seed, spec)
    }

    pub fn test_set(&self, spec: &GaussianSpec) -> anyhow::Result<ScenarioSet> {
        let s = &self.config.scenarios;
        self.scenario_set(&s.test_csv, s.test_size, s.test_seed, spec)
    }

    /// Set used for the robust baseline.
    pub fn ro_set(&self, spec: &GaussianSpec, train: &ScenarioSet) -> anyhow::Result<ScenarioSet> {
        let s = &self.config.scenarios;
        match s.ro_size {
            Some(n) => Ok(sample(spec, n, s.ro_seed)?),
            None => Ok(train.clone()),
        }
    }

    pub fn study(&self, inputs: &Inputs) -> anyhow::Result<Study> {
        Ok(match self.config.model.kind {
            ModelKind::Dc => {
                Study::Dc(DcStudy::new(inputs.case.clone(), inputs.fleet.clone(), self.config.selection_options())?)
            }
            ModelKind::Ac => {
                Study::Ac(AcStudy::new(&inputs.case, inputs.fleet.clone(), self.config.fixed_point_options())?)
            }
        })
    }
}

fn apply_costs(case: &mut NetworkCase, c: &CaseConfig) -> Result<(), ConfigError> {
    let base = case.base_mva;
    let n = case.n_gen();
    for (key, values) in [("case.cost_c2", &c.cost_c2), ("case.cost_c1", &c.cost_c1), ("case.cost_c0", &c.cost_c0)] {
        if let Some(v) = values {
            if v.len() != n {
                return Err(invalid(key, format!("{} entries for {n} in-service generators", v.len())));
            }
            if key == "case.cost_c2" && v.iter().any(|&x| x < 0.0) {
                return Err(invalid(key, "quadratic coefficients must be nonnegative"));
            }
        }
    }
    for (g, gen) in case.gens.iter_mut().enumerate() {
        if let Some(v) = &c.cost_c2 {
            gen.c2 = v[g] * base * base;
        }
        if let Some(v) = &c.cost_c1 {
            gen.c1 = v[g] * base;
        }
        if let Some(v) = &c.cost_c0 {
            gen.c0 = v[g];
        }
    }
    Ok(())
}
