//! TOML experiment configuration. Unknown keys are rejected and relative
//! paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayes::LdbConfig;
use crate::error::{Error, Result};
use crate::grid::{normalize_descriptors, DescriptorStack, DrainagePlan};
use crate::io;
use crate::model::{Bounds, StateFields};
use crate::objective::CostConfig;
use crate::optim::{CalibrationConfig, Method, OptimizerConfig};
use crate::setup::Setup;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// D8 flow-direction raster.
    pub drainage: PathBuf,
    /// One raster per descriptor; the file stem names the descriptor.
    #[serde(default)]
    pub descriptors: Vec<PathBuf>,
    /// Packed forcing file or a directory of per-step rasters.
    pub forcing: PathBuf,
    pub gauges: PathBuf,
    pub discharge: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Timestep (s).
    pub dt: f64,
    pub initial_hp: f64,
    pub initial_hft: f64,
    pub initial_hlr: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dt: 3600.0,
            initial_hp: 0.5,
            initial_hft: 0.5,
            initial_hlr: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub methods: Vec<Method>,
    /// Gauges used for calibration.
    pub donors: Vec<String>,
    /// Gauges held out for spatial validation.
    pub ungauged: Vec<String>,
    /// Timestep ranges `[start, end)`.
    pub p1: Option<[usize; 2]>,
    pub p2: Option<[usize; 2]>,
    /// Random probes for `gradcheck`.
    pub gradcheck_probes: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            donors: Vec::new(),
            ungauged: Vec::new(),
            p1: None,
            p2: None,
            gradcheck_probes: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub bounds: Bounds,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub bayes: LdbConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_toml_str(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::parse(path, m),
            other => other,
        })
    }

    pub fn from_toml_str(text: &str, base_dir: PathBuf) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir;
        cfg.bounds.validate()?;
        cfg.optimizer.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        io::resolve(&self.base_dir, p)
    }

    pub fn calibration(&self) -> CalibrationConfig {
        let mut c = CalibrationConfig {
            optimizer: self.optimizer.clone(),
            bayes: self.bayes.clone(),
        };
        c.optimizer.seed = self.seed;
        c.bayes.seed = self.seed.wrapping_add(1);
        c
    }

    /// Checks the protocol section against the loaded data.
    pub fn validate_protocol(&self, setup: &Setup) -> Result<([usize; 2], [usize; 2])> {
        let p = &self.protocol;
        let (Some(p1), Some(p2)) = (p.p1, p.p2) else {
            return Err(Error::Config(
                "protocol needs both p1 and p2 periods".into(),
            ));
        };
        let n = setup.forcing.n_steps();
        for (name, r) in [("p1", p1), ("p2", p2)] {
            if r[0] >= r[1] || r[1] > n {
                return Err(Error::Config(format!(
                    "period {name} = [{}, {}) must be non-empty and within {n} steps",
                    r[0], r[1]
                )));
            }
        }
        if p1[0] < p2[1] && p2[0] < p1[1] {
            return Err(Error::Config("periods p1 and p2 overlap".into()));
        }
        if p.donors.is_empty() {
            return Err(Error::Config(
                "protocol needs at least one donor gauge".into(),
            ));
        }
        if let Some(id) = p.donors.iter().find(|d| p.ungauged.contains(d)) {
            return Err(Error::Config(format!(
                "gauge '{id}' is both donor and pseudo-ungauged"
            )));
        }
        for id in p.donors.iter().chain(&p.ungauged) {
            if setup.gauges.find(id).is_none() {
                return Err(Error::UnknownGauge(id.clone()));
            }
        }
        Ok((p1, p2))
    }

    /// Reads every input and assembles a setup scored on all registered
    /// gauges.
    pub fn load_setup(&self) -> Result<Setup> {
        let plan = io::read_drainage(&self.resolve(&self.paths.drainage))?;
        let descriptors = self.load_descriptors(&plan)?;
        let forcing = io::read_forcing(&plan, &self.resolve(&self.paths.forcing), self.model.dt)?;
        let registry = io::read_gauge_registry(&self.resolve(&self.paths.gauges))?;
        let observed = io::read_discharge(&self.resolve(&self.paths.discharge))?;
        let gauges = io::build_gauge_set(&plan, &registry, &observed)?;
        let n = plan.n_cells();
        let m = &self.model;
        Ok(Setup {
            init: StateFields::uniform(n, m.initial_hp, m.initial_hft, m.initial_hlr),
            plan,
            forcing,
            descriptors,
            gauges,
            cost: self.cost,
            bounds: self.bounds,
        })
    }

    fn load_descriptors(&self, plan: &DrainagePlan) -> Result<DescriptorStack> {
        let mut names = Vec::new();
        let mut maps = Vec::new();
        for p in &self.paths.descriptors {
            let path = self.resolve(p);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("d{}", names.len() + 1));
            maps.push(io::read_map(plan, &path)?);
            names.push(name);
        }
        let raw = DescriptorStack::new(names, maps)?;
        if raw.n_desc() == 0 {
            return Ok(raw);
        }
        normalize_descriptors(plan, &raw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        [paths]
        drainage = "d.asc"
        forcing = "f.bin"
        gauges = "g.csv"
        discharge = "q.csv"
    "#;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, PathBuf::from("/data")).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.optimizer, OptimizerConfig::default());
        assert_eq!(cfg.protocol.methods.len(), 6);
        assert_eq!(
            cfg.resolve(Path::new("d.asc")),
            PathBuf::from("/data/d.asc")
        );
        assert_eq!(cfg.resolve(Path::new("/abs/x")), PathBuf::from("/abs/x"));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let typo = format!("{MINIMAL}\n[optimizer]\nmax_iters = 5\n");
        assert!(ExperimentConfig::from_toml_str(&typo, PathBuf::new()).is_err());
        let top = format!("sed = 1\n{MINIMAL}");
        assert!(ExperimentConfig::from_toml_str(&top, PathBuf::new()).is_err());
    }

    #[test]
    fn methods_parse_by_name() {
        let text = format!("{MINIMAL}\n[protocol]\nmethods = [\"ur\", \"annr\"]\n");
        let cfg = ExperimentConfig::from_toml_str(&text, PathBuf::new()).unwrap();
        assert_eq!(cfg.protocol.methods, vec![Method::Ur, Method::Annr]);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, PathBuf::new()).unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml(), PathBuf::new()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_bounds_rejected() {
        let text = format!("{MINIMAL}\n[bounds]\nlower = [1, 1, 1, 1]\nupper = [0, 2, 2, 2]\n");
        assert!(ExperimentConfig::from_toml_str(&text, PathBuf::new()).is_err());
    }
}
