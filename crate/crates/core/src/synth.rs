//! Synthetic twin experiments: a random drainage forest, smooth descriptor
//! fields, a known generating mapping, storm forcing, and the discharge the
//! truth produces at a set of gauges.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bayes::LdbConfig;
use crate::config::{ExperimentConfig, ModelConfig, PathsConfig, ProtocolConfig};
use crate::error::{Error, Result};
use crate::grid::{d8_code, normalize_descriptors, DescriptorStack, DrainagePlan, OUTLET};
use crate::io::{self, GaugeRecord};
use crate::mapping::{
    apply_mlp, apply_multilinear, Activation, ControlVector, MlpControl, RegressionControl,
    SigmoidScaler,
};
use crate::model::{
    simulate_at, Bounds, ForcingSeries, ParameterFields, StateFields, N_PARAMS, PARAM_NAMES,
};
use crate::objective::CostConfig;
use crate::optim::{CalibrationConfig, Method, OptimizerConfig};
use crate::setup::Setup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthKind {
    #[default]
    Multilinear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub nrows: usize,
    pub ncols: usize,
    /// Cell size (m).
    pub cell_size: f64,
    pub n_desc: usize,
    /// Total series length; split in two equal periods.
    pub n_steps: usize,
    pub dt: f64,
    pub n_donor: usize,
    pub n_ungauged: usize,
    /// Smallest drainage area (cells) for a gauge location.
    pub min_gauge_area: usize,
    /// Gaussian smoothing radius (cells) of the descriptor fields.
    pub smoothing: f64,
    /// Standard deviation of the truth regression slopes on the logit
    /// scale, per parameter.
    pub truth_slope_sd: [f64; N_PARAMS],
    pub truth: TruthKind,
    /// Multiplicative lognormal noise on observed discharge.
    pub noise_sigma: f64,
    /// Mean storm arrivals per timestep.
    pub storm_rate: f64,
    pub bounds: Bounds,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            nrows: 20,
            ncols: 20,
            cell_size: 1000.0,
            n_desc: 7,
            n_steps: 2880,
            dt: 3600.0,
            n_donor: 5,
            n_ungauged: 3,
            min_gauge_area: 10,
            smoothing: 3.0,
            truth_slope_sd: [0.6, 0.6, 0.04, 0.5],
            truth: TruthKind::Multilinear,
            noise_sigma: 0.0,
            storm_rate: 1.0 / 30.0,
            bounds: Bounds::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.nrows < 2 || self.ncols < 2 {
            return bad(format!("grid {}x{} is too small", self.nrows, self.ncols));
        }
        if self.n_desc == 0 {
            return bad("need at least one descriptor".into());
        }
        if self.n_steps < 4 || !self.n_steps.is_multiple_of(2) {
            return bad(format!("n_steps = {} must be even and >= 4", self.n_steps));
        }
        if self.n_donor == 0 {
            return bad("need at least one donor gauge".into());
        }
        if !(self.dt > 0.0 && self.cell_size > 0.0) {
            return bad("dt and cell_size must be positive".into());
        }
        if !(self.noise_sigma >= 0.0)
            || !(self.smoothing >= 0.0)
            || !(self.storm_rate > 0.0)
            || self.truth_slope_sd.iter().any(|s| !(*s >= 0.0))
        {
            return bad(
                "noise_sigma, smoothing, truth_slope_sd must be >= 0 and storm_rate > 0".into(),
            );
        }
        self.bounds
            .validate()
            .map_err(|e| Error::SpecInvalid(e.to_string()))
    }
}

/// TOML input of the `synth` command: the domain plus the calibration
/// settings copied into the emitted `protocol.toml`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub methods: Vec<Method>,
    pub domain: SynthSpec,
    pub optimizer: OptimizerConfig,
    pub bayes: LdbConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            methods: Method::ALL.to_vec(),
            domain: SynthSpec::default(),
            optimizer: OptimizerConfig::default(),
            bayes: LdbConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.domain.validate()?;
        cfg.optimizer.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::parse(path, m),
            other => other,
        })
    }

    /// Generates the dataset and writes it with its protocol config to `dir`.
    pub fn run(&self, dir: &Path) -> Result<(SyntheticDataset, PathBuf)> {
        let ds = generate_synthetic(&self.domain, self.seed)?;
        let calib = CalibrationConfig {
            optimizer: self.optimizer.clone(),
            bayes: self.bayes.clone(),
        };
        let cfg = ds.experiment_config(&calib, &self.methods);
        let path = ds.write(dir, &cfg)?;
        Ok((ds, path))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub kind: TruthKind,
    pub control: ControlVector,
    pub params: ParameterFields,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SynthSpec,
    pub seed: u64,
    pub plan: DrainagePlan,
    pub raw_descriptors: DescriptorStack,
    pub descriptors: DescriptorStack,
    pub forcing: ForcingSeries,
    pub registry: Vec<GaugeRecord>,
    pub observed: Vec<(String, Vec<f64>)>,
    pub truth: SyntheticTruth,
    pub donors: Vec<String>,
    pub ungauged: Vec<String>,
}

/// Builds a full twin dataset; identical for identical `(spec, seed)`.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = random_forest(spec.nrows, spec.ncols, spec.cell_size, &mut rng)?;

    let names: Vec<String> = (1..=spec.n_desc).map(|i| format!("d{i}")).collect();
    let raw_maps: Vec<Vec<f64>> = (0..spec.n_desc)
        .map(|i| {
            let field = smooth_noise(spec.nrows, spec.ncols, spec.smoothing, &mut rng);
            // arbitrary physical-looking offsets and scales
            field
                .iter()
                .map(|v| 100.0 * (i + 1) as f64 + 25.0 * v)
                .collect()
        })
        .collect();
    let raw_descriptors = DescriptorStack::new(names, raw_maps)?;
    let descriptors = normalize_descriptors(&plan, &raw_descriptors)?;

    let scaler = SigmoidScaler::new(spec.bounds);
    // truth centred on hydrologically plausible fractions of each range
    let centre = [(0.1, 0.4), (0.05, 0.3), (0.47, 0.53), (0.03, 0.15)];
    let mut intercepts = [0.0; N_PARAMS];
    for k in 0..N_PARAMS {
        let frac = rng.random_range(centre[k].0..centre[k].1);
        let z = spec.bounds.lower[k] + frac * spec.bounds.span(k);
        intercepts[k] = scaler.inverse(z, k)?;
    }
    let (control, params) = match spec.truth {
        TruthKind::Multilinear => {
            let mut ctrl = RegressionControl::zeros(spec.n_desc);
            for k in 0..N_PARAMS {
                ctrl.alpha[k][0] = intercepts[k];
                let mut slope_sum = 0.0;
                for d in 0..spec.n_desc {
                    let s: f64 = rng.sample::<f64, _>(StandardNormal) * spec.truth_slope_sd[k];
                    ctrl.alpha[k][d + 1] = s;
                    slope_sum += s;
                }
                // keep the mid-descriptor value at the chosen centre
                ctrl.alpha[k][0] -= 0.5 * slope_sum;
            }
            let params = apply_multilinear(&plan, &descriptors, &ctrl, &scaler)?;
            (ControlVector::Multilinear(ctrl), params)
        }
        TruthKind::Mlp => {
            let sizes = [spec.n_desc, 8, N_PARAMS];
            let mut mlp = MlpControl::new(&sizes, Activation::Tanh, spec.bounds, rng.random())?;
            let last = mlp.layers.last_mut().unwrap();
            for (o, row) in last.weights.chunks_mut(last.n_in).enumerate() {
                for w in row {
                    *w *= spec.truth_slope_sd[o];
                }
            }
            last.bias.copy_from_slice(&intercepts);
            let params = apply_mlp(&plan, &descriptors, &mlp)?;
            (ControlVector::Mlp(mlp), params)
        }
    };

    let forcing = storm_forcing(&plan, spec, &mut rng)?;

    let acc = plan.accumulation();
    let mut candidates: Vec<usize> = plan
        .active_cells()
        .iter()
        .copied()
        .filter(|&c| acc[c] >= spec.min_gauge_area)
        .collect();
    let n_gauges = spec.n_donor + spec.n_ungauged;
    if candidates.len() < n_gauges {
        return Err(Error::SpecInvalid(format!(
            "only {} cells drain at least {} cells; {n_gauges} gauges requested",
            candidates.len(),
            spec.min_gauge_area
        )));
    }
    candidates.shuffle(&mut rng);
    candidates.truncate(n_gauges);
    let weight = 1.0 / n_gauges as f64;
    let registry: Vec<GaugeRecord> = candidates
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let (row, col) = plan.coords(c);
            GaugeRecord {
                id: format!("G{:02}", i + 1),
                row,
                col,
                weight,
            }
        })
        .collect();

    let init = StateFields::default_initial(plan.n_cells());
    let q = simulate_at(&plan, &forcing, &params, &init, &candidates)?;
    let noise = if spec.noise_sigma > 0.0 {
        Some(LogNormal::new(0.0, spec.noise_sigma).map_err(|e| Error::SpecInvalid(e.to_string()))?)
    } else {
        None
    };
    let observed: Vec<(String, Vec<f64>)> = registry
        .iter()
        .zip(q)
        .map(|(r, mut series)| {
            if let Some(ln) = &noise {
                for v in &mut series {
                    *v *= ln.sample(&mut rng);
                }
            }
            (r.id.clone(), series)
        })
        .collect();

    let donors = registry[..spec.n_donor]
        .iter()
        .map(|r| r.id.clone())
        .collect();
    let ungauged = registry[spec.n_donor..]
        .iter()
        .map(|r| r.id.clone())
        .collect();
    Ok(SyntheticDataset {
        spec: spec.clone(),
        seed,
        plan,
        raw_descriptors,
        descriptors,
        forcing,
        registry,
        observed,
        truth: SyntheticTruth {
            kind: spec.truth,
            control,
            params,
            noise_sigma: spec.noise_sigma,
        },
        donors,
        ungauged,
    })
}

/// Spanning forest grown outward from one border outlet: every new cell
/// drains to a random neighbour already in the tree.
fn random_forest(
    nrows: usize,
    ncols: usize,
    cell_size: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DrainagePlan> {
    let n = nrows * ncols;
    let mut codes: Vec<Option<u8>> = vec![None; n];
    let mut in_tree = vec![false; n];
    let mut queued = vec![false; n];
    let border: Vec<usize> = (0..n)
        .filter(|&c| {
            let (r, col) = (c / ncols, c % ncols);
            r == 0 || col == 0 || r == nrows - 1 || col == ncols - 1
        })
        .collect();
    let outlet = *border.choose(rng).expect("grid has a border");
    codes[outlet] = Some(OUTLET);
    in_tree[outlet] = true;
    let neighbours = |c: usize| {
        let (r, col) = ((c / ncols) as i64, (c % ncols) as i64);
        let mut out = Vec::with_capacity(8);
        for dr in -1..=1i64 {
            for dc in -1..=1i64 {
                let (rr, cc) = (r + dr, col + dc);
                if (dr, dc) != (0, 0)
                    && rr >= 0
                    && cc >= 0
                    && rr < nrows as i64
                    && cc < ncols as i64
                {
                    out.push((rr as usize) * ncols + cc as usize);
                }
            }
        }
        out
    };
    let mut frontier = Vec::new();
    for nb in neighbours(outlet) {
        queued[nb] = true;
        frontier.push(nb);
    }
    while !frontier.is_empty() {
        let i = rng.random_range(0..frontier.len());
        let c = frontier.swap_remove(i);
        let targets: Vec<usize> = neighbours(c).into_iter().filter(|&t| in_tree[t]).collect();
        let t = *targets.choose(rng).expect("frontier cells touch the tree");
        let drow = (t / ncols) as i64 - (c / ncols) as i64;
        let dcol = (t % ncols) as i64 - (c % ncols) as i64;
        codes[c] = d8_code(drow, dcol);
        in_tree[c] = true;
        for nb in neighbours(c) {
            if !in_tree[nb] && !queued[nb] {
                queued[nb] = true;
                frontier.push(nb);
            }
        }
    }
    DrainagePlan::new(nrows, ncols, cell_size, codes)
}

/// Standard-normal noise blurred with a Gaussian kernel of width `sigma`.
fn smooth_noise(nrows: usize, ncols: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..nrows * ncols)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    if sigma == 0.0 {
        return raw;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let blur = |src: &[f64], along_rows: bool| {
        let mut out = vec![0.0; src.len()];
        for r in 0..nrows as i64 {
            for c in 0..ncols as i64 {
                let (mut s, mut w) = (0.0, 0.0);
                for (i, k) in kernel.iter().enumerate() {
                    let d = i as i64 - radius;
                    let (rr, cc) = if along_rows { (r, c + d) } else { (r + d, c) };
                    if rr >= 0 && cc >= 0 && rr < nrows as i64 && cc < ncols as i64 {
                        s += k * src[(rr as usize) * ncols + cc as usize];
                        w += k;
                    }
                }
                out[(r as usize) * ncols + c as usize] = s / w;
            }
        }
        out
    };
    blur(&blur(&raw, true), false)
}

/// Stationary storm cells with a triangular hyetograph over a light
/// domain-wide drizzle, and a daytime PET cycle.
fn storm_forcing(
    plan: &DrainagePlan,
    spec: &SynthSpec,
    rng: &mut ChaCha8Rng,
) -> Result<ForcingSeries> {
    let (nrows, ncols, n_t) = (spec.nrows, spec.ncols, spec.n_steps);
    let n = nrows * ncols;
    let steps_per_hour = 3600.0 / spec.dt;
    let mut precip = vec![0.0; n_t * n];
    let intensity = Exp::new(1.0 / 3.0).map_err(|e| Error::SpecInvalid(e.to_string()))?;
    let max_dim = nrows.max(ncols) as f64;
    for t0 in 0..n_t {
        if rng.random::<f64>() >= spec.storm_rate {
            continue;
        }
        let peak: f64 = 0.5 + intensity.sample(rng);
        let duration = rng.random_range(3..=18usize);
        let (cr, cc) = (
            rng.random_range(0.0..nrows as f64),
            rng.random_range(0.0..ncols as f64),
        );
        let radius = rng.random_range(0.2 * max_dim..max_dim);
        for i in 0..duration {
            let t = t0 + i;
            if t >= n_t {
                break;
            }
            let shape = 1.0 - ((2.0 * i as f64 + 1.0) / duration as f64 - 1.0).abs();
            for &c in plan.active_cells() {
                let (r, col) = plan.coords(c);
                let d2 = (r as f64 - cr).powi(2) + (col as f64 - cc).powi(2);
                let fp = 0.15 + 0.85 * (-d2 / (2.0 * radius * radius)).exp();
                precip[t * n + c] += peak * shape * fp / steps_per_hour;
            }
        }
    }
    let mut pet = vec![0.0; n_t * n];
    for t in 0..n_t {
        let hour = (t as f64 / steps_per_hour) % 24.0;
        let day = t as f64 / steps_per_hour / 24.0;
        let season = 1.0 + 0.3 * (2.0 * std::f64::consts::PI * day / 365.0).sin();
        let diurnal = (std::f64::consts::PI * (hour - 6.0) / 12.0).sin().max(0.0);
        let v = 0.35 * season * diurnal / steps_per_hour;
        for &c in plan.active_cells() {
            pet[t * n + c] = v;
        }
    }
    ForcingSeries::new(n, precip, pet, spec.dt)
}

impl SyntheticDataset {
    /// Setup scored on every gauge with uniform weights.
    pub fn setup(&self, cost: CostConfig) -> Result<Setup> {
        let gauges = io::build_gauge_set(&self.plan, &self.registry, &self.observed)?;
        Ok(Setup {
            plan: self.plan.clone(),
            forcing: self.forcing.clone(),
            descriptors: self.descriptors.clone(),
            gauges,
            init: StateFields::default_initial(self.plan.n_cells()),
            cost,
            bounds: self.spec.bounds,
        })
    }

    /// Two equal periods covering the series.
    pub fn periods(&self) -> ([usize; 2], [usize; 2]) {
        let h = self.spec.n_steps / 2;
        ([0, h], [h, self.spec.n_steps])
    }

    /// Experiment config pointing at the files [`Self::write`] produces.
    pub fn experiment_config(
        &self,
        calibration: &CalibrationConfig,
        methods: &[Method],
    ) -> ExperimentConfig {
        let (p1, p2) = self.periods();
        ExperimentConfig {
            seed: self.seed,
            paths: PathsConfig {
                drainage: "drainage.asc".into(),
                descriptors: self
                    .raw_descriptors
                    .names
                    .iter()
                    .map(|n| PathBuf::from(format!("descriptors/{n}.asc")))
                    .collect(),
                forcing: "forcing.bin".into(),
                gauges: "gauges.csv".into(),
                discharge: "discharge.csv".into(),
            },
            model: ModelConfig {
                dt: self.spec.dt,
                ..Default::default()
            },
            bounds: self.spec.bounds,
            cost: CostConfig::default(),
            optimizer: calibration.optimizer.clone(),
            bayes: calibration.bayes.clone(),
            protocol: ProtocolConfig {
                methods: methods.to_vec(),
                donors: self.donors.clone(),
                ungauged: self.ungauged.clone(),
                p1: Some(p1),
                p2: Some(p2),
                ..Default::default()
            },
            base_dir: PathBuf::new(),
        }
    }

    /// Writes the dataset, the truth and a ready-to-run `protocol.toml`.
    pub fn write(&self, dir: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
        io::write_drainage(&self.plan, &dir.join("drainage.asc"))?;
        for (name, map) in self
            .raw_descriptors
            .names
            .iter()
            .zip(&self.raw_descriptors.maps)
        {
            io::write_map(
                &self.plan,
                map,
                &dir.join(format!("descriptors/{name}.asc")),
            )?;
        }
        io::write_forcing_bin(
            &self.forcing,
            self.plan.nrows(),
            self.plan.ncols(),
            &dir.join("forcing.bin"),
        )?;
        io::write_gauge_registry(&self.registry, &dir.join("gauges.csv"))?;
        io::write_discharge(&self.observed, &dir.join("discharge.csv"))?;
        for (k, name) in PARAM_NAMES.iter().enumerate() {
            io::write_map(
                &self.plan,
                &self.truth.params.maps[k],
                &dir.join(format!("truth/{name}.asc")),
            )?;
        }
        crate::mapping::write_control(
            &self.truth.control,
            &self.spec.bounds,
            &dir.join("truth/control.json"),
        )?;
        let cfg_path = dir.join("protocol.toml");
        io::write_text(&cfg_path, &cfg.to_toml())?;
        Ok(cfg_path)
    }
}
