//! Python bindings: load an experiment, simulate, check gradients,
//! calibrate and run the split-sample protocol.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ::hydroreg as core;
use core::adjoint::{check_gradient_fd_with, random_interior_params};
use core::bayes::ldb_first_guess;
use core::config::ExperimentConfig;
use core::mapping::{read_control, write_control, SigmoidScaler};
use core::model::{Bounds, N_PARAMS, PARAM_NAMES};
use core::optim::{calibrate, Method};
use core::protocol::{aggregate_scores, run_protocol};
use core::synth::SynthConfig;
use core::{ParameterFields, Setup};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: core::Error) -> PyErr {
    match e {
        core::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_user_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Loaded experiment: configuration plus every input, scored on all gauges.
#[pyclass(frozen, module = "hydroreg")]
struct Experiment {
    cfg: ExperimentConfig,
    setup: Setup,
}

impl Experiment {
    fn params(&self, control: Option<PathBuf>) -> PyResult<ParameterFields> {
        match control {
            Some(p) => {
                let (ctrl, bounds) = read_control(&p).map_err(to_py)?;
                ctrl.to_params(&self.setup.plan, &self.setup.descriptors, bounds)
                    .map_err(to_py)
            }
            None => Ok(self.setup.uniform_params(self.setup.bounds.midpoint())),
        }
    }

    fn gauge_ids_vec(&self) -> Vec<String> {
        self.setup
            .gauges
            .gauges()
            .iter()
            .map(|g| g.id.clone())
            .collect()
    }
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (config, seed=None))]
    fn new(config: PathBuf, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = ExperimentConfig::load(&config).map_err(to_py)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let setup = cfg.load_setup().map_err(to_py)?;
        Ok(Self { cfg, setup })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.setup.plan.nrows(), self.setup.plan.ncols())
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.setup.forcing.n_steps()
    }

    #[getter]
    fn gauge_ids(&self) -> Vec<String> {
        self.gauge_ids_vec()
    }

    #[getter]
    fn descriptor_names(&self) -> Vec<String> {
        self.setup.descriptors.names.clone()
    }

    /// Discharge (m3/s) per gauge for a control file, or mid-range
    /// uniform parameters when none is given.
    #[pyo3(signature = (control=None))]
    fn simulate(
        &self,
        py: Python<'_>,
        control: Option<PathBuf>,
    ) -> PyResult<BTreeMap<String, Vec<f64>>> {
        let params = self.params(control)?;
        let sims = py
            .detach(|| self.setup.simulate_gauges(&params))
            .map_err(to_py)?;
        Ok(self.gauge_ids_vec().into_iter().zip(sims).collect())
    }

    /// NSE per gauge after the warm-up window.
    #[pyo3(signature = (control=None))]
    fn nse(&self, py: Python<'_>, control: Option<PathBuf>) -> PyResult<BTreeMap<String, f64>> {
        let params = self.params(control)?;
        let nse = py
            .detach(|| self.setup.nse_per_gauge(&params))
            .map_err(to_py)?;
        Ok(self.gauge_ids_vec().into_iter().zip(nse).collect())
    }

    /// Largest adjoint-vs-finite-difference relative error at random
    /// interior parameters.
    #[pyo3(signature = (probes=40, reject_unconverged=false))]
    fn gradcheck(&self, py: Python<'_>, probes: usize, reject_unconverged: bool) -> PyResult<f64> {
        let seed = self.cfg.seed;
        let params = random_interior_params(&self.setup.plan, self.setup.bounds, seed);
        let report = py
            .detach(|| {
                check_gradient_fd_with(
                    &self.setup,
                    &params,
                    probes,
                    seed.wrapping_add(1),
                    reject_unconverged,
                )
            })
            .map_err(to_py)?;
        Ok(report.max_rel_error())
    }

    /// Calibrates `method` on the donor gauges (all gauges when no donors
    /// are configured). Local methods need exactly one donor. Writes the
    /// control to `control_out` if given.
    #[pyo3(signature = (method, control_out=None))]
    fn calibrate(
        &self,
        py: Python<'_>,
        method: &str,
        control_out: Option<PathBuf>,
    ) -> PyResult<BTreeMap<String, Py<PyAny>>> {
        let method: Method = method.parse().map_err(to_py)?;
        let donors = &self.cfg.protocol.donors;
        let sub = if donors.is_empty() {
            self.setup.clone()
        } else {
            let g = self
                .setup
                .gauges
                .subset(&self.setup.plan, donors)
                .map_err(to_py)?;
            self.setup.with_gauges(g)
        };
        let calib = self.cfg.calibration();
        let (c, nse) = py
            .detach(|| -> core::Result<_> {
                let c = calibrate(method, &sub, &calib)?;
                let nse = sub.nse_per_gauge(&c.params)?;
                Ok((c, nse))
            })
            .map_err(to_py)?;
        if let Some(p) = control_out {
            write_control(&c.control, &sub.bounds, &p).map_err(to_py)?;
        }
        let ids: Vec<String> = sub.gauges.gauges().iter().map(|g| g.id.clone()).collect();
        let mut out = BTreeMap::new();
        out.insert(
            "method".into(),
            method.name().into_pyobject(py)?.into_any().unbind(),
        );
        out.insert(
            "j".into(),
            c.report.final_j().into_pyobject(py)?.into_any().unbind(),
        );
        out.insert(
            "iterations".into(),
            c.report.iterations.into_pyobject(py)?.into_any().unbind(),
        );
        out.insert(
            "stop_reason".into(),
            c.report
                .stop_reason
                .to_string()
                .into_pyobject(py)?
                .into_any()
                .unbind(),
        );
        out.insert(
            "j_trajectory".into(),
            c.report
                .j_trajectory
                .clone()
                .into_pyobject(py)?
                .into_any()
                .unbind(),
        );
        let nse: BTreeMap<String, f64> = ids.into_iter().zip(nse).collect();
        out.insert("nse".into(), nse.into_pyobject(py)?.into_any().unbind());
        Ok(out)
    }

    /// Bayesian first guess: `(alpha, {param: value})`.
    fn first_guess(&self, py: Python<'_>) -> PyResult<(i32, BTreeMap<String, f64>)> {
        let bayes = self.cfg.calibration().bayes;
        let res = py
            .detach(|| ldb_first_guess(&self.setup, &bayes))
            .map_err(to_py)?;
        let values = PARAM_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(res.estimate.mean)
            .collect();
        Ok((res.alpha, values))
    }

    /// Runs the two-fold protocol into `out_dir`; returns the failed
    /// `(method, fold)` pairs.
    fn protocol(&self, py: Python<'_>, out_dir: PathBuf) -> PyResult<Vec<(String, String)>> {
        let outcome = py
            .detach(|| run_protocol(&self.cfg, &self.setup, &out_dir))
            .map_err(to_py)?;
        Ok(outcome
            .manifest
            .failures
            .into_iter()
            .map(|f| (f.method, f.fold))
            .collect())
    }
}

/// Generates a synthetic twin into `out_dir` and returns the path of its
/// `protocol.toml`. `config` is TOML text in the `synth` schema.
#[pyfunction]
#[pyo3(signature = (out_dir, config=None, seed=None))]
fn synth(
    py: Python<'_>,
    out_dir: PathBuf,
    config: Option<&str>,
    seed: Option<u64>,
) -> PyResult<PathBuf> {
    let mut cfg = match config {
        Some(text) => SynthConfig::from_toml_str(text).map_err(to_py)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (_, path) = py.detach(|| cfg.run(&out_dir)).map_err(to_py)?;
    Ok(path)
}

/// Per-method, per-phase score statistics of a protocol bundle.
#[pyfunction]
fn report(bundle: PathBuf) -> PyResult<Vec<BTreeMap<String, Py<PyAny>>>> {
    let stats = aggregate_scores(&bundle).map_err(to_py)?;
    Python::attach(|py| {
        stats
            .into_iter()
            .map(|s| {
                let mut row = BTreeMap::new();
                row.insert(
                    "method".to_string(),
                    s.method.into_pyobject(py)?.into_any().unbind(),
                );
                row.insert(
                    "phase".to_string(),
                    s.phase.into_pyobject(py)?.into_any().unbind(),
                );
                row.insert("n".to_string(), s.n.into_pyobject(py)?.into_any().unbind());
                for (k, v) in [
                    ("min", s.min),
                    ("q25", s.q25),
                    ("median", s.median),
                    ("q75", s.q75),
                    ("max", s.max),
                    ("mean", s.mean),
                ] {
                    row.insert(k.to_string(), v.into_pyobject(py)?.into_any().unbind());
                }
                Ok(row)
            })
            .collect()
    })
}

/// `exp(-2^alpha (j / j_min - 1)^2)`
#[pyfunction]
fn likelihood(j: f64, j_min: f64, alpha: f64) -> PyResult<f64> {
    core::bayes::likelihood(j, j_min, alpha).map_err(to_py)
}

fn scaler(lower: f64, upper: f64) -> PyResult<SigmoidScaler> {
    let bounds = Bounds {
        lower: [lower; N_PARAMS],
        upper: [upper; N_PARAMS],
    };
    bounds.validate().map_err(to_py)?;
    Ok(SigmoidScaler::new(bounds))
}

/// Maps a real number into the open interval `(lower, upper)`.
#[pyfunction]
fn sigmoid_scale(y: f64, lower: f64, upper: f64) -> PyResult<f64> {
    Ok(scaler(lower, upper)?.scale(y, 0))
}

/// Inverse of [`sigmoid_scale`].
#[pyfunction]
fn inverse_sigmoid(z: f64, lower: f64, upper: f64) -> PyResult<f64> {
    scaler(lower, upper)?.inverse(z, 0).map_err(to_py)
}

#[pymodule]
fn hydroreg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Experiment>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid_scale, m)?)?;
    m.add_function(wrap_pyfunction!(inverse_sigmoid, m)?)?;
    m.add(
        "METHODS",
        Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>(),
    )?;
    m.add("PARAM_NAMES", PARAM_NAMES.to_vec())?;
    Ok(())
}
