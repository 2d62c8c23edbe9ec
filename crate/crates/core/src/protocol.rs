//! Split-sample comparison protocol: every method is calibrated on the donor
//! gauges of one period and scored on both periods at donor and
//! pseudo-ungauged gauges, in both fold directions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bayes::lcurve_csv;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{self, fmt_f64};
use crate::mapping::control_to_json;
use crate::model::{ParameterFields, N_PARAMS, PARAM_NAMES};
use crate::optim::{calibrate, Calibration, CalibrationConfig, Method};
use crate::setup::Setup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Phase {
    Cal,
    TemporalVal,
    SpatialVal,
    SpatiotemporalVal,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::Cal,
        Phase::TemporalVal,
        Phase::SpatialVal,
        Phase::SpatiotemporalVal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Cal => "cal",
            Phase::TemporalVal => "temporal_val",
            Phase::SpatialVal => "spatial_val",
            Phase::SpatiotemporalVal => "spatiotemporal_val",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub gauge_id: String,
    /// Period the score was computed on.
    pub period: String,
    pub phase: Phase,
    pub nse: f64,
}

/// `gauge_id,period,phase,nse`
pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from("gauge_id,period,phase,nse\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.gauge_id,
            r.period,
            r.phase.name(),
            fmt_f64(r.nse)
        );
    }
    s
}

/// One calibration period with the other period held out.
#[derive(Debug, Clone)]
pub struct Fold {
    pub cal_name: String,
    pub cal: [usize; 2],
    pub val_name: String,
    pub val: [usize; 2],
}

impl Fold {
    pub fn both(p1: [usize; 2], p2: [usize; 2]) -> [Fold; 2] {
        [
            Fold {
                cal_name: "P1".into(),
                cal: p1,
                val_name: "P2".into(),
                val: p2,
            },
            Fold {
                cal_name: "P2".into(),
                cal: p2,
                val_name: "P1".into(),
                val: p1,
            },
        ]
    }
}

/// Result of one method on one fold.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub fold: String,
    /// One calibration for regional methods, one per donor for local ones.
    pub calibrations: Vec<(Option<String>, Calibration)>,
    pub scores: Vec<ScoreRow>,
}

fn nse_rows(
    setup: &Setup,
    params: &ParameterFields,
    period: &str,
    phase: Phase,
) -> Result<Vec<ScoreRow>> {
    let nse = setup.nse_per_gauge(params)?;
    Ok(setup
        .gauges
        .gauges()
        .iter()
        .zip(nse)
        .map(|(g, nse)| ScoreRow {
            gauge_id: g.id.clone(),
            period: period.to_string(),
            phase,
            nse,
        })
        .collect())
}

/// Calibrates and scores one method on one fold.
pub fn run_method(
    method: Method,
    setup: &Setup,
    donors: &[String],
    ungauged: &[String],
    fold: &Fold,
    cfg: &CalibrationConfig,
) -> Result<MethodRun> {
    let cal_win = setup.window(fold.cal[0], fold.cal[1]);
    let val_win = setup.window(fold.val[0], fold.val[1]);
    let subset = |win: &Setup, ids: &[String]| -> Result<Setup> {
        Ok(win.with_gauges(win.gauges.subset(&win.plan, ids)?))
    };
    let mut scores = Vec::new();
    let mut calibrations = Vec::new();
    if method.is_local() {
        let runs = donors
            .par_iter()
            .map(|id| {
                let one = std::slice::from_ref(id);
                let cal = subset(&cal_win, one)?;
                let c = calibrate(method, &cal, cfg)?;
                let mut rows = nse_rows(&cal, &c.params, &fold.cal_name, Phase::Cal)?;
                rows.extend(nse_rows(
                    &subset(&val_win, one)?,
                    &c.params,
                    &fold.val_name,
                    Phase::TemporalVal,
                )?);
                Ok((id.clone(), c, rows))
            })
            .collect::<Result<Vec<_>>>()?;
        for (id, c, rows) in runs {
            scores.extend(rows);
            calibrations.push((Some(id), c));
        }
    } else {
        let cal = subset(&cal_win, donors)?;
        let c = calibrate(method, &cal, cfg)?;
        scores.extend(nse_rows(&cal, &c.params, &fold.cal_name, Phase::Cal)?);
        scores.extend(nse_rows(
            &subset(&val_win, donors)?,
            &c.params,
            &fold.val_name,
            Phase::TemporalVal,
        )?);
        if !ungauged.is_empty() {
            scores.extend(nse_rows(
                &subset(&cal_win, ungauged)?,
                &c.params,
                &fold.cal_name,
                Phase::SpatialVal,
            )?);
            scores.extend(nse_rows(
                &subset(&val_win, ungauged)?,
                &c.params,
                &fold.val_name,
                Phase::SpatiotemporalVal,
            )?);
        }
        calibrations.push((None, c));
    }
    Ok(MethodRun {
        method,
        fold: fold.cal_name.clone(),
        calibrations,
        scores,
    })
}

/// Median, mean and population standard deviation over active cells.
pub fn map_summary(setup: &Setup, map: &[f64]) -> (f64, f64, f64) {
    let v: Vec<f64> = setup.plan.active_cells().iter().map(|&c| map[c]).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
    (quantile(&v, 0.5), mean, var.sqrt())
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// `(theta_P2 - theta_P1) / (u - l)` per parameter.
pub fn stability_maps(
    setup: &Setup,
    p1: &ParameterFields,
    p2: &ParameterFields,
) -> [Vec<f64>; N_PARAMS] {
    std::array::from_fn(|k| {
        let span = setup.bounds.span(k);
        let mut out = vec![0.0; setup.n_cells()];
        for &c in setup.plan.active_cells() {
            out[c] = (p2.maps[k][c] - p1.maps[k][c]) / span;
        }
        out
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub methods: Vec<String>,
    pub donors: Vec<String>,
    pub ungauged: Vec<String>,
    pub p1: [usize; 2],
    pub p2: [usize; 2],
    pub partial: bool,
    pub failures: Vec<Failure>,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub method: String,
    pub fold: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub runs: Vec<MethodRun>,
    pub manifest: Manifest,
}

impl ProtocolOutcome {
    pub fn run(&self, method: Method, fold: &str) -> Option<&MethodRun> {
        self.runs
            .iter()
            .find(|r| r.method == method && r.fold == fold)
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let digest = Sha256::digest(cfg.to_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs every configured method on both folds and writes the bundle to
/// `out_dir`. Failing methods are recorded in the manifest and skipped.
pub fn run_protocol(
    cfg: &ExperimentConfig,
    setup: &Setup,
    out_dir: &Path,
) -> Result<ProtocolOutcome> {
    let (p1, p2) = cfg.validate_protocol(setup)?;
    let calib = cfg.calibration();
    let p = &cfg.protocol;
    let folds = Fold::both(p1, p2);
    let jobs: Vec<(Method, &Fold)> = p
        .methods
        .iter()
        .flat_map(|&m| folds.iter().map(move |f| (m, f)))
        .collect();
    let results: Vec<(Method, String, Result<MethodRun>)> = jobs
        .par_iter()
        .map(|&(m, f)| {
            (
                m,
                f.cal_name.clone(),
                run_method(m, setup, &p.donors, &p.ungauged, f, &calib),
            )
        })
        .collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (method, fold, r) in results {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => failures.push(Failure {
                method: method.name().into(),
                fold,
                error: e.to_string(),
            }),
        }
    }
    let artifacts = write_bundle(setup, &runs, out_dir)?;
    let manifest = Manifest {
        format_version: 1,
        config_sha256: config_hash(cfg),
        seed: cfg.seed,
        methods: p.methods.iter().map(|m| m.name().to_string()).collect(),
        donors: p.donors.clone(),
        ungauged: p.ungauged.clone(),
        p1,
        p2,
        partial: !failures.is_empty(),
        failures,
        artifacts,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    io::write_text(&out_dir.join("manifest.json"), &text)?;
    io::write_text(&out_dir.join("config.toml"), &cfg.to_toml())?;
    Ok(ProtocolOutcome { runs, manifest })
}

fn write_bundle(setup: &Setup, runs: &[MethodRun], out: &Path) -> Result<Vec<String>> {
    let mut written: Vec<PathBuf> = Vec::new();
    let mut put = |rel: String, text: String| -> Result<()> {
        let path = out.join(&rel);
        io::write_text(&path, &text)?;
        written.push(PathBuf::from(rel));
        Ok(())
    };

    let mut by_method: BTreeMap<&str, Vec<&MethodRun>> = BTreeMap::new();
    for r in runs {
        by_method.entry(r.method.name()).or_default().push(r);
    }
    let mut summary = String::from("method,period,param,median,mean,std\n");
    for (name, method_runs) in &by_method {
        let mut rows: Vec<ScoreRow> = method_runs.iter().flat_map(|r| r.scores.clone()).collect();
        rows.sort_by(|a, b| {
            (a.phase, &a.period, &a.gauge_id).cmp(&(b.phase, &b.period, &b.gauge_id))
        });
        put(format!("scores/{name}.csv"), scores_csv(&rows))?;

        for run in method_runs {
            for (gauge, c) in &run.calibrations {
                let tag = match gauge {
                    Some(g) => format!("{name}_{}_{g}", run.fold),
                    None => format!("{name}_{}", run.fold),
                };
                for (k, pname) in PARAM_NAMES.iter().enumerate() {
                    let asc = io::AsciiGrid::from_plan(&setup.plan, &c.params.maps[k]).to_text();
                    put(format!("params/{tag}_{pname}.asc"), asc)?;
                }
                put(format!("reports/{tag}.csv"), c.report.to_csv())?;
                put(
                    format!("controls/{tag}.json"),
                    control_to_json(&c.control, &setup.bounds),
                )?;
                if gauge.is_none() {
                    for (k, pname) in PARAM_NAMES.iter().enumerate() {
                        let (med, mean, sd) = map_summary(setup, &c.params.maps[k]);
                        let _ = writeln!(
                            summary,
                            "{name},{},{pname},{},{},{}",
                            run.fold,
                            fmt_f64(med),
                            fmt_f64(mean),
                            fmt_f64(sd)
                        );
                    }
                    if let Some(fg) = c.first_guess {
                        for (k, pname) in PARAM_NAMES.iter().enumerate() {
                            let v = fmt_f64(fg[k]);
                            let _ = writeln!(
                                summary,
                                "{name}_first_guess,{},{pname},{v},{v},0",
                                run.fold
                            );
                        }
                    }
                }
                if let Some(ldb) = &c.ldb {
                    let suffix = if run.fold == "P1" {
                        String::new()
                    } else {
                        format!("_{}", run.fold)
                    };
                    put(format!("lcurve{suffix}.csv"), lcurve_csv(&ldb.curve))?;
                    put(format!("ensemble_{}.csv", run.fold), ldb.sample.to_csv())?;
                }
            }
        }

        let regional = |fold: &str| {
            method_runs
                .iter()
                .find(|r| r.fold == fold)
                .and_then(|r| r.calibrations.first())
                .filter(|(g, _)| g.is_none())
                .map(|(_, c)| &c.params)
        };
        if let (Some(a), Some(b)) = (regional("P1"), regional("P2")) {
            let maps = stability_maps(setup, a, b);
            for (k, pname) in PARAM_NAMES.iter().enumerate() {
                let asc = io::AsciiGrid::from_plan(&setup.plan, &maps[k]).to_text();
                put(format!("stability/{name}_{pname}.asc"), asc)?;
            }
        }
    }
    put("summary.csv".into(), summary)?;
    let mut names: Vec<String> = written
        .iter()
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    names.sort();
    Ok(names)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseStats {
    pub method: String,
    pub phase: String,
    pub n: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

/// Boxplot statistics of every `scores/*.csv` in a bundle, one row per
/// method and phase.
pub fn aggregate_scores(bundle: &Path) -> Result<Vec<PhaseStats>> {
    let dir = bundle.join("scores");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let method = f.file_stem().unwrap().to_string_lossy().into_owned();
        let mut per_phase: BTreeMap<Phase, Vec<f64>> = BTreeMap::new();
        let mut rdr = csv::Reader::from_path(&f).map_err(|e| Error::parse(&f, e.to_string()))?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::parse(&f, e.to_string()))?;
            let phase_name = rec.get(2).unwrap_or("");
            let phase = Phase::ALL
                .into_iter()
                .find(|p| p.name() == phase_name)
                .ok_or_else(|| Error::parse(&f, format!("unknown phase '{phase_name}'")))?;
            let nse: f64 = rec
                .get(3)
                .unwrap_or("")
                .parse()
                .map_err(|_| Error::parse(&f, "bad nse value"))?;
            per_phase.entry(phase).or_default().push(nse);
        }
        for (phase, v) in per_phase {
            out.push(PhaseStats {
                method: method.clone(),
                phase: phase.name().into(),
                n: v.len(),
                min: quantile(&v, 0.0),
                q25: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q75: quantile(&v, 0.75),
                max: quantile(&v, 1.0),
                mean: v.iter().sum::<f64>() / v.len() as f64,
            });
        }
    }
    Ok(out)
}

/// `method,phase,n,min,q25,median,q75,max,mean`
pub fn phase_stats_csv(stats: &[PhaseStats]) -> String {
    let mut s = String::from("method,phase,n,min,q25,median,q75,max,mean\n");
    for r in stats {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.phase,
            r.n,
            fmt_f64(r.min),
            fmt_f64(r.q25),
            fmt_f64(r.median),
            fmt_f64(r.q75),
            fmt_f64(r.max),
            fmt_f64(r.mean)
        );
    }
    s
}
