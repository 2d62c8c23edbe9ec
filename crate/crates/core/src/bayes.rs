//! Low-dimensional Bayesian first guess: a uniform ensemble weighted by a
//! cost-based likelihood, with the sharpness picked on an L-curve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{Bounds, N_PARAMS};
use crate::setup::Setup;

/// Likelihood sharpness values scanned by the L-curve.
pub const ALPHAS: [i32; 12] = [-1, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdbConfig {
    pub n_members: usize,
    /// Sampling seed; set from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LdbConfig {
    fn default() -> Self {
        Self {
            n_members: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorDensity {
    #[default]
    Uniform,
}

/// Spatially uniform parameter sets drawn inside the bounds hypercube.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSample {
    pub members: Vec<[f64; N_PARAMS]>,
    /// Costs after any shift applied to make the minimum positive.
    pub costs: Vec<f64>,
    /// Prior density at each member.
    pub density: Vec<f64>,
    /// Amount added to the raw costs; zero unless the raw minimum was <= 0.
    pub cost_shift: f64,
}

impl EnsembleSample {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn j_min(&self) -> f64 {
        self.costs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Stores raw costs, shifting them by `1 - J_min` when `J_min <= 0`.
    pub fn set_costs(&mut self, raw: Vec<f64>) -> Result<()> {
        if raw.len() != self.members.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} costs for {} members",
                raw.len(),
                self.members.len()
            )));
        }
        if raw.iter().any(|j| !j.is_finite()) {
            return Err(Error::NonFiniteCost);
        }
        let j_min = raw.iter().copied().fold(f64::INFINITY, f64::min);
        self.cost_shift = if j_min > 0.0 { 0.0 } else { 1.0 - j_min };
        self.costs = raw.into_iter().map(|j| j + self.cost_shift).collect();
        Ok(())
    }

    /// `member,cp,cft,kexc,lr,J`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("member,cp,cft,kexc,lr,J\n");
        for (i, m) in self.members.iter().enumerate() {
            let j = self
                .costs
                .get(i)
                .map_or(String::new(), |j| fmt_f64(j - self.cost_shift));
            s.push_str(&format!(
                "{i},{},{},{},{},{j}\n",
                fmt_f64(m[0]),
                fmt_f64(m[1]),
                fmt_f64(m[2]),
                fmt_f64(m[3])
            ));
        }
        s
    }
}

/// `n` points drawn uniformly, strictly inside the bounds.
pub fn sample_prior(
    bounds: &Bounds,
    n: usize,
    seed: u64,
    density: PriorDensity,
) -> Result<EnsembleSample> {
    bounds.validate()?;
    if n < 1 {
        return Err(Error::Config("ensemble size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members: Vec<[f64; N_PARAMS]> = (0..n)
        .map(|_| {
            std::array::from_fn(|k| loop {
                let v = rng.random_range(bounds.lower[k]..bounds.upper[k]);
                if v > bounds.lower[k] {
                    break v;
                }
            })
        })
        .collect();
    let f = match density {
        PriorDensity::Uniform => 1.0 / (0..N_PARAMS).map(|k| bounds.span(k)).product::<f64>(),
    };
    Ok(EnsembleSample {
        members,
        costs: Vec::new(),
        density: vec![f; n],
        cost_shift: 0.0,
    })
}

/// `exp(-2^alpha (J_i / J_min - 1)^2)`
pub fn likelihood(j: f64, j_min: f64, alpha: f64) -> Result<f64> {
    if !(j_min > 0.0) {
        return Err(Error::NonPositiveJmin(j_min));
    }
    let r = j / j_min - 1.0;
    Ok((-(alpha.exp2()) * r * r).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate {
    pub mean: [f64; N_PARAMS],
    pub var: [f64; N_PARAMS],
    /// Normalizer `sum_i L_i f_i`.
    pub k: f64,
    pub alpha: f64,
    /// Unweighted ensemble average.
    pub prior_mean: [f64; N_PARAMS],
}

/// Likelihood-weighted ensemble mean and variance.
pub fn posterior_mean_var(sample: &EnsembleSample, alpha: f64) -> Result<PosteriorEstimate> {
    let n = sample.len();
    if n == 0 || sample.costs.len() != n {
        return Err(Error::DimensionMismatch("ensemble has no costs".into()));
    }
    let j_min = sample.j_min();
    let w: Vec<f64> = sample
        .costs
        .iter()
        .zip(&sample.density)
        .map(|(&j, &f)| Ok(likelihood(j, j_min, alpha)? * f))
        .collect::<Result<_>>()?;
    let k: f64 = w.iter().sum();
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let mut mean = [0.0; N_PARAMS];
    let mut prior_mean = [0.0; N_PARAMS];
    for (m, wi) in sample.members.iter().zip(&w) {
        for c in 0..N_PARAMS {
            mean[c] += wi * m[c];
            prior_mean[c] += m[c];
        }
    }
    for c in 0..N_PARAMS {
        mean[c] /= k;
        prior_mean[c] /= n as f64;
    }
    let mut var = [0.0; N_PARAMS];
    for (m, wi) in sample.members.iter().zip(&w) {
        for c in 0..N_PARAMS {
            let d = m[c] - mean[c];
            var[c] += wi * d * d;
        }
    }
    for v in &mut var {
        *v /= k;
    }
    Ok(PosteriorEstimate {
        mean,
        var,
        k,
        alpha,
        prior_mean,
    })
}

/// `sum_k (mean_k - prior_mean_k)^2 / var_k`; errors on a zero variance.
pub fn mahalanobis_distance(est: &PosteriorEstimate) -> Result<f64> {
    let (d, skipped) = mahalanobis_distance_lenient(est);
    match skipped.first() {
        Some(&component) => Err(Error::ZeroVarianceComponent { component }),
        None => Ok(d),
    }
}

/// Same sum over the components with positive variance, plus the skipped
/// component indices.
pub fn mahalanobis_distance_lenient(est: &PosteriorEstimate) -> (f64, Vec<usize>) {
    let mut d = 0.0;
    let mut skipped = Vec::new();
    for c in 0..N_PARAMS {
        let diff = est.mean[c] - est.prior_mean[c];
        if est.var[c] > 0.0 {
            d += diff * diff / est.var[c];
        } else {
            skipped.push(c);
        }
    }
    (d, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LCurveRow {
    pub alpha: i32,
    pub j: f64,
    pub d: f64,
}

/// `alpha,J,D`
pub fn lcurve_csv(rows: &[LCurveRow]) -> String {
    let mut s = String::from("alpha,J,D\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.alpha, fmt_f64(r.j), fmt_f64(r.d)));
    }
    s
}

/// Index of the corner: the row nearest the origin once both axes are
/// min-max normalized. Ties go to the earliest row.
pub fn select_corner(rows: &[LCurveRow]) -> usize {
    let norm = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        vals.into_iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect::<Vec<_>>()
    };
    let jn = norm(rows.iter().map(|r| r.j).collect());
    let dn = norm(rows.iter().map(|r| r.d).collect());
    let mut best = 0;
    let mut best_r = f64::INFINITY;
    for i in 0..rows.len() {
        let r = jn[i].hypot(dn[i]);
        if r < best_r {
            best = i;
            best_r = r;
        }
    }
    best
}

/// Scores every member with the multi-gauge cost, in parallel, in member
/// order.
pub fn cost_ensemble(setup: &Setup, sample: &mut EnsembleSample) -> Result<()> {
    let raw = sample
        .members
        .par_iter()
        .map(|m| setup.cost(&setup.uniform_params(*m)))
        .collect::<Result<Vec<_>>>()?;
    sample.set_costs(raw)
}

/// Runs the L-curve scan over [`ALPHAS`]; one forward run per alpha.
pub fn lcurve_select_alpha(
    setup: &Setup,
    sample: &EnsembleSample,
) -> Result<(i32, Vec<LCurveRow>, PosteriorEstimate)> {
    let estimates = ALPHAS
        .iter()
        .map(|&a| posterior_mean_var(sample, a as f64))
        .collect::<Result<Vec<_>>>()?;
    let costs = estimates
        .par_iter()
        .map(|e| setup.cost(&setup.uniform_params(e.mean)))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<LCurveRow> = estimates
        .iter()
        .zip(costs)
        .map(|(e, j)| LCurveRow {
            alpha: e.alpha as i32,
            j,
            d: mahalanobis_distance_lenient(e).0,
        })
        .collect();
    let i = select_corner(&rows);
    Ok((rows[i].alpha, rows, estimates[i].clone()))
}

#[derive(Debug, Clone)]
pub struct LdbResult {
    pub estimate: PosteriorEstimate,
    pub alpha: i32,
    pub curve: Vec<LCurveRow>,
    pub sample: EnsembleSample,
    /// Cost of the unweighted ensemble average.
    pub j_prior_mean: f64,
}

/// Sample, score, scan the L-curve and return the selected posterior mean.
pub fn ldb_first_guess(setup: &Setup, cfg: &LdbConfig) -> Result<LdbResult> {
    let mut sample = sample_prior(
        &setup.bounds,
        cfg.n_members,
        cfg.seed,
        PriorDensity::Uniform,
    )?;
    cost_ensemble(setup, &mut sample)?;
    let (alpha, curve, estimate) = lcurve_select_alpha(setup, &sample)?;
    let j_prior_mean = setup.cost(&setup.uniform_params(estimate.prior_mean))?;
    Ok(LdbResult {
        estimate,
        alpha,
        curve,
        sample,
        j_prior_mean,
    })
}
