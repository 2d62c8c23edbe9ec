//! Calibration cost `J = J_obs + gamma * J_reg` from gauge discharge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GaugeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `1 - NSE`
    #[default]
    Nse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    #[default]
    None,
    /// `||rho - rho*||²` to the background control.
    TikhonovToBackground,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub gamma: f64,
    pub metric: Metric,
    /// Fraction of the series excluded from the metric when
    /// `warmup_steps` is unset.
    pub warmup_fraction: f64,
    pub warmup_steps: Option<usize>,
    pub reg_kind: RegKind,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            metric: Metric::Nse,
            warmup_fraction: 0.1,
            warmup_steps: None,
            reg_kind: RegKind::None,
        }
    }
}

impl CostConfig {
    pub fn warmup(&self, n_steps: usize) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.warmup_fraction * n_steps as f64).floor() as usize)
    }

    pub fn validate(&self, n_steps: usize) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1)".into()));
        }
        if self.warmup(n_steps) >= n_steps {
            return Err(Error::Config(format!(
                "warm-up of {} steps leaves nothing of a {n_steps}-step series",
                self.warmup(n_steps)
            )));
        }
        Ok(())
    }
}

fn check_pair(sim: &[f64], obs: &[f64]) -> Result<()> {
    if sim.len() != obs.len() || sim.len() < 2 {
        return Err(Error::LengthMismatch {
            sim: sim.len(),
            obs: obs.len(),
        });
    }
    Ok(())
}

fn obs_variance_sum(obs: &[f64]) -> Result<f64> {
    let mean = obs.iter().sum::<f64>() / obs.len() as f64;
    let v: f64 = obs.iter().map(|o| (o - mean) * (o - mean)).sum();
    if !(v > 0.0) {
        return Err(Error::ZeroVarianceObs);
    }
    Ok(v)
}

/// Nash-Sutcliffe efficiency.
pub fn nse(sim: &[f64], obs: &[f64]) -> Result<f64> {
    check_pair(sim, obs)?;
    let v = obs_variance_sum(obs)?;
    let err: f64 = sim.iter().zip(obs).map(|(s, o)| (o - s) * (o - s)).sum();
    Ok(1.0 - err / v)
}

/// `1 - NSE` and its gradient with respect to `sim`.
pub fn nse_cost_gradient(sim: &[f64], obs: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(sim, obs)?;
    let v = obs_variance_sum(obs)?;
    let err: f64 = sim.iter().zip(obs).map(|(s, o)| (o - s) * (o - s)).sum();
    let grad = sim
        .iter()
        .zip(obs)
        .map(|(s, o)| 2.0 * (s - o) / v)
        .collect();
    Ok((err / v, grad))
}

fn annotate(gauge: &str, e: Error) -> Error {
    Error::Gauge {
        gauge: gauge.to_string(),
        source: Box::new(e),
    }
}

/// `sum_g w_g (1 - NSE_g)` over the post-warm-up window.
///
/// `sims[g]` is the full simulated series at gauge `g`.
pub fn j_obs(gauges: &GaugeSet, sims: &[Vec<f64>], cfg: &CostConfig) -> Result<f64> {
    if sims.len() != gauges.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} simulated series for {} gauges",
            sims.len(),
            gauges.len()
        )));
    }
    let mut j = 0.0;
    for (g, sim) in gauges.gauges().iter().zip(sims) {
        let w0 = cfg.warmup(sim.len()).min(sim.len());
        let obs = g.observed.get(w0..).unwrap_or(&[]);
        let score = nse(&sim[w0..], obs).map_err(|e| annotate(&g.id, e))?;
        j += g.weight * (1.0 - score);
    }
    Ok(j)
}

/// `J_obs` and `dJ_obs/dQ_g(t)` per gauge over the full series (zero
/// during warm-up).
pub fn j_obs_with_gradient(
    gauges: &GaugeSet,
    sims: &[Vec<f64>],
    cfg: &CostConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if sims.len() != gauges.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} simulated series for {} gauges",
            sims.len(),
            gauges.len()
        )));
    }
    let mut j = 0.0;
    let mut grads = Vec::with_capacity(sims.len());
    for (g, sim) in gauges.gauges().iter().zip(sims) {
        let w0 = cfg.warmup(sim.len()).min(sim.len());
        let obs = g.observed.get(w0..).unwrap_or(&[]);
        let (cost, grad) = nse_cost_gradient(&sim[w0..], obs).map_err(|e| annotate(&g.id, e))?;
        // keeps the value identical to j_obs()
        let score = 1.0 - cost;
        j += g.weight * (1.0 - score);
        let mut full = vec![0.0; sim.len()];
        for (f, d) in full[w0..].iter_mut().zip(grad) {
            *f = g.weight * d;
        }
        grads.push(full);
    }
    Ok((j, grads))
}

/// Total cost with the optional Tikhonov term on the control vector.
pub fn j_total(
    rho: &[f64],
    background: Option<&[f64]>,
    j_obs: f64,
    cfg: &CostConfig,
) -> Result<f64> {
    Ok(j_obs + cfg.gamma * regularization(rho, background, cfg)?.0)
}

/// `(J_reg, dJ_reg/drho)`.
pub fn regularization(
    rho: &[f64],
    background: Option<&[f64]>,
    cfg: &CostConfig,
) -> Result<(f64, Vec<f64>)> {
    match cfg.reg_kind {
        RegKind::None => Ok((0.0, vec![0.0; rho.len()])),
        RegKind::TikhonovToBackground => {
            let bg = background.ok_or(Error::MissingBackground)?;
            if bg.len() != rho.len() {
                return Err(Error::DimensionMismatch(format!(
                    "control has {} entries, background {}",
                    rho.len(),
                    bg.len()
                )));
            }
            let mut sq = 0.0;
            let mut grad = Vec::with_capacity(rho.len());
            for (r, b) in rho.iter().zip(bg) {
                sq += (r - b) * (r - b);
                grad.push(2.0 * (r - b));
            }
            Ok((sq, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DrainagePlan, Gauge, OUTLET};
    use approx::assert_relative_eq;

    #[test]
    fn nse_examples() {
        let obs = [1.0, 2.0, 3.0];
        assert_eq!(nse(&obs, &obs).unwrap(), 1.0);
        assert_relative_eq!(nse(&[2.0, 2.0, 2.0], &obs).unwrap(), 0.0);
        assert_relative_eq!(nse(&[1.0, 1.0, 3.0], &obs).unwrap(), 0.5);
    }

    #[test]
    fn nse_errors() {
        assert!(matches!(
            nse(&[1.0, 2.0], &[3.0, 3.0]),
            Err(Error::ZeroVarianceObs)
        ));
        assert!(matches!(
            nse(&[1.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn gauge_set(n: usize, obs: Vec<Vec<f64>>) -> GaugeSet {
        let codes = vec![Some(OUTLET); n];
        let plan = DrainagePlan::new(1, n, 1.0, codes).unwrap();
        let gauges = obs
            .into_iter()
            .enumerate()
            .map(|(i, o)| Gauge {
                id: format!("g{i}"),
                cell: i,
                weight: 0.0,
                observed: o,
            })
            .collect();
        GaugeSet::uniform(&plan, gauges).unwrap()
    }

    fn no_warmup() -> CostConfig {
        CostConfig {
            warmup_steps: Some(0),
            ..Default::default()
        }
    }

    #[test]
    fn single_gauge_perfect_fit() {
        let obs = vec![1.0, 3.0, 2.0];
        let set = gauge_set(1, vec![obs.clone()]);
        assert_eq!(j_obs(&set, &[obs], &no_warmup()).unwrap(), 0.0);
    }

    #[test]
    fn three_gauges_equal_weights() {
        let obs = vec![1.0, 2.0, 3.0];
        let set = gauge_set(3, vec![obs.clone(); 3]);
        // NSEs (1, 1, 0.4): 0.4 = 1 - 1.2/2
        let third = vec![1.0, 2.0 + 1.2f64.sqrt(), 3.0];
        let j = j_obs(&set, &[obs.clone(), obs.clone(), third], &no_warmup()).unwrap();
        assert_relative_eq!(j, 0.2, max_relative = 1e-14);
    }

    #[test]
    fn climatology_everywhere_costs_one() {
        let obs = vec![1.0, 2.0, 3.0];
        let set = gauge_set(2, vec![obs.clone(); 2]);
        let j = j_obs(&set, &[vec![2.0; 3], vec![2.0; 3]], &no_warmup()).unwrap();
        assert_relative_eq!(j, 1.0);
    }

    #[test]
    fn gauge_errors_carry_id() {
        let set = gauge_set(1, vec![vec![1.0, 1.0]]);
        let err = j_obs(&set, &[vec![0.0, 1.0]], &no_warmup()).unwrap_err();
        assert!(matches!(err, Error::Gauge { ref gauge, .. } if gauge == "g0"));
    }

    #[test]
    fn warmup_is_excluded() {
        let obs = vec![100.0, 1.0, 2.0, 3.0];
        let set = gauge_set(1, vec![obs]);
        let cfg = CostConfig {
            warmup_steps: Some(1),
            ..Default::default()
        };
        let j = j_obs(&set, &[vec![-5.0, 1.0, 2.0, 3.0]], &cfg).unwrap();
        assert_eq!(j, 0.0);
        assert_eq!(CostConfig::default().warmup(1440), 144);
    }

    #[test]
    fn j_total_cases() {
        let cfg = CostConfig::default();
        assert_eq!(j_total(&[1.0], None, 0.3, &cfg).unwrap(), 0.3);
        let tk = CostConfig {
            gamma: 1.0,
            reg_kind: RegKind::TikhonovToBackground,
            ..Default::default()
        };
        assert_eq!(
            j_total(&[1.0, 2.0], Some(&[1.0, 2.0]), 0.3, &tk).unwrap(),
            0.3
        );
        let half = CostConfig { gamma: 0.5, ..tk };
        let j = j_total(&[1.0, 1.0], Some(&[0.0, 0.0]), 0.3, &half).unwrap();
        assert_relative_eq!(j, 1.3, max_relative = 1e-15);
        assert!(matches!(
            j_total(&[1.0], None, 0.3, &tk),
            Err(Error::MissingBackground)
        ));
    }

    #[test]
    fn gradient_matches_value_and_differences() {
        let obs = vec![0.5, 2.0, 1.0, 4.0, 3.0];
        let set = gauge_set(2, vec![obs.clone(), obs.clone()]);
        let sims = vec![vec![0.7, 1.0, 1.5, 3.0, 2.0], vec![0.1, 2.5, 0.5, 4.5, 3.5]];
        let cfg = CostConfig {
            warmup_steps: Some(1),
            ..Default::default()
        };
        let (j, grads) = j_obs_with_gradient(&set, &sims, &cfg).unwrap();
        assert_eq!(j.to_bits(), j_obs(&set, &sims, &cfg).unwrap().to_bits());
        assert_eq!(grads[0][0], 0.0);
        let h = 1e-6;
        for g in 0..2 {
            for t in 0..5 {
                let mut up = sims.clone();
                up[g][t] += h;
                let mut dn = sims.clone();
                dn[g][t] -= h;
                let fd =
                    (j_obs(&set, &up, &cfg).unwrap() - j_obs(&set, &dn, &cfg).unwrap()) / (2.0 * h);
                assert!((fd - grads[g][t]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gauge_order_does_not_matter() {
        let a = vec![1.0, 2.0, 4.0];
        let b = vec![3.0, 1.0, 0.0];
        let sa = vec![1.5, 2.0, 3.0];
        let sb = vec![2.0, 1.0, 1.0];
        let j1 = j_obs(
            &gauge_set(2, vec![a.clone(), b.clone()]),
            &[sa.clone(), sb.clone()],
            &no_warmup(),
        )
        .unwrap();
        let j2 = j_obs(&gauge_set(2, vec![b, a]), &[sb, sa], &no_warmup()).unwrap();
        assert_relative_eq!(j1, j2, max_relative = 1e-15);
    }
}
