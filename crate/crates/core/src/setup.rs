use crate::adjoint::{self, GradientFields};
use crate::error::Result;
use crate::grid::{DescriptorStack, DrainagePlan, GaugeSet};
use crate::model::{self, Bounds, ForcingSeries, ParameterFields, StateFields};
use crate::objective::{self, CostConfig};

/// Everything needed to evaluate the calibration cost for a parameter set.
#[derive(Debug, Clone)]
pub struct Setup {
    pub plan: DrainagePlan,
    pub forcing: ForcingSeries,
    /// Normalized descriptors.
    pub descriptors: DescriptorStack,
    pub gauges: GaugeSet,
    pub init: StateFields,
    pub cost: CostConfig,
    pub bounds: Bounds,
}

impl Setup {
    pub fn n_cells(&self) -> usize {
        self.plan.n_cells()
    }

    pub fn uniform_params(&self, values: [f64; model::N_PARAMS]) -> ParameterFields {
        ParameterFields::uniform(self.n_cells(), values, self.bounds)
    }

    /// Discharge at every gauge.
    pub fn simulate_gauges(&self, params: &ParameterFields) -> Result<Vec<Vec<f64>>> {
        model::simulate_at(
            &self.plan,
            &self.forcing,
            params,
            &self.init,
            &self.gauges.cells(),
        )
    }

    /// `J_obs` for a parameter set.
    pub fn cost(&self, params: &ParameterFields) -> Result<f64> {
        let sims = self.simulate_gauges(params)?;
        objective::j_obs(&self.gauges, &sims, &self.cost)
    }

    pub fn cost_and_gradient(&self, params: &ParameterFields) -> Result<(f64, GradientFields)> {
        adjoint::gradient_theta(
            &self.plan,
            &self.forcing,
            params,
            &self.init,
            &self.gauges,
            &self.cost,
        )
    }

    /// Per-gauge NSE for a parameter set.
    pub fn nse_per_gauge(&self, params: &ParameterFields) -> Result<Vec<f64>> {
        let sims = self.simulate_gauges(params)?;
        let mut out = Vec::with_capacity(sims.len());
        for (g, sim) in self.gauges.gauges().iter().zip(&sims) {
            let w0 = self.cost.warmup(sim.len());
            out.push(objective::nse(&sim[w0..], &g.observed[w0..])?);
        }
        Ok(out)
    }

    /// Same setup scored against another gauge set.
    pub fn with_gauges(&self, gauges: GaugeSet) -> Self {
        Self {
            gauges,
            ..self.clone()
        }
    }

    /// Timesteps `[start, end)`, restarting from the setup's initial states.
    pub fn window(&self, start: usize, end: usize) -> Self {
        Self {
            forcing: self.forcing.window(start, end),
            gauges: self.gauges.window(start, end),
            ..self.clone()
        }
    }
}
