//! Gridded GR-like rainfall-runoff model.
//!
//! Each active cell carries a production store and a transfer store with a
//! groundwater exchange term; local runoff is then routed cell to cell
//! through linear reservoirs following the drainage plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DrainagePlan;

pub const N_PARAMS: usize = 4;
pub const PARAM_NAMES: [&str; N_PARAMS] = ["cp", "cft", "kexc", "lr"];

/// Exponent of the normalized transfer level in the exchange flux.
const EXCHANGE_EXPONENT: f64 = 3.5;
/// Share of effective rainfall routed through the transfer store.
const TRANSFER_SPLIT: f64 = 0.9;

/// Per-parameter `(lower, upper)` bounds, ordered as [`PARAM_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: [f64; N_PARAMS],
    pub upper: [f64; N_PARAMS],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            lower: [1.0, 1.0, -50.0, 1.0],
            upper: [2000.0, 1000.0, 50.0, 1000.0],
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        for k in 0..N_PARAMS {
            if !(self.upper[k] > self.lower[k])
                || !self.lower[k].is_finite()
                || !self.upper[k].is_finite()
            {
                return Err(Error::Config(format!(
                    "bounds for {} must satisfy lower < upper, got [{}, {}]",
                    PARAM_NAMES[k], self.lower[k], self.upper[k]
                )));
            }
        }
        Ok(())
    }

    pub fn span(&self, k: usize) -> f64 {
        self.upper[k] - self.lower[k]
    }

    pub fn midpoint(&self) -> [f64; N_PARAMS] {
        std::array::from_fn(|k| 0.5 * (self.lower[k] + self.upper[k]))
    }

    pub fn clamp(&self, k: usize, v: f64) -> f64 {
        v.clamp(self.lower[k], self.upper[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellParams {
    /// Production store capacity (mm).
    pub cp: f64,
    /// Transfer store capacity (mm).
    pub cft: f64,
    /// Exchange coefficient (mm per timestep, signed).
    pub kexc: f64,
    /// Routing reservoir constant (minutes).
    pub lr: f64,
}

impl CellParams {
    pub fn from_array(v: [f64; N_PARAMS]) -> Self {
        Self {
            cp: v[0],
            cft: v[1],
            kexc: v[2],
            lr: v[3],
        }
    }

    pub fn to_array(self) -> [f64; N_PARAMS] {
        [self.cp, self.cft, self.kexc, self.lr]
    }
}

/// The four distributed parameter maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterFields {
    pub maps: [Vec<f64>; N_PARAMS],
    pub bounds: Bounds,
}

impl ParameterFields {
    pub fn uniform(n_cells: usize, values: [f64; N_PARAMS], bounds: Bounds) -> Self {
        Self {
            maps: std::array::from_fn(|k| vec![values[k]; n_cells]),
            bounds,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.maps[0].len()
    }

    pub fn cell(&self, c: usize) -> CellParams {
        CellParams {
            cp: self.maps[0][c],
            cft: self.maps[1][c],
            kexc: self.maps[2][c],
            lr: self.maps[3][c],
        }
    }

    /// Checks every active cell against the bounds.
    pub fn validate(&self, plan: &DrainagePlan) -> Result<()> {
        for (k, map) in self.maps.iter().enumerate() {
            if map.len() != plan.n_cells() {
                return Err(Error::DimensionMismatch(format!(
                    "parameter map {} has {} cells, expected {}",
                    PARAM_NAMES[k],
                    map.len(),
                    plan.n_cells()
                )));
            }
            for &c in plan.active_cells() {
                let v = map[c];
                if !(v >= self.bounds.lower[k] && v <= self.bounds.upper[k]) {
                    return Err(Error::ParameterOutOfBounds {
                        param: PARAM_NAMES[k],
                        value: v,
                        lower: self.bounds.lower[k],
                        upper: self.bounds.upper[k],
                        cell: c,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Model states over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFields {
    /// Production store level as a fraction of `cp`.
    pub hp: Vec<f64>,
    /// Transfer store level as a fraction of `cft`.
    pub hft: Vec<f64>,
    /// Routing reservoir volume (m³).
    pub hlr: Vec<f64>,
}

impl StateFields {
    pub fn uniform(n_cells: usize, hp: f64, hft: f64, hlr: f64) -> Self {
        Self {
            hp: vec![hp; n_cells],
            hft: vec![hft; n_cells],
            hlr: vec![hlr; n_cells],
        }
    }

    /// Half-full conceptual stores, empty routing reservoirs.
    pub fn default_initial(n_cells: usize) -> Self {
        Self::uniform(n_cells, 0.5, 0.5, 0.0)
    }
}

/// Rainfall and potential evapotranspiration, time-major full grids.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingSeries {
    n_cells: usize,
    /// mm per timestep, index `t * n_cells + cell`.
    pub precip: Vec<f64>,
    /// mm per timestep.
    pub pet: Vec<f64>,
    /// Timestep length in seconds.
    pub dt: f64,
}

impl ForcingSeries {
    pub fn new(n_cells: usize, precip: Vec<f64>, pet: Vec<f64>, dt: f64) -> Result<Self> {
        if n_cells == 0 || precip.len() != pet.len() || !precip.len().is_multiple_of(n_cells) {
            return Err(Error::InvalidForcing(format!(
                "precip/pet lengths {}/{} do not match {} cells",
                precip.len(),
                pet.len(),
                n_cells
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidForcing(format!(
                "timestep must be positive, got {dt}"
            )));
        }
        for (name, v) in [("precipitation", &precip), ("evapotranspiration", &pet)] {
            if let Some(i) = v.iter().position(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::InvalidForcing(format!(
                    "{name} is {} at step {}, cell {}",
                    v[i],
                    i / n_cells,
                    i % n_cells
                )));
            }
        }
        Ok(Self {
            n_cells,
            precip,
            pet,
            dt,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.precip.len() / self.n_cells
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn precip_at(&self, t: usize) -> &[f64] {
        &self.precip[t * self.n_cells..(t + 1) * self.n_cells]
    }

    pub fn pet_at(&self, t: usize) -> &[f64] {
        &self.pet[t * self.n_cells..(t + 1) * self.n_cells]
    }

    /// Steps `[start, end)` as a new series.
    pub fn window(&self, start: usize, end: usize) -> Self {
        let n = self.n_cells;
        Self {
            n_cells: n,
            precip: self.precip[start * n..end * n].to_vec(),
            pet: self.pet[start * n..end * n].to_vec(),
            dt: self.dt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellState {
    pub hp: f64,
    pub hft: f64,
}

/// Everything one cell step produces, in mm over the timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellFluxes {
    pub state: CellState,
    pub runoff: f64,
    /// Actual evaporation, including the share that neutralized rainfall.
    pub evap: f64,
    /// Net water gained (positive) or lost through exchange.
    pub exchange: f64,
}

/// One timestep of the production/transfer/exchange physics at one cell.
///
/// Returns the new `(hp, hft)` and the local runoff in mm.
pub fn step_cell(p: f64, e: f64, state: CellState, params: &CellParams) -> (CellState, f64) {
    let f = cell_fluxes(p, e, state, params);
    (f.state, f.runoff)
}

#[inline]
pub fn cell_fluxes(p: f64, e: f64, state: CellState, params: &CellParams) -> CellFluxes {
    let CellParams { cp, cft, kexc, .. } = *params;
    let hp = state.hp;
    let hft = state.hft;

    let pn = (p - e).max(0.0);
    let en = (e - p).max(0.0);

    let (ps_frac, es_frac) = production_fractions(pn, en, hp, cp);
    let hp_new = (hp + ps_frac - es_frac).clamp(0.0, 1.0);
    let pr = pn - cp * ps_frac;

    let exch = kexc * exchange_level(hft);
    let r_raw = hft + (TRANSFER_SPLIT * pr + exch) / cft;
    let r = r_raw.clamp(0.0, 1.0);
    let overflow = (r_raw - 1.0).max(0.0) * cft;
    let direct = ((1.0 - TRANSFER_SPLIT) * pr + exch).max(0.0) + overflow;

    let hft_new = transfer_drain(r);
    let qft = cft * (r - hft_new);

    CellFluxes {
        state: CellState {
            hp: hp_new,
            hft: hft_new,
        },
        runoff: qft + direct,
        evap: p.min(e) + cp * es_frac,
        exchange: cft * (r - hft) + direct - pr,
    }
}

/// Infiltration and evaporation as fractions of `cp`.
#[inline]
fn production_fractions(pn: f64, en: f64, hp: f64, cp: f64) -> (f64, f64) {
    let ps = if pn > 0.0 {
        let tp = (pn / cp).tanh();
        (1.0 - hp * hp) * tp / (1.0 + hp * tp)
    } else {
        0.0
    };
    let es = if en > 0.0 {
        let te = (en / cp).tanh();
        hp * (2.0 - hp) * te / (1.0 + (1.0 - hp) * te)
    } else {
        0.0
    };
    (ps, es)
}

#[inline]
fn exchange_level(hft: f64) -> f64 {
    // hft^3.5
    let h2 = hft * hft;
    h2 * hft * hft.sqrt()
}

/// Transfer level after drainage, `r (1 + r^4)^(-1/4)`.
#[inline]
fn transfer_drain(r: f64) -> f64 {
    let r2 = r * r;
    r / (1.0 + r2 * r2).sqrt().sqrt()
}

/// Adjoint of [`cell_fluxes`] with respect to its states and parameters.
///
/// Takes the adjoints of `(hp_new, hft_new, runoff)` and returns those of
/// `(hp, hft)` together with `d/d(cp, cft, kexc)`. Clamps and `max` use a
/// zero sub-gradient on their inactive branch.
#[inline]
pub(crate) fn cell_adjoint(
    p: f64,
    e: f64,
    state: CellState,
    params: &CellParams,
    adj_hp_new: f64,
    adj_hft_new: f64,
    adj_runoff: f64,
) -> (f64, f64, [f64; 3]) {
    let CellParams { cp, cft, kexc, .. } = *params;
    let hp = state.hp;
    let hft = state.hft;

    // forward recomputation
    let pn = (p - e).max(0.0);
    let en = (e - p).max(0.0);
    let tp = if pn > 0.0 { (pn / cp).tanh() } else { 0.0 };
    let te = if en > 0.0 { (en / cp).tanh() } else { 0.0 };
    let a_den = 1.0 + hp * tp;
    let a = (1.0 - hp * hp) * tp / a_den;
    let b_den = 1.0 + (1.0 - hp) * te;
    let b = hp * (2.0 - hp) * te / b_den;
    let hp_raw = hp + a - b;
    let pr = pn - cp * a;
    let lvl = exchange_level(hft);
    let exch = kexc * lvl;
    let r_raw = hft + (TRANSFER_SPLIT * pr + exch) / cft;
    let r = r_raw.clamp(0.0, 1.0);
    let direct_pre = (1.0 - TRANSFER_SPLIT) * pr + exch;
    let g = transfer_drain(r);
    let r4 = r * r * r * r;
    let dg = 1.0 / (1.0 + r4).powf(1.25);

    let mut d_cp = 0.0;
    let mut d_cft = 0.0;
    let mut d_kexc = 0.0;
    let mut adj_hp = 0.0;
    let mut adj_hft = 0.0;
    let mut adj_pr = 0.0;
    let mut adj_exch = 0.0;
    let mut adj_rraw = 0.0;

    // runoff = cft (r - g(r)) + direct
    let adj_qft = adj_runoff;
    let adj_direct = adj_runoff;
    let adj_r = adj_hft_new * dg + adj_qft * cft * (1.0 - dg);
    d_cft += adj_qft * (r - g);

    if direct_pre > 0.0 {
        adj_pr += (1.0 - TRANSFER_SPLIT) * adj_direct;
        adj_exch += adj_direct;
    }
    if r_raw > 1.0 {
        adj_rraw += adj_direct * cft;
        d_cft += adj_direct * (r_raw - 1.0);
    }
    if (0.0..=1.0).contains(&r_raw) {
        adj_rraw += adj_r;
    }

    // r_raw = hft + (0.9 pr + exch) / cft
    adj_hft += adj_rraw;
    adj_pr += TRANSFER_SPLIT * adj_rraw / cft;
    adj_exch += adj_rraw / cft;
    d_cft -= adj_rraw * (TRANSFER_SPLIT * pr + exch) / (cft * cft);

    // exch = kexc hft^3.5
    d_kexc += adj_exch * lvl;
    if hft > 0.0 {
        adj_hft += adj_exch * kexc * EXCHANGE_EXPONENT * hft * hft * hft.sqrt();
    }

    // pr = pn - cp a
    d_cp -= adj_pr * a;
    let mut adj_a = -adj_pr * cp;
    let mut adj_b = 0.0;

    // hp_new = clamp(hp + a - b)
    if (0.0..=1.0).contains(&hp_raw) {
        adj_hp += adj_hp_new;
        adj_a += adj_hp_new;
        adj_b -= adj_hp_new;
    }

    if pn > 0.0 {
        let da_dhp = (-2.0 * hp * tp * a_den - (1.0 - hp * hp) * tp * tp) / (a_den * a_den);
        let da_dtp = (1.0 - hp * hp) / (a_den * a_den);
        adj_hp += adj_a * da_dhp;
        let adj_tp = adj_a * da_dtp;
        d_cp += adj_tp * (1.0 - tp * tp) * (-pn / (cp * cp));
    }
    if en > 0.0 {
        let num = hp * (2.0 - hp) * te;
        let db_dhp = ((2.0 - 2.0 * hp) * te * b_den + num * te) / (b_den * b_den);
        let db_dte = hp * (2.0 - hp) / (b_den * b_den);
        adj_hp += adj_b * db_dhp;
        let adj_te = adj_b * db_dte;
        d_cp += adj_te * (1.0 - te * te) * (-en / (cp * cp));
    }

    (adj_hp, adj_hft, [d_cp, d_cft, d_kexc])
}

/// Share of a routing reservoir released over one timestep.
#[inline]
pub fn release_fraction(lr_minutes: f64, dt: f64) -> f64 {
    -(-dt / (60.0 * lr_minutes)).exp_m1()
}

/// `d release_fraction / d lr`.
#[inline]
pub(crate) fn release_fraction_derivative(lr_minutes: f64, dt: f64) -> f64 {
    let x = dt / (60.0 * lr_minutes);
    -(-x).exp() * x / lr_minutes
}

/// Linear-reservoir routing of one timestep of local runoff.
///
/// Returns the discharge grid (m³/s) and the new reservoir volumes.
pub fn route(
    plan: &DrainagePlan,
    local_runoff: &[f64],
    hlr: &[f64],
    lr: &[f64],
    dt: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = plan.n_cells();
    let release: Vec<f64> = lr.iter().map(|&l| release_fraction(l, dt)).collect();
    let mut q = vec![0.0; n];
    let mut h = hlr.to_vec();
    let mut inflow = vec![0.0; n];
    route_step(
        plan,
        local_runoff,
        &release,
        dt,
        &mut h,
        &mut inflow,
        &mut q,
        None,
    );
    (q, h)
}

/// Routes in topological order; `inflow` is scratch and is left zeroed.
#[inline]
#[allow(clippy::too_many_arguments)]
fn route_step(
    plan: &DrainagePlan,
    local_runoff: &[f64],
    release: &[f64],
    dt: f64,
    hlr: &mut [f64],
    inflow: &mut [f64],
    q: &mut [f64],
    mut stored_out: Option<&mut [f64]>,
) {
    let area_m = plan.cell_area() * 1e-3;
    for &c in plan.topo_order() {
        let stored = hlr[c] + inflow[c] + local_runoff[c] * area_m;
        inflow[c] = 0.0;
        if let Some(s) = stored_out.as_deref_mut() {
            s[c] = stored;
        }
        let out = stored * release[c];
        q[c] = out / dt;
        hlr[c] = stored - out;
        if let Some(d) = plan.downstream(c) {
            inflow[d] += q[c] * dt;
        }
    }
}

/// Which cells get a stored discharge series.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    All,
    Cells(Vec<usize>),
}

/// Cumulative per-cell volumes (m³) over a run.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTotals {
    pub precip: Vec<f64>,
    pub evap: Vec<f64>,
    pub exchange: Vec<f64>,
    pub outflow: Vec<f64>,
}

/// Water balance of one catchment (m³).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaterBalance {
    pub precip: f64,
    pub evap: f64,
    pub exchange: f64,
    pub storage_change: f64,
    pub outflow: f64,
}

impl WaterBalance {
    /// `inputs - outputs - storage change`; zero for a conservative run.
    pub fn residual(&self) -> f64 {
        self.precip + self.exchange - self.evap - self.outflow - self.storage_change
    }

    pub fn relative_error(&self) -> f64 {
        self.residual().abs() / self.precip.abs().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub recorded_cells: Vec<usize>,
    /// One discharge series (m³/s) per recorded cell.
    pub discharge: Vec<Vec<f64>>,
    pub initial_state: StateFields,
    pub final_state: StateFields,
    pub totals: CellTotals,
}

impl Simulation {
    pub fn series(&self, cell: usize) -> Option<&[f64]> {
        self.recorded_cells
            .iter()
            .position(|&c| c == cell)
            .map(|i| self.discharge[i].as_slice())
    }

    /// Mass balance of the catchment draining to `outlet`.
    pub fn balance(
        &self,
        plan: &DrainagePlan,
        params: &ParameterFields,
        outlet: usize,
    ) -> Result<WaterBalance> {
        let mask = crate::grid::delineate_catchment(plan, outlet)?;
        let area_m = plan.cell_area() * 1e-3;
        let mut wb = WaterBalance {
            precip: 0.0,
            evap: 0.0,
            exchange: 0.0,
            storage_change: 0.0,
            outflow: self.totals.outflow[outlet],
        };
        let storage = |s: &StateFields, c: usize| {
            (params.maps[0][c] * s.hp[c] + params.maps[1][c] * s.hft[c]) * area_m + s.hlr[c]
        };
        for c in (0..plan.n_cells()).filter(|&c| mask[c]) {
            wb.precip += self.totals.precip[c];
            wb.evap += self.totals.evap[c];
            wb.exchange += self.totals.exchange[c];
            wb.storage_change += storage(&self.final_state, c) - storage(&self.initial_state, c);
        }
        Ok(wb)
    }
}

/// Internal forward stepper shared by [`simulate`] and the adjoint.
pub(crate) struct Stepper<'a> {
    plan: &'a DrainagePlan,
    cells: Vec<CellParams>,
    pub(crate) release: Vec<f64>,
    pub(crate) runoff: Vec<f64>,
    pub(crate) q: Vec<f64>,
    inflow: Vec<f64>,
    /// Reservoir volume before release, kept only when requested.
    pub(crate) stored: Option<Vec<f64>>,
    dt: f64,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(plan: &'a DrainagePlan, params: &'a ParameterFields, dt: f64) -> Self {
        let n = plan.n_cells();
        let cells = (0..n).map(|c| params.cell(c)).collect::<Vec<_>>();
        let mut release = vec![0.0; n];
        for &c in plan.active_cells() {
            release[c] = release_fraction(cells[c].lr, dt);
        }
        Self {
            plan,
            cells,
            release,
            runoff: vec![0.0; n],
            q: vec![0.0; n],
            inflow: vec![0.0; n],
            stored: None,
            dt,
        }
    }

    pub(crate) fn keep_stored(mut self) -> Self {
        self.stored = Some(vec![0.0; self.plan.n_cells()]);
        self
    }

    pub(crate) fn cell(&self, c: usize) -> &CellParams {
        &self.cells[c]
    }

    /// Advances `state` by one step, leaving discharge in `self.q` and local
    /// runoff in `self.runoff`.
    pub(crate) fn step(
        &mut self,
        p: &[f64],
        e: &[f64],
        state: &mut StateFields,
        mut totals: Option<&mut CellTotals>,
    ) {
        let area_m = self.plan.cell_area() * 1e-3;
        for &c in self.plan.active_cells() {
            let f = cell_fluxes(
                p[c],
                e[c],
                CellState {
                    hp: state.hp[c],
                    hft: state.hft[c],
                },
                &self.cells[c],
            );
            state.hp[c] = f.state.hp;
            state.hft[c] = f.state.hft;
            self.runoff[c] = f.runoff;
            if let Some(t) = totals.as_deref_mut() {
                t.precip[c] += p[c] * area_m;
                t.evap[c] += f.evap * area_m;
                t.exchange[c] += f.exchange * area_m;
            }
        }
        route_step(
            self.plan,
            &self.runoff,
            &self.release,
            self.dt,
            &mut state.hlr,
            &mut self.inflow,
            &mut self.q,
            self.stored.as_deref_mut(),
        );
        if let Some(t) = totals {
            for &c in self.plan.active_cells() {
                t.outflow[c] += self.q[c] * self.dt;
            }
        }
    }
}

pub(crate) fn check_inputs(
    plan: &DrainagePlan,
    forcing: &ForcingSeries,
    params: &ParameterFields,
    init: &StateFields,
) -> Result<()> {
    let n = plan.n_cells();
    if forcing.n_cells() != n {
        return Err(Error::DimensionMismatch(format!(
            "forcing has {} cells, plan has {n}",
            forcing.n_cells()
        )));
    }
    if forcing.n_steps() == 0 {
        return Err(Error::InvalidForcing("empty forcing series".into()));
    }
    params.validate(plan)?;
    if init.hp.len() != n || init.hft.len() != n || init.hlr.len() != n {
        return Err(Error::DimensionMismatch("initial state size".into()));
    }
    Ok(())
}

/// Runs the model over the whole forcing series.
pub fn simulate(
    plan: &DrainagePlan,
    forcing: &ForcingSeries,
    params: &ParameterFields,
    init: &StateFields,
    record: &Record,
) -> Result<Simulation> {
    check_inputs(plan, forcing, params, init)?;
    let n = plan.n_cells();
    let recorded_cells = match record {
        Record::All => plan.active_cells().to_vec(),
        Record::Cells(cells) => cells.clone(),
    };
    let n_t = forcing.n_steps();
    let mut discharge = vec![Vec::with_capacity(n_t); recorded_cells.len()];
    let mut totals = CellTotals {
        precip: vec![0.0; n],
        evap: vec![0.0; n],
        exchange: vec![0.0; n],
        outflow: vec![0.0; n],
    };
    let mut state = init.clone();
    let mut stepper = Stepper::new(plan, params, forcing.dt);
    for t in 0..n_t {
        stepper.step(
            forcing.precip_at(t),
            forcing.pet_at(t),
            &mut state,
            Some(&mut totals),
        );
        for (series, &c) in discharge.iter_mut().zip(&recorded_cells) {
            series.push(stepper.q[c]);
        }
    }
    Ok(Simulation {
        recorded_cells,
        discharge,
        initial_state: init.clone(),
        final_state: state,
        totals,
    })
}

/// Discharge series at the given cells only, without the water ledger.
pub fn simulate_at(
    plan: &DrainagePlan,
    forcing: &ForcingSeries,
    params: &ParameterFields,
    init: &StateFields,
    cells: &[usize],
) -> Result<Vec<Vec<f64>>> {
    check_inputs(plan, forcing, params, init)?;
    let n_t = forcing.n_steps();
    let mut out = vec![Vec::with_capacity(n_t); cells.len()];
    let mut state = init.clone();
    let mut stepper = Stepper::new(plan, params, forcing.dt);
    for t in 0..n_t {
        stepper.step(forcing.precip_at(t), forcing.pet_at(t), &mut state, None);
        for (series, &c) in out.iter_mut().zip(cells) {
            series.push(stepper.q[c]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::OUTLET;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(cp: f64, cft: f64, kexc: f64, lr: f64) -> CellParams {
        CellParams { cp, cft, kexc, lr }
    }

    #[test]
    fn dry_quiescent_cell_is_inert() {
        let s = CellState { hp: 0.3, hft: 0.0 };
        let (next, q) = step_cell(0.0, 0.0, s, &params(300.0, 100.0, 0.0, 60.0));
        assert_eq!(q, 0.0);
        assert_eq!(next, s);
    }

    #[test]
    fn no_forcing_only_drains_transfer_store() {
        let s = CellState { hp: 0.4, hft: 0.6 };
        let p = params(300.0, 100.0, 0.0, 60.0);
        let (next, q) = step_cell(0.0, 0.0, s, &p);
        assert_eq!(next.hp, 0.4);
        let expected_h = 0.6 / (1.0 + 0.6f64.powi(4)).powf(0.25);
        assert_relative_eq!(next.hft, expected_h, max_relative = 1e-15);
        assert_relative_eq!(q, 100.0 * (0.6 - expected_h), max_relative = 1e-14);
    }

    #[test]
    fn wet_step_matches_scalar_evaluation() {
        // Values computed independently (python, math module) from the
        // discrete equations: P=12, E=2, hp=0.5, hft=0.4, cp=250, cft=90,
        // kexc=1.5.
        let (s, q) = step_cell(
            12.0,
            2.0,
            CellState { hp: 0.5, hft: 0.4 },
            &params(250.0, 90.0, 1.5, 60.0),
        );
        assert_relative_eq!(s.hp, 0.5293963956807619, max_relative = 1e-13);
        assert_relative_eq!(s.hft, 0.42369943057170123, max_relative = 1e-13);
        assert_relative_eq!(q, 0.6393837905068938, max_relative = 1e-12);
    }

    #[test]
    fn release_fraction_one_efold() {
        assert_relative_eq!(
            release_fraction(60.0, 3600.0),
            1.0 - (-1.0f64).exp(),
            max_relative = 1e-15
        );
        assert!(release_fraction(1e12, 3600.0) < 1e-8);
    }

    #[test]
    fn single_cell_large_lr_stores_everything() {
        let plan = DrainagePlan::new(1, 1, 1000.0, vec![Some(OUTLET)]).unwrap();
        let (q, h) = route(&plan, &[5.0], &[0.0], &[1e12], 3600.0);
        assert!(q[0] < 1e-6);
        assert_relative_eq!(h[0], 5000.0, max_relative = 1e-8);
    }

    #[test]
    fn two_cell_chain_reaches_steady_state() {
        let plan = DrainagePlan::new(1, 2, 1000.0, vec![Some(1), Some(OUTLET)]).unwrap();
        let runoff = [2.0, 2.0];
        let lr = [60.0, 60.0];
        let mut h = vec![0.0, 0.0];
        let mut q = vec![0.0, 0.0];
        for _ in 0..200 {
            let (q1, h1) = route(&plan, &runoff, &h, &lr, 3600.0);
            q = q1;
            h = h1;
        }
        let volume = 2.0 * 1e-3 * 1e6;
        assert_relative_eq!(q[1], 2.0 * volume / 3600.0, max_relative = 1e-10);
    }

    fn tiny_plan() -> DrainagePlan {
        // 2x2: three cells drain into the bottom-right outlet
        DrainagePlan::new(2, 2, 1000.0, vec![Some(2), Some(3), Some(1), Some(OUTLET)]).unwrap()
    }

    #[test]
    fn null_run_gives_zero_discharge() {
        let plan = tiny_plan();
        let n = plan.n_cells();
        let forcing = ForcingSeries::new(n, vec![0.0; 10 * n], vec![0.0; 10 * n], 3600.0).unwrap();
        let params = ParameterFields::uniform(n, [300.0, 100.0, 2.0, 60.0], Bounds::default());
        let init = StateFields::uniform(n, 0.0, 0.0, 0.0);
        let sim = simulate(&plan, &forcing, &params, &init, &Record::All).unwrap();
        assert!(sim.discharge.iter().flatten().all(|&q| q == 0.0));
    }

    #[test]
    fn nan_forcing_is_rejected() {
        let mut p = vec![0.0; 8];
        p[5] = f64::NAN;
        assert!(matches!(
            ForcingSeries::new(4, p, vec![0.0; 8], 3600.0),
            Err(Error::InvalidForcing(_))
        ));
    }

    #[test]
    fn out_of_bounds_parameters_are_rejected() {
        let plan = tiny_plan();
        let n = plan.n_cells();
        let forcing = ForcingSeries::new(n, vec![1.0; n], vec![0.0; n], 3600.0).unwrap();
        let params = ParameterFields::uniform(n, [3000.0, 100.0, 0.0, 60.0], Bounds::default());
        let init = StateFields::default_initial(n);
        assert!(matches!(
            simulate(&plan, &forcing, &params, &init, &Record::All),
            Err(Error::ParameterOutOfBounds { param: "cp", .. })
        ));
    }

    #[test]
    fn mass_is_conserved_without_exchange() {
        let plan = tiny_plan();
        let n = plan.n_cells();
        let n_t = 50;
        let precip: Vec<f64> = (0..n_t * n).map(|i| ((i * 7919) % 13) as f64).collect();
        let forcing = ForcingSeries::new(n, precip, vec![0.0; n_t * n], 3600.0).unwrap();
        let params = ParameterFields::uniform(n, [50.0, 5.0, 0.0, 30.0], Bounds::default());
        let init = StateFields::default_initial(n);
        let sim = simulate(&plan, &forcing, &params, &init, &Record::All).unwrap();
        let wb = sim.balance(&plan, &params, 3).unwrap();
        assert!(wb.relative_error() < 1e-12, "{wb:?}");
    }

    #[test]
    fn twin_runs_are_bit_identical() {
        let plan = tiny_plan();
        let n = plan.n_cells();
        let precip: Vec<f64> = (0..30 * n).map(|i| (i % 5) as f64).collect();
        let pet = vec![0.1; 30 * n];
        let forcing = ForcingSeries::new(n, precip, pet, 3600.0).unwrap();
        let params = ParameterFields::uniform(n, [300.0, 100.0, -2.0, 60.0], Bounds::default());
        let init = StateFields::default_initial(n);
        let a = simulate(&plan, &forcing, &params, &init, &Record::All).unwrap();
        let b = simulate(&plan, &forcing, &params, &init, &Record::All).unwrap();
        assert_eq!(a.discharge, b.discharge);
    }

    proptest! {
        #[test]
        fn state_bounds_hold(
            p in 0.0f64..200.0,
            e in 0.0f64..20.0,
            hp in 0.0f64..=1.0,
            hft in 0.0f64..=1.0,
            cp in 1.0f64..2000.0,
            cft in 1.0f64..1000.0,
            kexc in -50.0f64..50.0,
        ) {
            let (s, q) = step_cell(p, e, CellState { hp, hft }, &params(cp, cft, kexc, 60.0));
            prop_assert!((0.0..=1.0).contains(&s.hp));
            prop_assert!((0.0..=1.0).contains(&s.hft));
            prop_assert!(q >= 0.0);
        }

        #[test]
        fn cell_adjoint_matches_finite_differences(
            p in 0.0f64..30.0,
            e in 0.0f64..1.0,
            hp in 0.05f64..0.95,
            hft in 0.05f64..0.95,
            cp in 20.0f64..1500.0,
            cft in 20.0f64..800.0,
            kexc in -10.0f64..10.0,
            w in proptest::array::uniform3(-1.0f64..1.0),
        ) {
            let prm = params(cp, cft, kexc, 60.0);
            let st = CellState { hp, hft };
            let objective = |st: CellState, prm: &CellParams| {
                let f = cell_fluxes(p, e, st, prm);
                w[0] * f.state.hp + w[1] * f.state.hft + w[2] * f.runoff
            };
            let (ahp, ahft, dp) = cell_adjoint(p, e, st, &prm, w[0], w[1], w[2]);
            let fd = |plus: f64, minus: f64, h: f64| (plus - minus) / (2.0 * h);
            let check = |adj: f64, num: f64| {
                (adj - num).abs() <= 1e-6 * num.abs().max(1.0)
            };
            let h = 1e-6;
            let n_hp = fd(
                objective(CellState { hp: hp + h, hft }, &prm),
                objective(CellState { hp: hp - h, hft }, &prm),
                h,
            );
            let n_hft = fd(
                objective(CellState { hp, hft: hft + h }, &prm),
                objective(CellState { hp, hft: hft - h }, &prm),
                h,
            );
            let hc = 1e-4;
            let n_cp = fd(
                objective(st, &params(cp + hc, cft, kexc, 60.0)),
                objective(st, &params(cp - hc, cft, kexc, 60.0)),
                hc,
            );
            let n_cft = fd(
                objective(st, &params(cp, cft + hc, kexc, 60.0)),
                objective(st, &params(cp, cft - hc, kexc, 60.0)),
                hc,
            );
            let n_k = fd(
                objective(st, &params(cp, cft, kexc + hc, 60.0)),
                objective(st, &params(cp, cft, kexc - hc, 60.0)),
                hc,
            );
            // skip draws sitting on a clamp or max() kink
            let f = cell_fluxes(p, e, st, &prm);
            let r_raw = hft + (0.9 * (p - e).max(0.0) + kexc * hft.powf(3.5)) / cft;
            prop_assume!((r_raw - 1.0).abs() > 1e-3 && r_raw > 1e-3 && f.runoff > 1e-9);
            prop_assert!(check(ahp, n_hp), "hp {} vs {}", ahp, n_hp);
            prop_assert!(check(ahft, n_hft), "hft {} vs {}", ahft, n_hft);
            prop_assert!(check(dp[0], n_cp), "cp {} vs {}", dp[0], n_cp);
            prop_assert!(check(dp[1], n_cft), "cft {} vs {}", dp[1], n_cft);
            prop_assert!(check(dp[2], n_k), "kexc {} vs {}", dp[2], n_k);
        }
    }
}
