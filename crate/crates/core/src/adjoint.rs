//! Exact cost gradients with respect to the distributed parameter maps.
//!
//! The forward run stores the states at the start of every timestep; the
//! reverse sweep then walks time backwards and, inside each step, the
//! drainage plan from outlets to headwaters, accumulating adjoints of the
//! states and the parameters.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grid::{DrainagePlan, GaugeSet};
use crate::io::fmt_f64;
use crate::model::{
    self, cell_adjoint, release_fraction_derivative, Bounds, CellState, ForcingSeries,
    ParameterFields, StateFields, Stepper, N_PARAMS, PARAM_NAMES,
};
use crate::objective::{self, CostConfig};
use crate::setup::Setup;

/// `dJ/dtheta_k(x)` for the four parameter maps.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientFields {
    pub maps: [Vec<f64>; N_PARAMS],
}

impl GradientFields {
    pub fn zeros(n_cells: usize) -> Self {
        Self {
            maps: std::array::from_fn(|_| vec![0.0; n_cells]),
        }
    }

    pub fn d_cp(&self) -> &[f64] {
        &self.maps[0]
    }

    pub fn d_cft(&self) -> &[f64] {
        &self.maps[1]
    }

    pub fn d_kexc(&self) -> &[f64] {
        &self.maps[2]
    }

    pub fn d_lr(&self) -> &[f64] {
        &self.maps[3]
    }

    /// Directional derivative `<grad, v>`.
    pub fn dot(&self, v: &[Vec<f64>; N_PARAMS]) -> f64 {
        let mut s = 0.0;
        for k in 0..N_PARAMS {
            for (a, b) in self.maps[k].iter().zip(&v[k]) {
                s += a * b;
            }
        }
        s
    }
}

/// Cost and its gradient with respect to every cell of every parameter map.
pub fn gradient_theta(
    plan: &DrainagePlan,
    forcing: &ForcingSeries,
    params: &ParameterFields,
    init: &StateFields,
    gauges: &GaugeSet,
    cfg: &CostConfig,
) -> Result<(f64, GradientFields)> {
    model::check_inputs(plan, forcing, params, init)?;
    let cells = gauges.cells();
    let (sims, trajectory) = forward_with_trajectory(plan, forcing, params, init, &cells);
    let (j, seeds) = objective::j_obs_with_gradient(gauges, &sims, cfg)?;
    let grad = reverse_sweep(plan, forcing, params, &trajectory, &cells, &seeds);
    Ok((j, grad))
}

/// Gradient of any functional of the discharge at `cells`, given its
/// derivative `seeds[i][t] = dJ/dQ(cells[i], t)`.
pub fn discharge_adjoint(
    plan: &DrainagePlan,
    forcing: &ForcingSeries,
    params: &ParameterFields,
    init: &StateFields,
    cells: &[usize],
    seeds: &[Vec<f64>],
) -> Result<GradientFields> {
    model::check_inputs(plan, forcing, params, init)?;
    let (_, trajectory) = forward_with_trajectory(plan, forcing, params, init, cells);
    Ok(reverse_sweep(
        plan,
        forcing,
        params,
        &trajectory,
        cells,
        seeds,
    ))
}

/// States at the start of each step, stored for every step.
struct Trajectory {
    n_cells: usize,
    hp: Vec<f64>,
    hft: Vec<f64>,
    hlr: Vec<f64>,
}

impl Trajectory {
    fn state_at(&self, t: usize, out: &mut StateFields) {
        let r = t * self.n_cells..(t + 1) * self.n_cells;
        out.hp.copy_from_slice(&self.hp[r.clone()]);
        out.hft.copy_from_slice(&self.hft[r.clone()]);
        out.hlr.copy_from_slice(&self.hlr[r]);
    }
}

fn forward_with_trajectory(
    plan: &DrainagePlan,
    forcing: &ForcingSeries,
    params: &ParameterFields,
    init: &StateFields,
    cells: &[usize],
) -> (Vec<Vec<f64>>, Trajectory) {
    let n = plan.n_cells();
    let n_t = forcing.n_steps();
    let mut traj = Trajectory {
        n_cells: n,
        hp: Vec::with_capacity(n * n_t),
        hft: Vec::with_capacity(n * n_t),
        hlr: Vec::with_capacity(n * n_t),
    };
    let mut sims = vec![Vec::with_capacity(n_t); cells.len()];
    let mut state = init.clone();
    let mut stepper = Stepper::new(plan, params, forcing.dt);
    for t in 0..n_t {
        traj.hp.extend_from_slice(&state.hp);
        traj.hft.extend_from_slice(&state.hft);
        traj.hlr.extend_from_slice(&state.hlr);
        stepper.step(forcing.precip_at(t), forcing.pet_at(t), &mut state, None);
        for (s, &c) in sims.iter_mut().zip(cells) {
            s.push(stepper.q[c]);
        }
    }
    (sims, traj)
}

fn reverse_sweep(
    plan: &DrainagePlan,
    forcing: &ForcingSeries,
    params: &ParameterFields,
    traj: &Trajectory,
    cells: &[usize],
    seeds: &[Vec<f64>],
) -> GradientFields {
    let n = plan.n_cells();
    let dt = forcing.dt;
    let area_m = plan.cell_area() * 1e-3;
    let mut stepper = Stepper::new(plan, params, dt).keep_stored();
    let dfdlr: Vec<f64> = (0..n)
        .map(|c| {
            if plan.is_active(c) {
                release_fraction_derivative(params.maps[3][c], dt)
            } else {
                0.0
            }
        })
        .collect();

    let mut grad = GradientFields::zeros(n);
    let mut adj_hp = vec![0.0; n];
    let mut adj_hft = vec![0.0; n];
    let mut adj_hlr = vec![0.0; n];
    let mut adj_q = vec![0.0; n];
    let mut adj_runoff = vec![0.0; n];
    let mut state = StateFields::uniform(n, 0.0, 0.0, 0.0);

    for t in (0..forcing.n_steps()).rev() {
        traj.state_at(t, &mut state);
        let hp0 = &traj.hp[t * n..(t + 1) * n];
        let hft0 = &traj.hft[t * n..(t + 1) * n];
        let p = forcing.precip_at(t);
        let e = forcing.pet_at(t);
        stepper.step(p, e, &mut state, None);
        let stored = stepper.stored.as_ref().expect("stored volumes kept");

        adj_q.iter_mut().for_each(|a| *a = 0.0);
        for (seed, &c) in seeds.iter().zip(cells) {
            adj_q[c] += seed[t];
        }

        for &c in plan.topo_order().iter().rev() {
            let f = stepper.release[c];
            let a_stored = adj_q[c] * f / dt + adj_hlr[c] * (1.0 - f);
            grad.maps[3][c] += stored[c] * (adj_q[c] / dt - adj_hlr[c]) * dfdlr[c];
            adj_hlr[c] = a_stored;
            adj_runoff[c] = a_stored * area_m;
            for &u in plan.upstream(c) {
                adj_q[u] += a_stored * dt;
            }
        }

        for &c in plan.active_cells() {
            if adj_hp[c] == 0.0 && adj_hft[c] == 0.0 && adj_runoff[c] == 0.0 {
                continue;
            }
            let (ahp, ahft, d) = cell_adjoint(
                p[c],
                e[c],
                CellState {
                    hp: hp0[c],
                    hft: hft0[c],
                },
                stepper.cell(c),
                adj_hp[c],
                adj_hft[c],
                adj_runoff[c],
            );
            adj_hp[c] = ahp;
            adj_hft[c] = ahft;
            for k in 0..3 {
                grad.maps[k][c] += d[k];
            }
        }
    }
    grad
}

/// One adjoint-versus-finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FdProbe {
    pub param: usize,
    pub cell: usize,
    pub adjoint: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
    pub status: ProbeStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeStatus {
    Compared,
    /// Both derivatives vanish; compared with an absolute tolerance.
    Insensitive,
    /// One-sided differences disagree: the probe straddles a kink.
    RejectedKink,
    /// `theta +/- h` leaves the admissible box.
    RejectedBound,
    /// Central differences at `h` and `h/2` disagree.
    RejectedUnconverged,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub cost: f64,
    pub probes: Vec<FdProbe>,
}

/// Absolute tolerance for probes where both derivatives vanish.
pub const INSENSITIVE_ABS_TOL: f64 = 1e-12;

impl FdReport {
    /// Largest relative error over probes that were compared.
    pub fn max_rel_error(&self) -> f64 {
        self.probes
            .iter()
            .filter(|p| p.status == ProbeStatus::Compared)
            .map(|p| p.rel_error)
            .fold(0.0, f64::max)
    }

    /// Insensitive probes must agree to [`INSENSITIVE_ABS_TOL`].
    pub fn insensitive_ok(&self) -> bool {
        self.probes
            .iter()
            .filter(|p| p.status == ProbeStatus::Insensitive)
            .all(|p| (p.adjoint - p.finite_difference).abs() <= INSENSITIVE_ABS_TOL)
    }

    /// `(param, compared, max relative error)` per parameter.
    pub fn per_parameter(&self) -> Vec<(&'static str, usize, f64)> {
        (0..N_PARAMS)
            .map(|k| {
                let compared: Vec<_> = self
                    .probes
                    .iter()
                    .filter(|p| p.param == k && p.status == ProbeStatus::Compared)
                    .collect();
                let max = compared.iter().map(|p| p.rel_error).fold(0.0, f64::max);
                (PARAM_NAMES[k], compared.len(), max)
            })
            .collect()
    }

    pub fn to_csv(&self, plan: &DrainagePlan) -> String {
        let mut s = String::from("param,row,col,adjoint,fd,rel_error,status\n");
        for p in &self.probes {
            let (row, col) = plan.coords(p.cell);
            let status = match p.status {
                ProbeStatus::Compared => "compared",
                ProbeStatus::Insensitive => "insensitive",
                ProbeStatus::RejectedKink => "rejected_kink",
                ProbeStatus::RejectedBound => "rejected_bound",
                ProbeStatus::RejectedUnconverged => "rejected_unconverged",
            };
            s.push_str(&format!(
                "{},{row},{col},{},{},{},{status}\n",
                PARAM_NAMES[p.param],
                fmt_f64(p.adjoint),
                fmt_f64(p.finite_difference),
                fmt_f64(p.rel_error)
            ));
        }
        s
    }
}

/// Independent uniform draws per active cell in the central 80% of each
/// parameter range; inactive cells hold the midpoint.
pub fn random_interior_params(plan: &DrainagePlan, bounds: Bounds, seed: u64) -> ParameterFields {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterFields::uniform(plan.n_cells(), bounds.midpoint(), bounds);
    for k in 0..N_PARAMS {
        let (l, span) = (bounds.lower[k], bounds.span(k));
        for &c in plan.active_cells() {
            params.maps[k][c] = l + span * rng.random_range(0.1..0.9);
        }
    }
    params
}

/// Relative finite-difference step, `h_k = FD_STEP * (u_k - l_k)`.
pub const FD_STEP: f64 = 1e-4;

/// Relative disagreement between central differences at `h` and `h/2` above
/// which a probe counts as unconverged (when that check is enabled).
pub const FD_CONVERGENCE_TOL: f64 = 1e-6;

/// Compares adjoint partials with central differences at `n_probes` random
/// active cells per parameter. Probes whose one-sided differences disagree
/// by more than 10% straddle a kink and are rejected.
pub fn check_gradient_fd(
    setup: &Setup,
    params: &ParameterFields,
    n_probes: usize,
    seed: u64,
) -> Result<FdReport> {
    check_gradient_fd_with(setup, params, n_probes, seed, false)
}

/// [`check_gradient_fd`], optionally also rejecting probes where halving the
/// step moves the central difference by more than [`FD_CONVERGENCE_TOL`].
/// Long series can hide a clamp crossing inside `+/- h` that bends the
/// difference quotient without tripping the one-sided test.
pub fn check_gradient_fd_with(
    setup: &Setup,
    params: &ParameterFields,
    n_probes: usize,
    seed: u64,
    reject_unconverged: bool,
) -> Result<FdReport> {
    let (cost, grad) = setup.cost_and_gradient(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let active = setup.plan.active_cells();
    let mut probes = Vec::with_capacity(n_probes * N_PARAMS);
    for k in 0..N_PARAMS {
        let h = FD_STEP * params.bounds.span(k);
        for _ in 0..n_probes {
            let cell = *active.choose(&mut rng).expect("non-empty domain");
            let adjoint = grad.maps[k][cell];
            let theta = params.maps[k][cell];
            let mut probe = FdProbe {
                param: k,
                cell,
                adjoint,
                finite_difference: 0.0,
                rel_error: 0.0,
                status: ProbeStatus::Compared,
            };
            if theta - h < params.bounds.lower[k] || theta + h > params.bounds.upper[k] {
                probe.status = ProbeStatus::RejectedBound;
                probes.push(probe);
                continue;
            }
            let mut perturbed = params.clone();
            perturbed.maps[k][cell] = theta + h;
            let j_plus = setup.cost(&perturbed)?;
            perturbed.maps[k][cell] = theta - h;
            let j_minus = setup.cost(&perturbed)?;
            let fd = (j_plus - j_minus) / (2.0 * h);
            probe.finite_difference = fd;

            let fwd = (j_plus - cost) / h;
            let bwd = (cost - j_minus) / h;
            if fd.abs() <= INSENSITIVE_ABS_TOL && adjoint.abs() <= INSENSITIVE_ABS_TOL {
                probe.status = ProbeStatus::Insensitive;
                probe.rel_error = (adjoint - fd).abs();
            } else if (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs()) {
                probe.status = ProbeStatus::RejectedKink;
            } else {
                probe.rel_error = (adjoint - fd).abs() / fd.abs().max(1e-12);
                if reject_unconverged {
                    let half = 0.5 * h;
                    perturbed.maps[k][cell] = theta + half;
                    let jp = setup.cost(&perturbed)?;
                    perturbed.maps[k][cell] = theta - half;
                    let jm = setup.cost(&perturbed)?;
                    let fd_half = (jp - jm) / h;
                    if (fd_half - fd).abs() > FD_CONVERGENCE_TOL * fd.abs().max(1e-12) {
                        probe.status = ProbeStatus::RejectedUnconverged;
                    }
                }
            }
            probes.push(probe);
        }
    }
    Ok(FdReport { cost, probes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DrainagePlan, Gauge, OUTLET};
    use crate::model::{ParameterFields, Record};
    use crate::synth::{generate_synthetic, SynthSpec};

    fn single_cell() -> DrainagePlan {
        DrainagePlan::new(1, 1, 1000.0, vec![Some(OUTLET)]).unwrap()
    }

    #[test]
    fn routing_gradient_matches_forward_mode() {
        // J = sum_t w_t Q(t) on one cell; lr only enters through routing,
        // so a forward-mode recursion gives the exact derivative.
        let plan = single_cell();
        let n_t = 30;
        let precip: Vec<f64> = (0..n_t)
            .map(|t| if t % 7 < 2 { 6.0 } else { 0.0 })
            .collect();
        let forcing = ForcingSeries::new(1, precip, vec![0.0; n_t], 3600.0).unwrap();
        let lr = 45.0;
        let params = ParameterFields::uniform(1, [300.0, 80.0, 0.0, lr], Bounds::default());
        let init = StateFields::default_initial(1);
        let weights: Vec<f64> = (0..n_t).map(|t| 1.0 + (t as f64).sin()).collect();

        let sim = model::simulate(&plan, &forcing, &params, &init, &Record::All).unwrap();
        // local runoff from the forward run: invert the routing recurrence
        let dt = 3600.0;
        let f = model::release_fraction(lr, dt);
        let df = release_fraction_derivative(lr, dt);
        let q = &sim.discharge[0];
        let mut dh = 0.0;
        let mut dj = 0.0;
        for t in 0..n_t {
            let stored = q[t] * dt / f;
            let dstored = dh;
            let dq = (dstored * f + stored * df) / dt;
            dj += weights[t] * dq;
            dh = dstored * (1.0 - f) - stored * df;
        }
        let grad = discharge_adjoint(&plan, &forcing, &params, &init, &[0], &[weights]).unwrap();
        let rel = (grad.d_lr()[0] - dj).abs() / dj.abs();
        assert!(
            rel <= 1e-9,
            "adjoint {} vs forward-mode {dj}",
            grad.d_lr()[0]
        );
    }

    #[test]
    fn adjoint_matches_finite_differences_on_desk_case() {
        let spec = SynthSpec {
            nrows: 5,
            ncols: 5,
            n_desc: 2,
            n_steps: 24,
            n_donor: 2,
            n_ungauged: 0,
            min_gauge_area: 2,
            storm_rate: 0.3,
            ..Default::default()
        };
        let setup = generate_synthetic(&spec, 11)
            .unwrap()
            .setup(CostConfig::default())
            .unwrap();
        let params = random_interior_params(&setup.plan, setup.bounds, 3);
        let report = check_gradient_fd(&setup, &params, 40, 7).unwrap();
        let compared = report
            .probes
            .iter()
            .filter(|p| p.status == ProbeStatus::Compared)
            .count();
        assert!(compared >= 80, "only {compared} probes compared");
        assert!(
            report.max_rel_error() < 1e-5,
            "{:?}",
            report.per_parameter()
        );
        assert!(report.insensitive_ok());
    }

    #[test]
    fn zero_forcing_gives_zero_gradient() {
        let plan = DrainagePlan::new(1, 2, 1000.0, vec![Some(1), Some(OUTLET)]).unwrap();
        let n_t = 12;
        let forcing =
            ForcingSeries::new(2, vec![0.0; 2 * n_t], vec![0.0; 2 * n_t], 3600.0).unwrap();
        let params = ParameterFields::uniform(2, [300.0, 80.0, 3.0, 60.0], Bounds::default());
        let init = StateFields::uniform(2, 0.0, 0.0, 0.0);
        let obs: Vec<f64> = (0..n_t).map(|t| t as f64).collect();
        let gauges = GaugeSet::uniform(
            &plan,
            vec![Gauge {
                id: "g".into(),
                cell: 1,
                weight: 1.0,
                observed: obs,
            }],
        )
        .unwrap();
        let cfg = CostConfig {
            warmup_steps: Some(0),
            ..Default::default()
        };
        let (j, grad) = gradient_theta(&plan, &forcing, &params, &init, &gauges, &cfg).unwrap();
        assert!(j > 0.0);
        assert!(grad.maps.iter().flatten().all(|&g| g == 0.0));
    }
}
