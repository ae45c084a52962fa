//! Slab-by-slab time integration with PI step-size control.
//!
//! Each adaptive step solves the slab twice: once at the configured temporal
//! order m and once with the m = 0 companion from the same incoming trace.
//! The relative energy difference of the two right traces drives the PI
//! controller; steps are rejected and halved when the estimate exceeds
//! rho * tol or Newton fails.

use std::sync::Arc;

use crate::assembly::{initial_state, Discretization, PhiGauge, ProblemSpec, SlabState, TraceState};
use crate::diagnostics::{self, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::solver::{newton_solve_masked, DepletionMask, NewtonOptions};

/// Piecewise-constant maximum step size over time.
#[derive(Debug, Clone)]
pub struct DtMaxSchedule {
    /// (t_from, cap) sorted by t_from; the last entry with t_from <= t wins.
    entries: Vec<(f64, f64)>,
}

impl DtMaxSchedule {
    pub fn constant(cap: f64) -> Self {
        DtMaxSchedule { entries: vec![(f64::NEG_INFINITY, cap)] }
    }

    pub fn new(mut entries: Vec<(f64, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("empty dt_max schedule".into()));
        }
        entries.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for (_, cap) in &entries {
            if !(*cap > 0.0) {
                return Err(Error::InvalidInput(format!("dt_max {cap} must be positive")));
            }
        }
        Ok(DtMaxSchedule { entries })
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let mut cap = self.entries[0].1;
        for &(from, value) in &self.entries {
            if from <= t {
                cap = value;
            } else {
                break;
            }
        }
        cap
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }
}

/// PI step-size controller state.
#[derive(Debug, Clone)]
pub struct StepController {
    pub tol: f64,
    pub k_p: f64,
    pub k_i: f64,
    pub theta_max: f64,
    /// Acceptance slack: a step passes when e_n <= rho * tol.
    pub rho: f64,
    pub dt_max: DtMaxSchedule,
    pub estimator_floor: f64,
    /// Step size to try next.
    pub current_dt: f64,
    prev_dt: f64,
    prev_estimate: f64,
}

impl StepController {
    /// Standard gains; the previous estimate starts at tol so the
    /// proportional term is neutral on the first step.
    pub fn new(tol: f64, dt_init: f64, dt_max: DtMaxSchedule) -> Self {
        StepController {
            tol,
            k_p: 0.13,
            k_i: 1.0 / 15.0,
            theta_max: 2.0,
            rho: 1.2,
            dt_max,
            estimator_floor: 1e-14,
            current_dt: dt_init,
            prev_dt: dt_init,
            prev_estimate: tol,
        }
    }

    /// Record an accepted step and propose the next step size.
    pub fn accept(&mut self, dt_used: f64, e_n: f64, t_next: f64) {
        self.prev_dt = dt_used;
        let e_n = e_n.max(self.estimator_floor);
        self.current_dt = propose_step_inner(self, e_n, t_next);
        self.prev_estimate = e_n;
    }
}

/// Relative energy difference between the high-order and companion solves,
/// floored to keep the controller's powers finite. A vanishing reference
/// energy falls back to the absolute difference.
pub fn estimate_error(e_high: f64, e_low: f64, floor: f64) -> f64 {
    let raw = if e_high == 0.0 {
        (e_high - e_low).abs()
    } else {
        ((e_high - e_low) / e_high).abs()
    };
    raw.max(floor)
}

fn propose_step_inner(ctrl: &StepController, e_n: f64, t: f64) -> f64 {
    let dt_temp = (ctrl.tol / e_n).powf(ctrl.k_i)
        * (ctrl.prev_estimate / e_n).powf(ctrl.k_p)
        * ctrl.prev_dt;
    dt_temp
        .min(ctrl.theta_max * ctrl.prev_dt)
        .min(ctrl.dt_max.value_at(t))
}

/// PI proposal dt = (tol/e)^KI (e_prev/e)^KP dt_prev, capped by the growth
/// factor and the schedule.
pub fn propose_step(ctrl: &StepController, e_n: f64, t: f64) -> f64 {
    propose_step_inner(ctrl, e_n.max(ctrl.estimator_floor), t)
}

/// How a run terminates.
#[derive(Debug, Clone, Copy)]
pub enum Termination {
    /// Integrate to a fixed end time.
    EndTime(f64),
    /// Stop when the relative energy change between consecutive accepted
    /// steps drops below the threshold (at least two accepted steps).
    SteadyState(f64),
}

/// Everything the time loop needs besides the problem itself.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub degree_space: usize,
    pub degree_time: usize,
    pub dt_init: f64,
    pub adaptive: bool,
    pub tol: f64,
    pub dt_max: DtMaxSchedule,
    pub termination: Termination,
    pub t_start: f64,
    /// Temporal quadrature points (default m + 3).
    pub time_quad_points: Option<usize>,
    /// Spatial quadrature exactness (default 2k + 2).
    pub space_quad_order: Option<usize>,
    pub newton: NewtonOptions,
    /// Retries (halvings) per step before giving up.
    pub max_retries: usize,
    /// Abort when dt falls below this.
    pub dt_min: f64,
    pub estimator_floor: f64,
    /// Hard cap on accepted steps, to bound runaway runs.
    pub max_steps: usize,
}

impl RunConfig {
    pub fn fixed_step(k: usize, m: usize, dt: f64, t_end: f64) -> Self {
        RunConfig {
            degree_space: k,
            degree_time: m,
            dt_init: dt,
            adaptive: false,
            tol: 1e-3,
            dt_max: DtMaxSchedule::constant(f64::INFINITY),
            termination: Termination::EndTime(t_end),
            t_start: 0.0,
            time_quad_points: None,
            space_quad_order: None,
            newton: NewtonOptions::default(),
            max_retries: 30,
            dt_min: 1e-14,
            estimator_floor: 1e-14,
            max_steps: 10_000_000,
        }
    }

    pub fn adaptive(
        k: usize,
        m: usize,
        dt_init: f64,
        tol: f64,
        dt_max: DtMaxSchedule,
        termination: Termination,
    ) -> Self {
        RunConfig {
            degree_space: k,
            degree_time: m,
            dt_init,
            adaptive: true,
            tol,
            dt_max,
            termination,
            t_start: 0.0,
            time_quad_points: None,
            space_quad_order: None,
            newton: NewtonOptions::default(),
            max_retries: 30,
            dt_min: 1e-14,
            estimator_floor: 1e-14,
            max_steps: 10_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree_space < 1 {
            return Err(Error::Config("spatial degree must be at least 1".into()));
        }
        if !(self.dt_init > 0.0) {
            return Err(Error::Config("initial dt must be positive".into()));
        }
        if self.adaptive && self.degree_time == 0 {
            return Err(Error::Config(
                "adaptive stepping needs temporal degree m >= 1 (the companion is m = 0)".into(),
            ));
        }
        if let Termination::SteadyState(th) = self.termination {
            if !(th > 0.0) {
                return Err(Error::Config("steady-state threshold must be positive".into()));
            }
        }
        Ok(())
    }

    fn discretization(&self, spec: &ProblemSpec, m: usize) -> Result<Arc<Discretization>> {
        let k = self.degree_space;
        let tq = self.time_quad_points.unwrap_or(m + 3);
        let sq = self.space_quad_order.unwrap_or(2 * k + 2);
        Discretization::with_quadrature(spec.mesh.clone(), k, m, tq, sq)
    }
}

/// Result of a completed run.
#[derive(Debug)]
pub struct Trajectory {
    /// One record per attempted step, in order.
    pub records: Vec<DiagnosticsRecord>,
    pub initial_energy: f64,
    pub final_state: TraceState,
    pub accepted_steps: usize,
    pub total_attempts: usize,
}

/// Advance one accepted step (possibly after rejected attempts). Every
/// attempt emits a record through the sink; accepted attempts also hand the
/// new trace to the sink.
#[allow(clippy::too_many_arguments)]
pub fn advance(
    spec: &ProblemSpec,
    state: &TraceState,
    low_disc: Option<&Arc<Discretization>>,
    prev_energy: f64,
    step_index: usize,
    ctrl: &mut StepController,
    config: &RunConfig,
    mask: &mut DepletionMask,
    sink: &mut dyn FnMut(&DiagnosticsRecord, Option<&TraceState>),
) -> Result<(TraceState, DiagnosticsRecord)> {
    let zero_mean = spec.gauge == PhiGauge::ZeroMean;
    let mut dt = ctrl.current_dt;
    if let Termination::EndTime(t_end) = config.termination {
        dt = dt.min(t_end - state.time);
    }

    for attempt in 1..=config.max_retries {
        if dt < config.dt_min {
            return Err(Error::StepFailure(format!(
                "step size underflow at t = {} (dt = {dt:.3e})",
                state.time
            )));
        }

        let reject_record = |newton_iterations: usize, estimator: f64, energy: f64| {
            let n = spec.n_species;
            DiagnosticsRecord {
                step: step_index,
                time: state.time + dt,
                dt,
                energy,
                dissipation_rate: f64::NAN,
                energy_drop_rate: f64::NAN,
                numerical_dissipation: f64::NAN,
                mass: vec![f64::NAN; n],
                min_density: f64::NAN,
                newton_iterations,
                estimator,
                accepted: false,
                attempts: attempt,
            }
        };

        let slab = SlabState::from_trace(state.clone(), dt, zero_mean);
        let high = match newton_solve_masked(spec, slab, &config.newton, mask) {
            Ok(solved) => solved,
            Err(Error::NewtonFailure(msg)) => {
                if std::env::var_os("PNP_TRACE_REJECTS").is_some() {
                    eprintln!("reject at t={} dt={dt:.3e}: {msg}", state.time);
                }
                let rec = reject_record(config.newton.max_iterations, f64::NAN, f64::NAN);
                sink(&rec, None);
                dt *= 0.5;
                continue;
            }
            Err(e) => return Err(e),
        };
        let (high_slab, high_report) = high;
        let high_trace = high_slab.right_trace();
        let energy_high = diagnostics::energy(spec, &high_trace);

        let estimator = if config.adaptive {
            let low_disc = low_disc.expect("adaptive runs carry a companion discretization");
            let low_incoming = TraceState {
                disc: low_disc.clone(),
                time: state.time,
                u: state.u.clone(),
                phi: state.phi.clone(),
            };
            let low_slab = SlabState::from_trace(low_incoming, dt, zero_mean);
            let low = match newton_solve_masked(spec, low_slab, &config.newton, mask) {
                Ok((solved, _)) => solved,
                Err(Error::NewtonFailure(_)) => {
                    let rec =
                        reject_record(high_report.iterations, f64::NAN, energy_high);
                    sink(&rec, None);
                    dt *= 0.5;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let energy_low = diagnostics::energy(spec, &low.right_trace());
            estimate_error(energy_high, energy_low, config.estimator_floor)
        } else {
            0.0
        };

        if config.adaptive && estimator > ctrl.rho * ctrl.tol {
            let rec = reject_record(high_report.iterations, estimator, energy_high);
            sink(&rec, None);
            dt *= 0.5;
            continue;
        }

        // Accepted: assemble the full record.
        let dissipation = diagnostics::dissipation(spec, &high_slab);
        let energy_drop = prev_energy - energy_high;
        let record = DiagnosticsRecord {
            step: step_index,
            time: high_trace.time,
            dt,
            energy: energy_high,
            dissipation_rate: dissipation / dt,
            energy_drop_rate: energy_drop / dt,
            numerical_dissipation: energy_drop - dissipation,
            mass: diagnostics::masses(spec, &high_trace),
            min_density: diagnostics::min_density(spec, &high_slab),
            newton_iterations: high_report.iterations,
            estimator,
            accepted: true,
            attempts: attempt,
        };
        if config.adaptive {
            ctrl.accept(dt, estimator, high_trace.time);
        }
        sink(&record, Some(&high_trace));
        return Ok((high_trace, record));
    }
    Err(Error::StepFailure(format!(
        "step at t = {} rejected {} times",
        state.time, config.max_retries
    )))
}

/// Integrate from the initial state until the configured termination,
/// streaming every attempted step's record (and each accepted trace) to the
/// sink.
pub fn run(
    spec: &ProblemSpec,
    config: &RunConfig,
    sink: &mut dyn FnMut(&DiagnosticsRecord, Option<&TraceState>),
) -> Result<Trajectory> {
    spec.validate()?;
    config.validate()?;
    let disc = config.discretization(spec, config.degree_time)?;
    let low_disc = if config.adaptive {
        Some(config.discretization(spec, 0)?)
    } else {
        None
    };

    let mut state = initial_state(spec, disc.clone(), config.t_start)?;
    let initial_energy = diagnostics::energy(spec, &state);

    let mut ctrl = StepController::new(config.tol, config.dt_init, config.dt_max.clone());
    ctrl.estimator_floor = config.estimator_floor;
    let mut mask = DepletionMask::new(spec.n_species, disc.space.ndofs);

    let mut records: Vec<DiagnosticsRecord> = Vec::new();
    let mut prev_energy = initial_energy;
    let mut last_accepted_energy: Option<f64> = None;
    let mut accepted = 0usize;

    loop {
        if accepted >= config.max_steps {
            return Err(Error::StepFailure(format!(
                "exceeded the {} accepted-step budget",
                config.max_steps
            )));
        }
        let mut collect = |rec: &DiagnosticsRecord, trace: Option<&TraceState>| {
            records.push(rec.clone());
            sink(rec, trace);
        };
        let (new_state, record) = advance(
            spec,
            &state,
            low_disc.as_ref(),
            prev_energy,
            accepted + 1,
            &mut ctrl,
            config,
            &mut mask,
            &mut collect,
        )?;
        accepted += 1;
        state = new_state;

        let energy = record.energy;
        let done = match config.termination {
            Termination::EndTime(t_end) => {
                state.time >= t_end - 1e-12 * t_end.abs().max(1.0)
            }
            Termination::SteadyState(threshold) => {
                let steady = match last_accepted_energy {
                    Some(prev) if accepted >= 2 => {
                        let scale = energy.abs().max(f64::MIN_POSITIVE);
                        ((energy - prev) / scale).abs() < threshold
                    }
                    _ => false,
                };
                steady
            }
        };
        last_accepted_energy = Some(energy);
        prev_energy = energy;
        if done {
            let total_attempts = records.len();
            return Ok(Trajectory {
                records,
                initial_energy,
                final_state: state,
                accepted_steps: accepted,
                total_attempts,
            });
        }
    }
}

/// Run and collect everything, discarding the streaming interface.
pub fn run_collect(spec: &ProblemSpec, config: &RunConfig) -> Result<Trajectory> {
    run(spec, config, &mut |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::BoundaryCondition;
    use crate::mesh::build_interval_mesh;
    use std::sync::Arc;

    #[test]
    fn estimator_examples() {
        assert!((estimate_error(-3000.0, -2997.0, 1e-14) - 1e-3).abs() < 1e-15);
        assert_eq!(estimate_error(5.0, 5.0, 1e-14), 1e-14);
        let e = estimate_error(387801.58, 387801.58 * (1.0 - 1e-3), 1e-14);
        assert!((e - 1e-3).abs() < 1e-12);
        // Vanishing reference energy: absolute difference.
        assert!((estimate_error(0.0, 0.25, 1e-14) - 0.25).abs() < 1e-16);
    }

    #[test]
    fn controller_equilibrium_keeps_dt() {
        let ctrl = StepController::new(1e-3, 0.1, DtMaxSchedule::constant(10.0));
        let dt = propose_step(&ctrl, 1e-3, 0.0);
        assert!((dt - 0.1).abs() < 1e-15);
    }

    #[test]
    fn controller_growth_formula() {
        // tol = 1e-3, e_n = e_prev = 1e-6, dt_prev = 0.1:
        // dt_temp = 10^(3/15) * 0.1 ~ 0.1585, under both caps.
        let mut ctrl = StepController::new(1e-3, 0.1, DtMaxSchedule::constant(2.0));
        ctrl.prev_estimate = 1e-6;
        let dt = propose_step(&ctrl, 1e-6, 0.0);
        let expected = 10f64.powf(0.2) * 0.1;
        assert!((dt - expected).abs() < 1e-12, "{dt} vs {expected}");
    }

    #[test]
    fn controller_caps_bind() {
        // Large proposal is clipped by theta_max, then by the schedule.
        let mut ctrl = StepController::new(1e-3, 2.0, DtMaxSchedule::constant(2.0));
        ctrl.prev_estimate = 1e-12;
        let dt = propose_step(&ctrl, 1e-12, 0.0);
        assert_eq!(dt, 2.0); // dt_max binds before theta_max * 2.0 = 4.0

        let mut ctrl = StepController::new(1e-3, 1.5, DtMaxSchedule::constant(100.0));
        ctrl.prev_estimate = 1e-12;
        let dt = propose_step(&ctrl, 1e-12, 0.0);
        assert_eq!(dt, 3.0); // theta_max * dt_prev
    }

    #[test]
    fn schedule_switches_value() {
        let sched = DtMaxSchedule::new(vec![(0.0, 2.0), (250.0, 200.0)]).unwrap();
        assert_eq!(sched.value_at(0.0), 2.0);
        assert_eq!(sched.value_at(249.999), 2.0);
        assert_eq!(sched.value_at(250.0), 200.0);
        assert_eq!(sched.value_at(1e6), 200.0);
        assert_eq!(sched.value_at(-5.0), 2.0);
    }

    fn diffusion_spec(n_elems: usize) -> ProblemSpec {
        let mesh = Arc::new(build_interval_mesh(0.0, 1.0, n_elems, &[]).unwrap());
        let mut spec = ProblemSpec::new(mesh, 1);
        spec.species_bc[0].insert(1, BoundaryCondition::dirichlet_constant(1.0));
        spec.phi_bc.insert(1, BoundaryCondition::dirichlet_constant(0.0));
        spec.gauge = PhiGauge::Dirichlet;
        spec.initial_density =
            vec![Arc::new(|x: &[f64; 2]| 1.0 + 0.5 * (std::f64::consts::PI * x[0]).sin())];
        spec
    }

    #[test]
    fn equilibrium_run_terminates_after_two_steps() {
        // Uniform initial data, zero charge, pure Neumann: nothing moves.
        let mesh = Arc::new(build_interval_mesh(0.0, 1.0, 6, &[]).unwrap());
        let spec = ProblemSpec::new(mesh, 1);
        let config = RunConfig::adaptive(
            1,
            1,
            0.1,
            1e-3,
            DtMaxSchedule::constant(1.0),
            Termination::SteadyState(1e-13),
        );
        let traj = run_collect(&spec, &config).unwrap();
        assert_eq!(traj.accepted_steps, 2);
        for rec in &traj.records {
            assert!(rec.accepted);
            assert!((rec.energy - traj.initial_energy).abs() <= 1e-13 * traj.initial_energy.abs());
        }
    }

    #[test]
    fn fixed_step_mode_skips_companion() {
        let spec = diffusion_spec(8);
        let config = RunConfig::fixed_step(1, 1, 0.05, 0.2);
        let traj = run_collect(&spec, &config).unwrap();
        assert_eq!(traj.accepted_steps, 4);
        for rec in &traj.records {
            assert!(rec.accepted);
            assert_eq!(rec.estimator, 0.0);
            assert_eq!(rec.attempts, 1);
        }
        let t_final = traj.final_state.time;
        assert!((t_final - 0.2).abs() < 1e-12);
    }

    #[test]
    fn rejections_halve_exactly_and_accepts_respect_rho_tol() {
        // A tight tolerance with a large initial step forces rejections.
        let spec = diffusion_spec(8);
        let mut config = RunConfig::adaptive(
            1,
            1,
            0.5,
            1e-9,
            DtMaxSchedule::constant(1.0),
            Termination::EndTime(0.5),
        );
        config.estimator_floor = 1e-16;
        let traj = run_collect(&spec, &config).unwrap();
        let mut saw_rejection = false;
        for pair in traj.records.windows(2) {
            if !pair[0].accepted && pair[0].step == pair[1].step {
                saw_rejection = true;
                let ratio = pair[1].dt / pair[0].dt;
                assert!((ratio - 0.5).abs() < 1e-14, "halving ratio {ratio}");
            }
        }
        assert!(saw_rejection, "expected at least one rejection");
        for rec in traj.records.iter().filter(|r| r.accepted) {
            assert!(rec.estimator <= 1.2 * config.tol * (1.0 + 1e-12));
        }
        // dt never grows faster than theta_max between accepted steps.
        let accepted: Vec<&DiagnosticsRecord> =
            traj.records.iter().filter(|r| r.accepted).collect();
        for pair in accepted.windows(2) {
            assert!(pair[1].dt <= 2.0 * pair[0].dt * (1.0 + 1e-12));
        }
    }

    #[test]
    fn energy_monotone_on_dissipative_run() {
        let spec = diffusion_spec(12);
        let config = RunConfig::adaptive(
            1,
            1,
            0.01,
            1e-3,
            DtMaxSchedule::constant(0.5),
            Termination::EndTime(0.5),
        );
        let traj = run_collect(&spec, &config).unwrap();
        let mut prev = traj.initial_energy;
        for rec in traj.records.iter().filter(|r| r.accepted) {
            let slack = 1e-8 * (1.0 + prev.abs());
            assert!(rec.energy <= prev + slack, "energy rose: {} -> {}", prev, rec.energy);
            // Dissipation bound: drop >= Diss - slack.
            assert!(
                prev - rec.energy >= rec.dissipation_rate * rec.dt - slack,
                "dissipation bound violated"
            );
            assert!(rec.min_density > 0.0);
            prev = rec.energy;
        }
    }

    #[test]
    fn mass_conserved_with_no_flux_boundaries() {
        // Mass conservation needs the constant test function, i.e. species
        // boundary rows must not be eliminated: natural BCs everywhere.
        let mesh = Arc::new(build_interval_mesh(0.0, 1.0, 10, &[]).unwrap());
        let mut spec = ProblemSpec::new(mesh, 1);
        spec.initial_density =
            vec![Arc::new(|x: &[f64; 2]| 1.0 + 0.5 * (std::f64::consts::PI * x[0]).sin())];
        let config = RunConfig::adaptive(
            1,
            1,
            0.02,
            1e-3,
            DtMaxSchedule::constant(0.25),
            Termination::EndTime(0.4),
        );
        let traj = run_collect(&spec, &config).unwrap();
        let initial_mass = traj.records[0].mass[0];
        // The discrete mass is the quadrature of exp(interpolated log
        // density), so it only approximates 1 + 1/pi to O(h^2).
        assert!((initial_mass - (1.0 + 1.0 / std::f64::consts::PI)).abs() < 1e-2);
        for rec in traj.records.iter().filter(|r| r.accepted) {
            assert!(
                (rec.mass[0] - initial_mass).abs() <= 1e-10 * initial_mass,
                "mass drifted: {} vs {}",
                rec.mass[0],
                initial_mass
            );
        }
    }
}
