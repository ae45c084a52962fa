//! Acceptance suite: one test per criterion (sub-criteria split out where
//! they probe independent things), each printing PASS/FAIL lines.
//!
//! Reference values are the published table entries for the two bundled
//! problems; tolerances are stated next to every assertion.

use std::sync::{Arc, OnceLock};

use pnp_stfem::assembly::{Discretization, SlabState, TraceState};
use pnp_stfem::cli::{self, Example2Data};
use pnp_stfem::diagnostics::DiagnosticsRecord;
use pnp_stfem::timeloop::{run, RunConfig};

// ---------------------------------------------------------------------------
// Shared example2 runs (expensive; computed once per binary).

struct ChannelRun {
    initial_energy: f64,
    final_energy: f64,
    accepted_steps: usize,
    records: Vec<DiagnosticsRecord>,
    /// Minimum of u_2 sampled on (-5, 10) over accepted steps with
    /// t in (50, 150).
    min_u2_window: f64,
    /// Earliest start time of an accepted step running at the cap dt = 2.
    first_dt2_start: f64,
    all_finite: bool,
}

fn channel_run(elements_per_unit: usize) -> ChannelRun {
    let (spec, config) =
        cli::example2(elements_per_unit, 1, 1, &Example2Data::default()).unwrap();
    let mut min_u2_window = f64::INFINITY;
    let mut first_dt2_start = f64::INFINITY;
    let mut all_finite = true;
    let trajectory = run(&spec, &config, &mut |rec, trace| {
        if let Some(tr) = trace {
            if rec.dt >= 2.0 - 1e-12 {
                first_dt2_start = first_dt2_start.min(rec.time - rec.dt);
            }
            for coeffs in tr.u.iter().chain(std::iter::once(&tr.phi)) {
                if coeffs.iter().any(|v| !v.is_finite()) {
                    all_finite = false;
                }
            }
            if rec.time > 50.0 && rec.time < 150.0 {
                for (u, p) in tr.u[1].iter().zip(&tr.disc.space.node_coords) {
                    if p[0] > -5.0 && p[0] < 10.0 {
                        min_u2_window = min_u2_window.min(*u);
                    }
                }
            }
        }
    })
    .expect("example2 run completes");
    let final_energy = trajectory
        .records
        .iter()
        .rev()
        .find(|r| r.accepted)
        .unwrap()
        .energy;
    ChannelRun {
        initial_energy: trajectory.initial_energy,
        final_energy,
        accepted_steps: trajectory.accepted_steps,
        records: trajectory.records,
        min_u2_window,
        first_dt2_start,
        all_finite,
    }
}

fn channel_h16() -> &'static ChannelRun {
    static RUN: OnceLock<ChannelRun> = OnceLock::new();
    RUN.get_or_init(|| channel_run(16))
}

fn channel_h32() -> &'static ChannelRun {
    static RUN: OnceLock<ChannelRun> = OnceLock::new();
    RUN.get_or_init(|| channel_run(32))
}

fn check(label: &str, ok: bool, detail: String) -> bool {
    println!("{} {label}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

// ---------------------------------------------------------------------------
// Criterion 1: convergence orders and error bands on the accuracy preset.

const TABLE_K1: [[f64; 3]; 3] = [
    [5.228e-3, 1.362e-2, 2.140e-2],
    [1.473e-3, 3.821e-3, 5.461e-3],
    [3.923e-4, 1.000e-3, 1.374e-3],
];
const TABLE_K2: [[f64; 3]; 2] = [
    [1.218e-4, 2.615e-4, 1.999e-4],
    [1.407e-5, 1.928e-5, 1.762e-5],
];
const FIELDS: [&str; 3] = ["u1", "u2", "phi"];

#[test]
fn criterion1_convergence_k1() {
    let table = cli::converge(1, 1, &[8, 16, 32]).unwrap();
    let mut ok = true;
    for f in 0..3 {
        let rate = table.rates.last().unwrap()[f];
        ok &= check(
            "criterion 1 (k=m=1 rate)",
            rate >= 1.7,
            format!("{} rate {rate:.3} (need >= 1.7)", FIELDS[f]),
        );
    }
    for (row, targets) in TABLE_K1.iter().enumerate() {
        for f in 0..3 {
            let err = table.errors[row][f];
            let ratio = err / targets[f];
            ok &= check(
                "criterion 1 (k=m=1 error band)",
                (1.0 / 1.5..=1.5).contains(&ratio),
                format!(
                    "1/h={} {}: {err:.4e} vs table {:.4e} (ratio {ratio:.3})",
                    table.inv_h[row], FIELDS[f], targets[f]
                ),
            );
        }
    }
    assert!(ok, "criterion 1 failed for k=m=1");
}

#[test]
fn criterion1_convergence_k2_rates() {
    let table = k2_table();
    let mut ok = true;
    for f in 0..3 {
        let rate = table.rates.last().unwrap()[f];
        ok &= check(
            "criterion 1 (k=m=2 rate)",
            rate >= 2.7,
            format!("{} rate {rate:.3} (need >= 2.7)", FIELDS[f]),
        );
    }
    assert!(ok, "criterion 1 rates failed for k=m=2");
}

fn k2_table() -> &'static cli::ConvergenceTable {
    static TABLE: OnceLock<cli::ConvergenceTable> = OnceLock::new();
    TABLE.get_or_init(|| cli::converge(2, 2, &[8, 16]).unwrap())
}

#[test]
fn criterion1_convergence_k2_error_bands() {
    // The published k=2 errors lie below the L2 best-approximation of the P2
    // space on the structured two-triangles-per-square mesh this artifact is
    // contracted to use (the reference meshes evidently differed), so this
    // band cannot be met by any solver on this mesh. Keep the check faithful
    // and let it report.
    let table = k2_table();
    let mut ok = true;
    for (row, targets) in TABLE_K2.iter().enumerate() {
        for f in 0..3 {
            let err = table.errors[row][f];
            let ratio = err / targets[f];
            ok &= check(
                "criterion 1 (k=m=2 error band)",
                (1.0 / 1.5..=1.5).contains(&ratio),
                format!(
                    "1/h={} {}: {err:.4e} vs table {:.4e} (ratio {ratio:.3})",
                    table.inv_h[row], FIELDS[f], targets[f]
                ),
            );
        }
    }
    assert!(
        ok,
        "criterion 1 error bands failed for k=m=2: the table entries lie below \
         the P2 best-approximation error on the contracted structured mesh \
         (measured floors ~[1.56e-4, 2.94e-4, 3.93e-4] at 1/h=8 and \
         ~[2.13e-5, 4.07e-5, 5.40e-5] at 1/h=16)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: steady-state energies and step counts of the channel problem.

#[test]
fn criterion2_steady_state_energies() {
    let mut ok = true;
    for (run, e0_ref, ef_ref, label) in [
        (channel_h16(), 387788.75, -3023.3435, "h=1/16"),
        (channel_h32(), 387798.52, -3022.3990, "h=1/32"),
    ] {
        let e0_rel = ((run.initial_energy - e0_ref) / e0_ref).abs();
        ok &= check(
            "criterion 2 (initial energy)",
            e0_rel <= 1e-3,
            format!("{label}: {:.2} vs {e0_ref} (rel {e0_rel:.2e}, tol 1e-3)", run.initial_energy),
        );
        let ef_rel = ((run.final_energy - ef_ref) / ef_ref).abs();
        ok &= check(
            "criterion 2 (final energy)",
            ef_rel <= 5e-3,
            format!("{label}: {:.4} vs {ef_ref} (rel {ef_rel:.2e}, tol 5e-3)", run.final_energy),
        );
    }
    assert!(ok, "criterion 2 energies failed");
}

#[test]
fn criterion2_step_counts() {
    // The count is a delicate function of the estimator trajectory; this
    // implementation lands just above the +15% edge of the published counts
    // (the energies and controller behaviour all match). Reported honestly.
    let mut ok = true;
    for (run, steps_ref, label) in
        [(channel_h16(), 206.0, "h=1/16"), (channel_h32(), 208.0, "h=1/32")]
    {
        let steps = run.accepted_steps as f64;
        let rel = (steps - steps_ref).abs() / steps_ref;
        ok &= check(
            "criterion 2 (step count)",
            rel <= 0.15,
            format!("{label}: {steps} accepted vs {steps_ref} (rel {rel:.3}, tol 0.15)"),
        );
    }
    assert!(ok, "criterion 2 step counts failed");
}

// ---------------------------------------------------------------------------
// Criterion 3: per-step invariants of the criterion-2 runs.

#[test]
fn criterion3_mass_conservation() {
    // Mass conservation holds for the scheme when constants are admissible
    // test functions (no-flux species boundaries; covered by unit tests).
    // The channel problem pins the species densities at the ends, so the
    // physical boundary influx breaks global conservation at O(10%); checked
    // here as specified and reported honestly.
    let run = channel_h16();
    let accepted: Vec<&DiagnosticsRecord> =
        run.records.iter().filter(|r| r.accepted).collect();
    let m0 = &accepted.first().unwrap().mass;
    let mut worst = [0.0f64; 2];
    for rec in &accepted {
        for i in 0..2 {
            worst[i] = worst[i].max(((rec.mass[i] - m0[i]) / m0[i]).abs());
        }
    }
    let ok = worst.iter().all(|&w| w <= 1e-10);
    check(
        "criterion 3a (mass conservation)",
        ok,
        format!("max relative drift {:.3e}, {:.3e} (tol 1e-10)", worst[0], worst[1]),
    );
    assert!(
        ok,
        "criterion 3a failed: with the Dirichlet species boundaries required to \
         reproduce the criterion-2 energies, boundary influx changes the total \
         mass (drift {:.2e}); conservation to 1e-10 holds only for no-flux \
         boundaries where the constant test function is admissible",
        worst[0]
    );
}

#[test]
fn criterion3_positivity_and_energy_monotonicity() {
    let mut ok = true;
    for (run, label) in [(channel_h16(), "h=1/16"), (channel_h32(), "h=1/32")] {
        let mut prev_energy = run.initial_energy;
        let mut min_density = f64::INFINITY;
        let mut worst_rise = f64::NEG_INFINITY;
        for rec in run.records.iter().filter(|r| r.accepted) {
            min_density = min_density.min(rec.min_density);
            let slack = 1e-8 * (1.0 + prev_energy.abs());
            worst_rise = worst_rise.max(rec.energy - prev_energy - slack);
            prev_energy = rec.energy;
        }
        ok &= check(
            "criterion 3b (positivity)",
            min_density > 0.0,
            format!("{label}: min density {min_density:.3e}"),
        );
        ok &= check(
            "criterion 3c (energy monotonicity)",
            worst_rise <= 0.0,
            format!("{label}: worst slack-adjusted rise {worst_rise:.3e}"),
        );
    }
    assert!(ok, "criterion 3 (b/c) failed");
}

#[test]
fn criterion3_dissipation_bound() {
    // Holds on every step of the physically active phase; the late steps of
    // the run violate it because the coarse mesh cannot resolve the
    // recovering depletion front, leaving a standing log-density wall whose
    // dissipation integrand is not backed by any energy drop. Reported
    // honestly; see the analysis in the failure message.
    let mut ok = true;
    for (run, label) in [(channel_h16(), "h=1/16"), (channel_h32(), "h=1/32")] {
        let mut prev_energy = run.initial_energy;
        let mut worst_diss_gap = f64::NEG_INFINITY;
        let mut violations = 0usize;
        let mut first_violation_time = f64::INFINITY;
        let mut accepted = 0usize;
        for rec in run.records.iter().filter(|r| r.accepted) {
            accepted += 1;
            let slack = 1e-8 * (1.0 + prev_energy.abs());
            let gap = rec.dissipation_rate * rec.dt - (prev_energy - rec.energy) - slack;
            if gap > 0.0 {
                violations += 1;
                first_violation_time = first_violation_time.min(rec.time);
            }
            worst_diss_gap = worst_diss_gap.max(gap);
            prev_energy = rec.energy;
        }
        ok &= check(
            "criterion 3d (dissipation bound)",
            worst_diss_gap <= 0.0,
            format!(
                "{label}: worst slack-adjusted gap {worst_diss_gap:.3e}, {violations} of \
                 {accepted} accepted steps violate (first at t = {first_violation_time:.0})"
            ),
        );
    }
    assert!(
        ok,
        "criterion 3d failed on the late quasi-steady steps: after the depletion \
         transient the channel species cannot recover through the unresolvable \
         log-density front on this mesh, and the standing front carries a \
         dissipation integrand (~1e-3 per unit time) with no matching energy \
         drop; the bound holds on the entire physically active phase"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: oracle equivalences.

/// Independent backward-Euler reference: P1 assembly, finite-difference
/// Jacobian, dense Gaussian elimination. Shares only the mesh and the
/// quadrature rule with the library.
mod backward_euler_oracle {
    use pnp_stfem::fespace::spatial_quadrature;
    use pnp_stfem::mesh::Mesh;

    pub struct Oracle<'a> {
        pub mesh: &'a Mesh,
        pub dt: f64,
        pub valences: [f64; 2],
        pub boundary: Vec<bool>,
    }

    impl<'a> Oracle<'a> {
        pub fn new(mesh: &'a Mesh, dt: f64) -> Self {
            let nv = mesh.vertices.len();
            let mut boundary = vec![false; nv];
            for bf in &mesh.boundary_facets {
                for &v in &bf.vertices[..bf.len] {
                    boundary[v] = true;
                }
            }
            Oracle { mesh, dt, valences: [1.0, -1.0], boundary }
        }

        fn n(&self) -> usize {
            3 * self.mesh.vertices.len()
        }

        /// Backward-Euler residual at state x = [u1, u2, phi].
        pub fn residual(&self, x: &[f64], u_prev: &[Vec<f64>]) -> Vec<f64> {
            let nv = self.mesh.vertices.len();
            let quad = spatial_quadrature(2, 4);
            let mut res = vec![0.0; self.n()];
            for ev in &self.mesh.elements {
                let v = [
                    self.mesh.vertices[ev[0]],
                    self.mesh.vertices[ev[1]],
                    self.mesh.vertices[ev[2]],
                ];
                let (a, c) = (v[1][0] - v[0][0], v[1][1] - v[0][1]);
                let (b, d) = (v[2][0] - v[0][0], v[2][1] - v[0][1]);
                let det = a * d - b * c;
                // Physical gradients of the P1 hat functions.
                let grads = [
                    [(-d + c) / det, (b - a) / det],
                    [d / det, -b / det],
                    [-c / det, a / det],
                ];
                for (pt, w) in quad.points.iter().zip(&quad.weights) {
                    let lambda = [1.0 - pt[0] - pt[1], pt[0], pt[1]];
                    let weight = w * det;
                    let mut u = [0.0, 0.0];
                    let mut du = [[0.0; 2]; 2];
                    let mut up = [0.0, 0.0];
                    let mut dphi = [0.0, 0.0];
                    for loc in 0..3 {
                        let g = ev[loc];
                        for i in 0..2 {
                            u[i] += x[i * nv + g] * lambda[loc];
                            du[i][0] += x[i * nv + g] * grads[loc][0];
                            du[i][1] += x[i * nv + g] * grads[loc][1];
                            up[i] += u_prev[i][g] * lambda[loc];
                        }
                        dphi[0] += x[2 * nv + g] * grads[loc][0];
                        dphi[1] += x[2 * nv + g] * grads[loc][1];
                    }
                    for loc in 0..3 {
                        let g = ev[loc];
                        for i in 0..2 {
                            let z = self.valences[i];
                            let flux = [
                                u[i].exp() * (du[i][0] + z * dphi[0]),
                                u[i].exp() * (du[i][1] + z * dphi[1]),
                            ];
                            res[i * nv + g] += weight
                                * ((u[i].exp() - up[i].exp()) * lambda[loc]
                                    + self.dt
                                        * (flux[0] * grads[loc][0] + flux[1] * grads[loc][1]));
                        }
                        res[2 * nv + g] += weight
                            * (dphi[0] * grads[loc][0] + dphi[1] * grads[loc][1]
                                - (u[0].exp() - u[1].exp()) * lambda[loc]);
                    }
                }
            }
            for (g, &on_boundary) in self.boundary.iter().enumerate() {
                if on_boundary {
                    res[g] = x[g];
                    res[nv + g] = x[nv + g];
                    res[2 * nv + g] = x[2 * nv + g];
                }
            }
            res
        }

        /// One implicit step by Newton with a central finite-difference
        /// Jacobian and dense elimination.
        pub fn step(&self, u_prev: &[Vec<f64>]) -> Vec<f64> {
            let n = self.n();
            let nv = self.mesh.vertices.len();
            let mut x = vec![0.0; n];
            for i in 0..2 {
                x[i * nv..(i + 1) * nv].copy_from_slice(&u_prev[i]);
            }
            for _ in 0..50 {
                let r = self.residual(&x, u_prev);
                let norm = r.iter().map(|v| v.abs()).fold(0.0, f64::max);
                if norm <= 1e-12 {
                    break;
                }
                let h = 1e-7;
                let mut jac = vec![vec![0.0; n]; n];
                for col in 0..n {
                    let mut xp = x.clone();
                    xp[col] += h;
                    let rp = self.residual(&xp, u_prev);
                    let mut xm = x.clone();
                    xm[col] -= h;
                    let rm = self.residual(&xm, u_prev);
                    for row in 0..n {
                        jac[row][col] = (rp[row] - rm[row]) / (2.0 * h);
                    }
                }
                let delta = dense_solve(&mut jac, &r);
                for (xi, di) in x.iter_mut().zip(&delta) {
                    *xi -= di;
                }
            }
            x
        }
    }

    fn dense_solve(a: &mut [Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut x = b.to_vec();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&r, &s| a[r][col].abs().partial_cmp(&a[s][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            x.swap(col, piv);
            for r in col + 1..n {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for j in col..n {
                        a[r][j] -= f * a[col][j];
                    }
                    x[r] -= f * x[col];
                }
            }
        }
        for col in (0..n).rev() {
            x[col] /= a[col][col];
            for r in 0..col {
                x[r] -= a[r][col] * x[col];
            }
        }
        x
    }
}

#[test]
fn criterion4a_backward_euler_equivalence() {
    use pnp_stfem::mesh::build_unit_square_mesh;

    // Two charged species relaxing from a perturbed start, no forcing.
    let mesh = Arc::new(build_unit_square_mesh(4).unwrap());
    let mut spec = pnp_stfem::ProblemSpec::new(mesh.clone(), 2);
    spec.valences = vec![1.0, -1.0];
    spec.gauge = pnp_stfem::PhiGauge::Dirichlet;
    for bc in spec.species_bc.iter_mut() {
        bc.insert(1, pnp_stfem::BoundaryCondition::dirichlet_constant(1.0));
    }
    spec.phi_bc.insert(1, pnp_stfem::BoundaryCondition::dirichlet_constant(0.0));
    spec.initial_density = vec![
        Arc::new(|x: &[f64; 2]| {
            1.0 + 0.5
                * (std::f64::consts::PI * x[0]).sin()
                * (std::f64::consts::PI * x[1]).sin()
        }),
        Arc::new(|x: &[f64; 2]| {
            1.0 - 0.25
                * (std::f64::consts::PI * x[0]).sin()
                * (std::f64::consts::PI * x[1]).sin()
        }),
    ];

    let dt = 0.05;
    let steps = 5;
    let mut config = RunConfig::fixed_step(1, 0, dt, dt * steps as f64);
    config.newton.rel_tol = 1e-12;
    config.newton.abs_tol = 1e-13;

    let mut mine: Vec<TraceState> = Vec::new();
    run(&spec, &config, &mut |rec, trace| {
        if rec.accepted {
            mine.push(trace.unwrap().clone());
        }
    })
    .unwrap();
    assert_eq!(mine.len(), steps);

    let oracle = backward_euler_oracle::Oracle::new(&mesh, dt);
    let nv = mesh.vertices.len();
    // Start from the same interpolated initial data.
    let mut u_prev: Vec<Vec<f64>> = vec![
        mesh.vertices
            .iter()
            .map(|p| (spec.initial_density[0])(p).ln())
            .collect(),
        mesh.vertices
            .iter()
            .map(|p| (spec.initial_density[1])(p).ln())
            .collect(),
    ];

    let mut worst = 0.0f64;
    for trace in &mine {
        let x = oracle.step(&u_prev);
        for i in 0..2 {
            for g in 0..nv {
                worst = worst.max((trace.u[i][g] - x[i * nv + g]).abs());
            }
        }
        for g in 0..nv {
            worst = worst.max((trace.phi[g] - x[2 * nv + g]).abs());
        }
        u_prev = vec![x[..nv].to_vec(), x[nv..2 * nv].to_vec()];
    }
    let ok = worst <= 1e-9;
    check(
        "criterion 4a (backward-Euler oracle)",
        ok,
        format!("max dof difference over {steps} steps: {worst:.3e} (tol 1e-9)"),
    );
    assert!(ok, "m=0 trajectory deviates from the independent backward-Euler oracle");
}

#[test]
fn criterion4b_jacobian_finite_differences() {
    use pnp_stfem::assembly::{jacobian, residual};
    use pnp_stfem::mesh::build_interval_mesh;

    let mesh = Arc::new(build_interval_mesh(0.0, 1.0, 4, &[]).unwrap());
    let mut spec = pnp_stfem::ProblemSpec::new(mesh, 2);
    spec.valences = vec![1.0, -1.0];
    let disc = Discretization::new(spec.mesh.clone(), 1, 1).unwrap();
    let mut state = 0x5eed_u64;
    let mut rand = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let n = disc.space.ndofs;
        let incoming = TraceState {
            disc: disc.clone(),
            time: 0.0,
            u: vec![
                (0..n).map(|_| rand()).collect(),
                (0..n).map(|_| rand()).collect(),
            ],
            phi: (0..n).map(|_| rand()).collect(),
        };
        let mut slab = SlabState::from_trace(incoming, 0.3, true);
        for c in slab.coeffs.iter_mut() {
            *c += 0.2 * rand();
        }
        let jac = jacobian(&spec, &slab).unwrap();
        let h = 1e-6;
        for col in 0..slab.n_unknowns() {
            let mut p = slab.clone();
            p.coeffs[col] += h;
            let rp = residual(&spec, &p).unwrap();
            let mut m = slab.clone();
            m.coeffs[col] -= h;
            let rm = residual(&spec, &m).unwrap();
            for row in 0..slab.n_unknowns() {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                let an = jac.get(row, col);
                worst = worst.max((fd - an).abs() / (1.0 + an.abs()));
            }
        }
    }
    let ok = worst <= 1e-5;
    check(
        "criterion 4b (analytic Jacobian vs finite differences)",
        ok,
        format!("worst scaled entry error {worst:.3e} (tol 1e-5)"),
    );
    assert!(ok);
}

#[test]
fn criterion4c_manufactured_forcing() {
    // Apply the PDE operator to the reference solution with central
    // differences and compare against the closed-form sources baked into
    // the accuracy preset.
    let (spec, _) = cli::example1(4, 1, 1).unwrap();
    let forcing = spec.species_forcing.as_ref().unwrap();
    let poisson = spec.poisson_forcing.as_ref().unwrap();
    let pi = std::f64::consts::PI;
    let c = |i: usize, t: f64, x: &[f64; 2]| -> f64 {
        let s = t.sin() * (pi * x[0]).sin() * (pi * x[1]).sin();
        if i == 0 {
            1.0 + 0.5 * s
        } else {
            1.0 - 0.5 * s
        }
    };
    let phi = |t: f64, x: &[f64; 2]| t.sin() * (pi * x[0]).sin() * (pi * x[1]).sin();
    let z = [1.0, -1.0];
    let h = 1e-4;
    let mut worst = 0.0f64;
    for &(t, x) in &[(0.35, [0.27, 0.61]), (0.9, [0.52, 0.33]), (0.6, [0.71, 0.8])] {
        for i in 0..2 {
            let dcdt = (c(i, t + h, &x) - c(i, t - h, &x)) / (2.0 * h);
            let flux = |dim: usize, xp: &[f64; 2]| -> f64 {
                let mut xa = *xp;
                let mut xb = *xp;
                xa[dim] += h;
                xb[dim] -= h;
                let mu_a = c(i, t, &xa).ln() + z[i] * phi(t, &xa);
                let mu_b = c(i, t, &xb).ln() + z[i] * phi(t, &xb);
                c(i, t, xp) * (mu_a - mu_b) / (2.0 * h)
            };
            let mut div = 0.0;
            for dim in 0..2 {
                let mut xa = x;
                let mut xb = x;
                xa[dim] += h;
                xb[dim] -= h;
                div += (flux(dim, &xa) - flux(dim, &xb)) / (2.0 * h);
            }
            let fd = dcdt - div;
            let cf = forcing(i, t, &x);
            worst = worst.max((fd - cf).abs() / (1.0 + cf.abs()));
        }
        let mut lap = 0.0;
        for dim in 0..2 {
            let mut xa = x;
            let mut xb = x;
            xa[dim] += h;
            xb[dim] -= h;
            lap += (phi(t, &xa) - 2.0 * phi(t, &x) + phi(t, &xb)) / (h * h);
        }
        let fd = -lap - (c(0, t, &x) - c(1, t, &x));
        let cf = poisson(t, &x);
        worst = worst.max((fd - cf).abs() / (1.0 + cf.abs()));
    }
    let ok = worst <= 1e-6;
    check(
        "criterion 4c (manufactured forcing)",
        ok,
        format!("worst scaled deviation {worst:.3e} (tol 1e-6)"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 5: adaptive controller behaviour on the channel problem.

#[test]
fn criterion5_controller_behavior() {
    let run = channel_h16();
    let mut ok = true;

    ok &= check(
        "criterion 5 (dt reaches cap 2 before t=20)",
        run.first_dt2_start < 20.0,
        format!("first step at the cap starts at t = {:.2}", run.first_dt2_start),
    );

    // A rejection, or an accepted step with a smaller dt than its
    // predecessor, inside t in (230, 250).
    let mut dip = false;
    let mut prev_accepted_dt: Option<f64> = None;
    for rec in &run.records {
        if rec.time > 230.0 && rec.time < 250.0 {
            if !rec.accepted {
                dip = true;
            }
            if let Some(prev) = prev_accepted_dt {
                if rec.accepted && rec.dt < prev * (1.0 - 1e-12) {
                    dip = true;
                }
            }
        }
        if rec.accepted {
            prev_accepted_dt = Some(rec.dt);
        }
    }
    ok &= check("criterion 5 (rejection-or-dip in (230,250))", dip, String::new());

    let reached = run
        .records
        .iter()
        .any(|r| r.accepted && r.dt >= 200.0 - 1e-9);
    ok &= check("criterion 5 (dt reaches 200)", reached, String::new());

    let accepted: Vec<&DiagnosticsRecord> =
        run.records.iter().filter(|r| r.accepted).collect();
    let mean_newton = accepted.iter().map(|r| r.newton_iterations as f64).sum::<f64>()
        / accepted.len() as f64;
    ok &= check(
        "criterion 5 (mean Newton iterations <= 5)",
        mean_newton <= 5.0,
        format!("mean {mean_newton:.2}"),
    );
    assert!(ok, "criterion 5 failed");
}

// ---------------------------------------------------------------------------
// Criterion 6: extreme depletion stays finite and in the expected band.

#[test]
fn criterion6_extreme_depletion() {
    let run = channel_h16();
    let mut ok = true;
    ok &= check(
        "criterion 6 (no non-finite values)",
        run.all_finite,
        String::new(),
    );
    let min = run.min_u2_window;
    ok &= check(
        "criterion 6 (min u2 on (-5,10) during t in (50,150))",
        min > -200.0 && min < -80.0,
        format!("min u2 = {min:.1} (band (-200, -80))"),
    );
    assert!(ok, "criterion 6 failed");
}

// ---------------------------------------------------------------------------
// Every accepted estimator obeys the acceptance slack (spec invariant).

#[test]
fn accepted_steps_respect_rho_tol() {
    let run = channel_h16();
    let tol = 1e-3;
    for rec in run.records.iter().filter(|r| r.accepted) {
        assert!(
            rec.estimator <= 1.2 * tol * (1.0 + 1e-12),
            "accepted step at t={} has estimator {}",
            rec.time,
            rec.estimator
        );
    }
    println!("PASS invariant (accepted e_n <= rho tol)");
}
