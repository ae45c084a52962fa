//! Observables of a run: discrete energy, physical dissipation, per-species
//! mass, minimum density, and L2 errors against reference fields.

use crate::assembly::{ProblemSpec, SlabState, TraceState};

/// Entropy density U(eta) = exp(eta)(eta - 1); U >= -1 with equality at 0.
#[inline]
pub fn entropy(eta: f64) -> f64 {
    eta.exp() * (eta - 1.0)
}

/// One record per attempted time step.
#[derive(Debug, Clone)]
pub struct DiagnosticsRecord {
    /// Index of the step this attempt belongs to (accepted steps count up).
    pub step: usize,
    /// End time of the attempted slab.
    pub time: f64,
    pub dt: f64,
    /// Discrete energy at the slab's right trace.
    pub energy: f64,
    /// Physical dissipation over the slab divided by dt.
    pub dissipation_rate: f64,
    /// (E_prev - E) / dt.
    pub energy_drop_rate: f64,
    /// E_prev - E - Diss: the numerical dissipation of the step.
    pub numerical_dissipation: f64,
    /// Per-species mass at the right trace.
    pub mass: Vec<f64>,
    /// Minimum density over all space-time quadrature points and species.
    pub min_density: f64,
    pub newton_iterations: usize,
    /// Energy-based error estimator (0 in fixed-step mode, NaN if the solve
    /// failed before an estimate existed).
    pub estimator: f64,
    pub accepted: bool,
    /// 1 for a first try, counting up with every retry of the same step.
    pub attempts: usize,
}

/// Evaluate all fields of a trace on each element quadrature point and fold
/// the results. The closure sees (element, quad weight including the cross
/// section and Jacobian, plain quad weight times Jacobian, per-species value
/// and gradient of u, phi gradient).
fn fold_trace<F>(spec: &ProblemSpec, trace: &TraceState, mut visit: F)
where
    F: FnMut(usize, f64, f64, &[f64], &[[f64; 2]], [f64; 2]),
{
    let disc = &trace.disc;
    let space = &disc.space;
    let sq = &disc.space_quad;
    let table = space.tabulate(&sq.points);
    let n_species = trace.u.len();
    let n_loc = space.n_local();
    let mut u_vals = vec![0.0; n_species];
    let mut u_grads = vec![[0.0f64; 2]; n_species];
    let mut grads = vec![[0.0f64; 2]; n_loc];
    for e in 0..spec.mesh.n_elements() {
        let dofs = &space.elem_dofs[e];
        let det = space.geometry(e).det;
        for gq in 0..sq.len() {
            let vals = &table.values[gq];
            for (a, rg) in table.ref_gradients[gq].iter().enumerate() {
                grads[a] = space.map_gradient(e, rg);
            }
            let x = space.map_to_physical(e, &sq.points[gq]);
            let a_coef = spec.cross_section.evaluate(&spec.mesh, e, &x);
            let w = sq.weights[gq] * det;
            for i in 0..n_species {
                let mut v = 0.0;
                let mut gx = 0.0;
                let mut gy = 0.0;
                for (a, &d) in dofs.iter().enumerate() {
                    let c = trace.u[i][d];
                    v += c * vals[a];
                    gx += c * grads[a][0];
                    gy += c * grads[a][1];
                }
                u_vals[i] = v;
                u_grads[i] = [gx, gy];
            }
            let mut phi_grad = [0.0, 0.0];
            for (a, &d) in dofs.iter().enumerate() {
                phi_grad[0] += trace.phi[d] * grads[a][0];
                phi_grad[1] += trace.phi[d] * grads[a][1];
            }
            visit(e, w * a_coef, w, &u_vals, &u_grads, phi_grad);
        }
    }
}

/// Discrete free energy at a trace:
/// int A (sum_i U(u_i) + eps/(2 k_B T) |grad phi|^2) dx.
pub fn energy(spec: &ProblemSpec, trace: &TraceState) -> f64 {
    let half_inv_kbt = 0.5 * spec.inv_thermal_energy();
    let mut total = 0.0;
    let disc = trace.disc.clone();
    let space = &disc.space;
    let sq = &disc.space_quad;
    let table = space.tabulate(&sq.points);
    // The electrostatic term needs eps per element; fold manually.
    let n_species = trace.u.len();
    let n_loc = space.n_local();
    let mut grads = vec![[0.0f64; 2]; n_loc];
    for e in 0..spec.mesh.n_elements() {
        let dofs = &space.elem_dofs[e];
        let det = space.geometry(e).det;
        for gq in 0..sq.len() {
            let vals = &table.values[gq];
            for (a, rg) in table.ref_gradients[gq].iter().enumerate() {
                grads[a] = space.map_gradient(e, rg);
            }
            let x = space.map_to_physical(e, &sq.points[gq]);
            let a_coef = spec.cross_section.evaluate(&spec.mesh, e, &x);
            let eps = spec.permittivity.evaluate(&spec.mesh, e, &x);
            let w = sq.weights[gq] * det * a_coef;
            let mut val = 0.0;
            for i in 0..n_species {
                let mut u = 0.0;
                for (a, &d) in dofs.iter().enumerate() {
                    u += trace.u[i][d] * vals[a];
                }
                val += entropy(u);
            }
            let mut pg = [0.0, 0.0];
            for (a, &d) in dofs.iter().enumerate() {
                pg[0] += trace.phi[d] * grads[a][0];
                pg[1] += trace.phi[d] * grads[a][1];
            }
            val += eps * half_inv_kbt * (pg[0] * pg[0] + pg[1] * pg[1]);
            total += w * val;
        }
    }
    total
}

/// Mass of one species at a trace: int A exp(u_i) dx with the assembly
/// quadrature.
pub fn mass(spec: &ProblemSpec, trace: &TraceState, species: usize) -> f64 {
    let mut total = 0.0;
    fold_trace(spec, trace, |_, wa, _, u_vals, _, _| {
        total += wa * u_vals[species].exp();
    });
    total
}

/// All species masses at once.
pub fn masses(spec: &ProblemSpec, trace: &TraceState) -> Vec<f64> {
    let n = trace.u.len();
    let mut out = vec![0.0; n];
    fold_trace(spec, trace, |_, wa, _, u_vals, _, _| {
        for i in 0..n {
            out[i] += wa * u_vals[i].exp();
        }
    });
    out
}

/// Physical dissipation of a converged slab:
/// int over the slab of A sum_i D_i exp(u_i) |grad u_i + (z_i e / k_B T) grad phi|^2.
pub fn dissipation(spec: &ProblemSpec, slab: &SlabState) -> f64 {
    let disc = &slab.disc;
    let space = &disc.space;
    let sq = &disc.space_quad;
    let tq = &disc.time_quad;
    let table = space.tabulate(&sq.points);
    let t_vals: Vec<Vec<f64>> = tq.points.iter().map(|p| disc.time_basis.values(p[0])).collect();
    let n_species = slab.n_species();
    let n_modes = slab.n_modes();
    let n_loc = space.n_local();
    let mut grads = vec![[0.0f64; 2]; n_loc];
    let mut total = 0.0;
    for e in 0..spec.mesh.n_elements() {
        let dofs = &space.elem_dofs[e];
        let det = space.geometry(e).det;
        for gq in 0..sq.len() {
            let vals = &table.values[gq];
            for (a, rg) in table.ref_gradients[gq].iter().enumerate() {
                grads[a] = space.map_gradient(e, rg);
            }
            let x = space.map_to_physical(e, &sq.points[gq]);
            let a_coef = spec.cross_section.evaluate(&spec.mesh, e, &x);
            let w = sq.weights[gq] * det * a_coef;
            for (g, lv) in t_vals.iter().enumerate() {
                let mut phi_grad = [0.0, 0.0];
                for q in 0..n_modes {
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for (a, &d) in dofs.iter().enumerate() {
                        let c = slab.coeffs[slab.phi_index(q, d)];
                        gx += c * grads[a][0];
                        gy += c * grads[a][1];
                    }
                    phi_grad[0] += lv[q] * gx;
                    phi_grad[1] += lv[q] * gy;
                }
                let mut point_sum = 0.0;
                for i in 0..n_species {
                    let mut u = 0.0;
                    let mut ug = [0.0, 0.0];
                    for q in 0..n_modes {
                        let mut v = 0.0;
                        let mut gx = 0.0;
                        let mut gy = 0.0;
                        for (a, &d) in dofs.iter().enumerate() {
                            let c = slab.coeffs[slab.species_index(i, q, d)];
                            v += c * vals[a];
                            gx += c * grads[a][0];
                            gy += c * grads[a][1];
                        }
                        u += lv[q] * v;
                        ug[0] += lv[q] * gx;
                        ug[1] += lv[q] * gy;
                    }
                    let beta = spec.drift_coeff(i);
                    let mu_grad =
                        [ug[0] + beta * phi_grad[0], ug[1] + beta * phi_grad[1]];
                    point_sum += spec.diffusivities[i]
                        * u.exp()
                        * (mu_grad[0] * mu_grad[0] + mu_grad[1] * mu_grad[1]);
                }
                total += slab.dt * tq.weights[g] * w * point_sum;
            }
        }
    }
    total
}

/// Minimum density over all space-time quadrature points (plus the right
/// trace) and all species of a slab.
pub fn min_density(spec: &ProblemSpec, slab: &SlabState) -> f64 {
    let disc = &slab.disc;
    let space = &disc.space;
    let sq = &disc.space_quad;
    let tq = &disc.time_quad;
    let table = space.tabulate(&sq.points);
    let mut eval_times: Vec<Vec<f64>> =
        tq.points.iter().map(|p| disc.time_basis.values(p[0])).collect();
    eval_times.push(disc.time_basis.values(1.0));
    let n_species = slab.n_species();
    let n_modes = slab.n_modes();
    let mut min = f64::INFINITY;
    for e in 0..spec.mesh.n_elements() {
        let dofs = &space.elem_dofs[e];
        for gq in 0..sq.len() {
            let vals = &table.values[gq];
            for i in 0..n_species {
                for lv in &eval_times {
                    let mut u = 0.0;
                    for q in 0..n_modes {
                        let mut v = 0.0;
                        for (a, &d) in dofs.iter().enumerate() {
                            v += slab.coeffs[slab.species_index(i, q, d)] * vals[a];
                        }
                        u += lv[q] * v;
                    }
                    min = min.min(u.exp());
                }
            }
        }
    }
    min
}

/// L2 errors of (u_1, .., u_N, phi) at a trace against exact fields
/// evaluated at the trace time.
pub fn l2_errors(
    spec: &ProblemSpec,
    trace: &TraceState,
    exact: &[Box<dyn Fn(&[f64; 2]) -> f64 + '_>],
) -> Vec<f64> {
    let disc = &trace.disc;
    let space = &disc.space;
    let sq = &disc.space_quad;
    let table = space.tabulate(&sq.points);
    let n_species = trace.u.len();
    assert_eq!(exact.len(), n_species + 1, "need one exact field per species plus phi");
    let mut sums = vec![0.0; n_species + 1];
    for e in 0..spec.mesh.n_elements() {
        let dofs = &space.elem_dofs[e];
        let det = space.geometry(e).det;
        for gq in 0..sq.len() {
            let vals = &table.values[gq];
            let x = space.map_to_physical(e, &sq.points[gq]);
            let w = sq.weights[gq] * det;
            for f in 0..=n_species {
                let coeffs: &[f64] = if f < n_species { &trace.u[f] } else { &trace.phi };
                let mut v = 0.0;
                for (a, &d) in dofs.iter().enumerate() {
                    v += coeffs[d] * vals[a];
                }
                let diff = v - exact[f](&x);
                sums[f] += w * diff * diff;
            }
        }
    }
    sums.iter().map(|s| s.sqrt()).collect()
}
