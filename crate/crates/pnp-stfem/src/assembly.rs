//! Nonlinear residual and Jacobian of the fully discrete space-time system
//! on one slab.
//!
//! Unknowns per slab are the entropy variables u_i (densities are
//! c_i = exp(u_i)) and the potential phi, each spatial Pk tensor temporal Pm
//! in a Lagrange basis at right Gauss-Radau points. The species equations use
//! an upwind DG jump in time, written in flux form (integrated by parts in
//! time) so that constant-in-time test functions telescope exactly and mass
//! is conserved to solver precision under any quadrature. The Poisson
//! equation is tested against temporal degree m-1 over the slab interior and
//! enforced exactly at the right endpoint.
//!
//! Unknown ordering: species-major, then temporal mode, then spatial dof;
//! phi after all species; zero-mean gauge multipliers last.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fespace::{
    build_space, spatial_quadrature, temporal_quadrature, QuadratureRule, SpatialSpace,
    TemporalBasis,
};
use crate::mesh::{CoefficientField, Mesh, ScalarField};
use crate::solver::{lu_solve, SparseMatrix};

/// exp() arguments beyond this are treated as a diverged Newton state.
pub const EXP_OVERFLOW_GUARD: f64 = 700.0;

/// A scalar field of time and space.
pub type TimeField = Arc<dyn Fn(f64, &[f64; 2]) -> f64 + Send + Sync>;
/// Per-species forcing: (species, t, x) -> value.
pub type SpeciesForcing = Arc<dyn Fn(usize, f64, &[f64; 2]) -> f64 + Send + Sync>;

/// Boundary condition for one field on one boundary marker.
#[derive(Clone)]
pub enum BoundaryCondition {
    /// Prescribed value as a function of (t, x). For species this is the
    /// *density* c > 0; the entropy variable is set to its logarithm.
    Dirichlet(TimeField),
    /// Natural (zero-flux) condition: nothing to assemble.
    Natural,
}

impl BoundaryCondition {
    pub fn dirichlet_constant(v: f64) -> Self {
        BoundaryCondition::Dirichlet(Arc::new(move |_, _| v))
    }
}

/// How the potential is pinned down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiGauge {
    /// Dirichlet markers on phi fix the constant.
    Dirichlet,
    /// Pure-Neumann problem; the mean of phi is constrained to zero at every
    /// temporal node via scalar multipliers.
    ZeroMean,
}

/// Complete problem description: species data, coefficient fields, boundary
/// conditions, optional manufactured forcing, initial densities.
#[derive(Clone)]
pub struct ProblemSpec {
    pub mesh: Arc<Mesh>,
    pub n_species: usize,
    pub valences: Vec<f64>,
    pub diffusivities: Vec<f64>,
    pub unit_charge: f64,
    pub boltzmann: f64,
    pub temperature: f64,
    pub permittivity: CoefficientField,
    pub fixed_charge: CoefficientField,
    pub cross_section: CoefficientField,
    /// Per species, per boundary marker.
    pub species_bc: Vec<BTreeMap<i32, BoundaryCondition>>,
    pub phi_bc: BTreeMap<i32, BoundaryCondition>,
    pub gauge: PhiGauge,
    pub species_forcing: Option<SpeciesForcing>,
    pub poisson_forcing: Option<TimeField>,
    pub initial_density: Vec<ScalarField>,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("n_species", &self.n_species)
            .field("valences", &self.valences)
            .field("diffusivities", &self.diffusivities)
            .field("gauge", &self.gauge)
            .field("elements", &self.mesh.n_elements())
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    /// Neutral defaults: no charge, unit coefficients, natural boundary
    /// conditions, zero-mean gauge, unit initial densities.
    pub fn new(mesh: Arc<Mesh>, n_species: usize) -> Self {
        ProblemSpec {
            mesh,
            n_species,
            valences: vec![0.0; n_species],
            diffusivities: vec![1.0; n_species],
            unit_charge: 1.0,
            boltzmann: 1.0,
            temperature: 1.0,
            permittivity: CoefficientField::Constant(1.0),
            fixed_charge: CoefficientField::Constant(0.0),
            cross_section: CoefficientField::Constant(1.0),
            species_bc: vec![BTreeMap::new(); n_species],
            phi_bc: BTreeMap::new(),
            gauge: PhiGauge::ZeroMean,
            species_forcing: None,
            poisson_forcing: None,
            initial_density: (0..n_species)
                .map(|_| Arc::new(|_: &[f64; 2]| 1.0) as ScalarField)
                .collect(),
        }
    }

    /// Drift coefficient z_i e / (k_B T) of a species.
    pub fn drift_coeff(&self, i: usize) -> f64 {
        self.valences[i] * self.unit_charge / (self.boltzmann * self.temperature)
    }

    /// Charge z_i e carried per unit density of a species.
    pub fn species_charge(&self, i: usize) -> f64 {
        self.valences[i] * self.unit_charge
    }

    /// 1 / (k_B T), the weight of the electrostatic energy term.
    pub fn inv_thermal_energy(&self) -> f64 {
        1.0 / (self.boltzmann * self.temperature)
    }

    pub fn validate(&self) -> Result<()> {
        if self.valences.len() != self.n_species
            || self.diffusivities.len() != self.n_species
            || self.species_bc.len() != self.n_species
            || self.initial_density.len() != self.n_species
        {
            return Err(Error::InvalidInput(
                "per-species field lengths do not match the species count".into(),
            ));
        }
        if self.gauge == PhiGauge::ZeroMean
            && self
                .phi_bc
                .values()
                .any(|bc| matches!(bc, BoundaryCondition::Dirichlet(_)))
        {
            return Err(Error::InvalidInput(
                "zero-mean gauge is incompatible with Dirichlet conditions on phi".into(),
            ));
        }
        for field in [&self.permittivity, &self.cross_section, &self.fixed_charge] {
            if !field.covers(&self.mesh) {
                return Err(Error::InvalidInput(
                    "coefficient field does not cover all mesh regions".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Spatial space, temporal bases and quadrature bundled for one run.
#[derive(Debug)]
pub struct Discretization {
    pub space: SpatialSpace,
    /// Temporal trial/test basis of degree m.
    pub time_basis: TemporalBasis,
    /// Temporal test basis of degree m-1 for the interior Poisson rows;
    /// absent when m = 0.
    pub poisson_test: Option<TemporalBasis>,
    pub time_quad: QuadratureRule,
    pub space_quad: QuadratureRule,
}

impl Discretization {
    /// Default quadrature: m+3 Gauss points in time, spatial exactness
    /// 2k+2. Both can be overridden with [`Discretization::with_quadrature`].
    pub fn new(mesh: Arc<Mesh>, k: usize, m: usize) -> Result<Arc<Self>> {
        Self::with_quadrature(mesh, k, m, m + 3, 2 * k + 2)
    }

    pub fn with_quadrature(
        mesh: Arc<Mesh>,
        k: usize,
        m: usize,
        time_points: usize,
        space_order: usize,
    ) -> Result<Arc<Self>> {
        let dim = mesh.dim;
        let space = build_space(mesh, k)?;
        Ok(Arc::new(Discretization {
            space,
            time_basis: TemporalBasis::radau_right(m),
            poisson_test: if m > 0 { Some(TemporalBasis::radau_right(m - 1)) } else { None },
            time_quad: temporal_quadrature(time_points.max(1)),
            space_quad: spatial_quadrature(dim, space_order),
        }))
    }

    pub fn temporal_degree(&self) -> usize {
        self.time_basis.degree
    }
}

/// Spatial coefficient vectors of all fields at one time trace.
#[derive(Debug, Clone)]
pub struct TraceState {
    pub disc: Arc<Discretization>,
    pub time: f64,
    /// Entropy-variable coefficients per species.
    pub u: Vec<Vec<f64>>,
    pub phi: Vec<f64>,
}

/// Unknowns of one space-time slab plus the incoming trace.
#[derive(Debug, Clone)]
pub struct SlabState {
    pub disc: Arc<Discretization>,
    pub t_start: f64,
    pub dt: f64,
    pub incoming: TraceState,
    /// Flat unknown vector; see the module docs for the ordering.
    pub coeffs: Vec<f64>,
    pub zero_mean: bool,
}

impl SlabState {
    /// Initial guess for a slab: the incoming trace extended constant in
    /// time (which keeps the represented densities positive).
    pub fn from_trace(incoming: TraceState, dt: f64, zero_mean: bool) -> SlabState {
        let disc = incoming.disc.clone();
        let n_species = incoming.u.len();
        let n_space = disc.space.ndofs;
        let n_modes = disc.time_basis.n_modes();
        let n = (n_species + 1) * n_modes * n_space + if zero_mean { n_modes } else { 0 };
        let mut coeffs = vec![0.0; n];
        for i in 0..n_species {
            for q in 0..n_modes {
                let base = (i * n_modes + q) * n_space;
                coeffs[base..base + n_space].copy_from_slice(&incoming.u[i]);
            }
        }
        for q in 0..n_modes {
            let base = (n_species * n_modes + q) * n_space;
            coeffs[base..base + n_space].copy_from_slice(&incoming.phi);
        }
        SlabState { disc, t_start: incoming.time, dt, incoming, coeffs, zero_mean }
    }

    pub fn n_species(&self) -> usize {
        self.incoming.u.len()
    }

    pub fn n_modes(&self) -> usize {
        self.disc.time_basis.n_modes()
    }

    pub fn n_space(&self) -> usize {
        self.disc.space.ndofs
    }

    pub fn n_unknowns(&self) -> usize {
        (self.n_species() + 1) * self.n_modes() * self.n_space()
            + if self.zero_mean { self.n_modes() } else { 0 }
    }

    pub fn t_end(&self) -> f64 {
        self.t_start + self.dt
    }

    #[inline]
    pub fn species_index(&self, i: usize, q: usize, s: usize) -> usize {
        (i * self.n_modes() + q) * self.n_space() + s
    }

    #[inline]
    pub fn phi_index(&self, q: usize, s: usize) -> usize {
        (self.n_species() * self.n_modes() + q) * self.n_space() + s
    }

    #[inline]
    pub fn gauge_index(&self, q: usize) -> usize {
        (self.n_species() + 1) * self.n_modes() * self.n_space() + q
    }

    /// The slab's right trace (the last temporal mode, since the basis nodes
    /// are right Gauss-Radau points with t = 1 last).
    pub fn right_trace(&self) -> TraceState {
        let n_space = self.n_space();
        let m = self.n_modes() - 1;
        let u = (0..self.n_species())
            .map(|i| {
                let base = self.species_index(i, m, 0);
                self.coeffs[base..base + n_space].to_vec()
            })
            .collect();
        let base = self.phi_index(m, 0);
        let phi = self.coeffs[base..base + n_space].to_vec();
        TraceState { disc: self.disc.clone(), time: self.t_end(), u, phi }
    }
}

/// Dirichlet-constrained unknowns of a slab: (flat index, prescribed value).
pub fn dirichlet_values(spec: &ProblemSpec, slab: &SlabState) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    let nodes = &slab.disc.time_basis.nodes;
    let coords = &slab.disc.space.node_coords;
    for (i, bcs) in spec.species_bc.iter().enumerate() {
        for (marker, bc) in bcs {
            let BoundaryCondition::Dirichlet(value) = bc else { continue };
            let Some(dofs) = slab.disc.space.boundary_dofs.get(marker) else { continue };
            for &s in dofs {
                for (q, node) in nodes.iter().enumerate() {
                    let t = slab.t_start + slab.dt * node;
                    let density = value(t, &coords[s]);
                    if !(density > 0.0) {
                        return Err(Error::InvalidBoundaryData(format!(
                            "species {i} density {density} at x = {:?} requires log of a \
                             non-positive value",
                            coords[s]
                        )));
                    }
                    out.push((slab.species_index(i, q, s), density.ln()));
                }
            }
        }
    }
    for (marker, bc) in &spec.phi_bc {
        let BoundaryCondition::Dirichlet(value) = bc else { continue };
        let Some(dofs) = slab.disc.space.boundary_dofs.get(marker) else { continue };
        for &s in dofs {
            for (q, node) in nodes.iter().enumerate() {
                let t = slab.t_start + slab.dt * node;
                out.push((slab.phi_index(q, s), value(t, &coords[s])));
            }
        }
    }
    Ok(out)
}

/// Overwrite constrained coefficients with their prescribed values.
pub fn impose_dirichlet_values(spec: &ProblemSpec, slab: &mut SlabState) -> Result<()> {
    for (dof, value) in dirichlet_values(spec, slab)? {
        slab.coeffs[dof] = value;
    }
    Ok(())
}

/// Replace constrained rows by (current - prescribed) and, when a Jacobian
/// is being built, eliminate constrained rows/columns symmetrically (the
/// dropped column entries move onto the right-hand side).
pub fn apply_dirichlet(
    spec: &ProblemSpec,
    slab: &SlabState,
    residual: &mut [f64],
    triplets: Option<&mut Vec<(usize, usize, f64)>>,
    eliminate_columns: bool,
) -> Result<()> {
    let constrained = dirichlet_values(spec, slab)?;
    let n = slab.n_unknowns();
    let mut gap = vec![f64::NAN; n];
    for &(dof, value) in &constrained {
        gap[dof] = slab.coeffs[dof] - value;
    }
    if let Some(triplets) = triplets {
        let mut kept = 0;
        for idx in 0..triplets.len() {
            let (r, c, v) = triplets[idx];
            if !gap[r].is_nan() {
                continue; // constrained row: becomes a unit row below
            }
            if eliminate_columns && !gap[c].is_nan() {
                residual[r] -= v * gap[c];
                continue;
            }
            triplets[kept] = (r, c, v);
            kept += 1;
        }
        triplets.truncate(kept);
        for &(dof, _) in &constrained {
            triplets.push((dof, dof, 1.0));
        }
    }
    for &(dof, value) in &constrained {
        residual[dof] = slab.coeffs[dof] - value;
    }
    Ok(())
}

/// Residual of the fully discrete system with Dirichlet rows replaced by
/// (current - prescribed).
pub fn residual(spec: &ProblemSpec, slab: &SlabState) -> Result<Vec<f64>> {
    let (mut res, _) = assemble_raw(spec, slab, false)?;
    apply_dirichlet(spec, slab, &mut res, None, false)?;
    Ok(res)
}

/// Analytic Jacobian of [`residual`]: constrained rows are unit rows,
/// columns are kept (so it matches finite differences of `residual`
/// entry for entry).
pub fn jacobian(spec: &ProblemSpec, slab: &SlabState) -> Result<SparseMatrix> {
    let (mut res, trip) = assemble_raw(spec, slab, true)?;
    let mut trip = trip.expect("jacobian requested");
    apply_dirichlet(spec, slab, &mut res, Some(&mut trip), false)?;
    let n = slab.n_unknowns();
    Ok(SparseMatrix::from_triplets(n, n, &trip))
}

/// Residual and Jacobian triplets with symmetric Dirichlet elimination,
/// ready for a Newton step.
pub fn assemble_triplets(
    spec: &ProblemSpec,
    slab: &SlabState,
) -> Result<(Vec<f64>, Vec<(usize, usize, f64)>)> {
    let (mut res, trip) = assemble_raw(spec, slab, true)?;
    let mut trip = trip.expect("system assembly");
    apply_dirichlet(spec, slab, &mut res, Some(&mut trip), true)?;
    Ok((res, trip))
}

/// Residual and Jacobian with symmetric Dirichlet elimination, ready for a
/// Newton step.
pub fn assemble_system(spec: &ProblemSpec, slab: &SlabState) -> Result<(Vec<f64>, SparseMatrix)> {
    let (res, trip) = assemble_triplets(spec, slab)?;
    let n = slab.n_unknowns();
    Ok((res, SparseMatrix::from_triplets(n, n, &trip)))
}

/// Guarded exponential: errors out (for Newton rejection) instead of
/// producing infinities.
#[inline]
fn guarded_exp(arg: f64) -> Result<f64> {
    if !(arg <= EXP_OVERFLOW_GUARD) {
        return Err(Error::DivergedState(format!("exp argument {arg} exceeds guard")));
    }
    Ok(arg.exp())
}

/// Core element-loop assembly of the raw residual (no boundary conditions)
/// and optionally the exact Jacobian as triplets.
fn assemble_raw(
    spec: &ProblemSpec,
    slab: &SlabState,
    want_jacobian: bool,
) -> Result<(Vec<f64>, Option<Vec<(usize, usize, f64)>>)> {
    let disc = &slab.disc;
    let space = &disc.space;
    let mesh = &spec.mesh;
    let n_species = slab.n_species();
    let n_modes = slab.n_modes();
    let n_fields = n_species + 1;
    let n_loc = space.n_local();
    let n = slab.n_unknowns();
    let dt = slab.dt;

    debug_assert_eq!(spec.n_species, n_species);
    debug_assert!(Arc::ptr_eq(&spec.mesh, &space.mesh));

    // Temporal tabulations.
    let tq = &disc.time_quad;
    let n_tq = tq.len();
    let t_vals: Vec<Vec<f64>> = tq.points.iter().map(|p| disc.time_basis.values(p[0])).collect();
    let t_ders: Vec<Vec<f64>> =
        tq.points.iter().map(|p| disc.time_basis.derivatives(p[0])).collect();
    let t_left: Vec<f64> = disc.time_basis.values(0.0);
    let t_right: Vec<f64> = disc.time_basis.values(1.0);
    let p_vals: Option<Vec<Vec<f64>>> = disc
        .poisson_test
        .as_ref()
        .map(|b| tq.points.iter().map(|p| b.values(p[0])).collect());
    let n_ptest = disc.poisson_test.as_ref().map_or(0, |b| b.n_modes());

    // Spatial tabulation at the reference quadrature points.
    let sq = &disc.space_quad;
    let n_sq = sq.len();
    let table = space.tabulate(&sq.points);

    let drift: Vec<f64> = (0..n_species).map(|i| spec.drift_coeff(i)).collect();
    let charge: Vec<f64> = (0..n_species).map(|i| spec.species_charge(i)).collect();

    let mut res = vec![0.0; n];
    let mut trip: Option<Vec<(usize, usize, f64)>> = if want_jacobian {
        let local = n_fields * n_modes * n_loc;
        Some(Vec::with_capacity(mesh.n_elements() * local * (local / 2 + 1)))
    } else {
        None
    };

    // Scratch buffers reused across elements.
    let n_local_unknowns = n_fields * n_modes * n_loc;
    let mut local_coef = vec![0.0; n_local_unknowns];
    let mut local_prev = vec![0.0; n_species * n_loc];
    let mut local_res = vec![0.0; n_local_unknowns];
    let mut local_jac = vec![0.0; n_local_unknowns * n_local_unknowns];
    let mut grads = vec![[0.0f64; 2]; n_loc];
    let mut mode_val = vec![0.0; n_fields * n_modes];
    let mut mode_grad = vec![[0.0f64; 2]; n_fields * n_modes];
    let mut dens_right = vec![0.0; n_species];

    let loc = |f: usize, q: usize, a: usize| (f * n_modes + q) * n_loc + a;

    for e in 0..mesh.n_elements() {
        let dofs = &space.elem_dofs[e];
        let det = space.geometry(e).det;

        // Gather element-local coefficients (species blocks, then phi).
        for f in 0..n_fields {
            for q in 0..n_modes {
                for (a, &d) in dofs.iter().enumerate() {
                    let g = if f < n_species {
                        slab.species_index(f, q, d)
                    } else {
                        slab.phi_index(q, d)
                    };
                    local_coef[loc(f, q, a)] = slab.coeffs[g];
                }
            }
        }
        for i in 0..n_species {
            for (a, &d) in dofs.iter().enumerate() {
                local_prev[i * n_loc + a] = slab.incoming.u[i][d];
            }
        }
        local_res.iter_mut().for_each(|v| *v = 0.0);
        if want_jacobian {
            local_jac.iter_mut().for_each(|v| *v = 0.0);
        }

        for gq in 0..n_sq {
            let vals = &table.values[gq];
            for (a, rg) in table.ref_gradients[gq].iter().enumerate() {
                grads[a] = space.map_gradient(e, rg);
            }
            let x = space.map_to_physical(e, &sq.points[gq]);
            let a_coef = spec.cross_section.evaluate(mesh, e, &x);
            let eps = spec.permittivity.evaluate(mesh, e, &x);
            let rho0 = spec.fixed_charge.evaluate(mesh, e, &x);
            assert!(a_coef > 0.0, "cross-section must be positive (element {e})");
            assert!(eps > 0.0, "permittivity must be positive (element {e})");
            let w_sp = sq.weights[gq] * det;

            // Per-mode values and gradients of every field at this point.
            for f in 0..n_fields {
                for q in 0..n_modes {
                    let mut v = 0.0;
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for a in 0..n_loc {
                        let c = local_coef[loc(f, q, a)];
                        v += c * vals[a];
                        gx += c * grads[a][0];
                        gy += c * grads[a][1];
                    }
                    mode_val[f * n_modes + q] = v;
                    mode_grad[f * n_modes + q] = [gx, gy];
                }
            }

            // Upwind temporal flux: A (exp(u(1)) l_p(1) - exp(u_prev) l_p(0)) v.
            for i in 0..n_species {
                let mut u_right = 0.0;
                for q in 0..n_modes {
                    u_right += t_right[q] * mode_val[i * n_modes + q];
                }
                let mut u_prev = 0.0;
                for a in 0..n_loc {
                    u_prev += local_prev[i * n_loc + a] * vals[a];
                }
                let c_right = guarded_exp(u_right)?;
                let c_prev = guarded_exp(u_prev)?;
                let w = w_sp * a_coef;
                for p in 0..n_modes {
                    let flux = w * (c_right * t_right[p] - c_prev * t_left[p]);
                    for a in 0..n_loc {
                        local_res[loc(i, p, a)] += flux * vals[a];
                    }
                }
                if want_jacobian {
                    for p in 0..n_modes {
                        let fac = w * c_right * t_right[p];
                        if fac == 0.0 {
                            continue;
                        }
                        for q in 0..n_modes {
                            let facq = fac * t_right[q];
                            if facq == 0.0 {
                                continue;
                            }
                            for a in 0..n_loc {
                                let row = loc(i, p, a);
                                let va = facq * vals[a];
                                for b in 0..n_loc {
                                    local_jac[row * n_local_unknowns + loc(i, q, b)] +=
                                        va * vals[b];
                                }
                            }
                        }
                    }
                }
            }

            // Interior space-time terms at each temporal quadrature point.
            for g in 0..n_tq {
                let tw = tq.weights[g];
                let lv = &t_vals[g];
                let ld = &t_ders[g];
                let t_phys = slab.t_start + dt * tq.points[g][0];
                let w0 = tw * w_sp * a_coef;

                // Phi value/gradient at (g, gq).
                let mut phi_grad = [0.0, 0.0];
                for q in 0..n_modes {
                    let mg = mode_grad[n_species * n_modes + q];
                    phi_grad[0] += lv[q] * mg[0];
                    phi_grad[1] += lv[q] * mg[1];
                }

                let mut total_mobile_charge = 0.0;

                for i in 0..n_species {
                    let mut u = 0.0;
                    let mut u_grad = [0.0, 0.0];
                    for q in 0..n_modes {
                        u += lv[q] * mode_val[i * n_modes + q];
                        let mg = mode_grad[i * n_modes + q];
                        u_grad[0] += lv[q] * mg[0];
                        u_grad[1] += lv[q] * mg[1];
                    }
                    let density = guarded_exp(u)?;
                    total_mobile_charge += charge[i] * density;

                    // -int exp(u) l_p' v  (flux-form remainder of the DG
                    // time derivative).
                    for p in 0..n_modes {
                        let fac = -w0 * density * ld[p];
                        if fac != 0.0 {
                            for a in 0..n_loc {
                                local_res[loc(i, p, a)] += fac * vals[a];
                            }
                        }
                    }

                    // Drift-diffusion: dt A D exp(u) (grad u + beta grad phi) . grad v.
                    let dcoef = dt * w0 * spec.diffusivities[i];
                    let conv = [
                        u_grad[0] + drift[i] * phi_grad[0],
                        u_grad[1] + drift[i] * phi_grad[1],
                    ];
                    for p in 0..n_modes {
                        let fac = dcoef * density * lv[p];
                        if fac == 0.0 {
                            continue;
                        }
                        for a in 0..n_loc {
                            local_res[loc(i, p, a)] +=
                                fac * (conv[0] * grads[a][0] + conv[1] * grads[a][1]);
                        }
                    }

                    // Manufactured species forcing.
                    if let Some(forcing) = &spec.species_forcing {
                        let fval = forcing(i, t_phys, &x);
                        if fval != 0.0 {
                            for p in 0..n_modes {
                                let fac = -dt * w0 * fval * lv[p];
                                for a in 0..n_loc {
                                    local_res[loc(i, p, a)] += fac * vals[a];
                                }
                            }
                        }
                    }

                    if want_jacobian {
                        // d/dU of the time-derivative remainder.
                        for p in 0..n_modes {
                            let fac = -w0 * density * ld[p];
                            if fac == 0.0 {
                                continue;
                            }
                            for q in 0..n_modes {
                                let facq = fac * lv[q];
                                for a in 0..n_loc {
                                    let row = loc(i, p, a);
                                    let va = facq * vals[a];
                                    for b in 0..n_loc {
                                        local_jac[row * n_local_unknowns + loc(i, q, b)] +=
                                            va * vals[b];
                                    }
                                }
                            }
                        }
                        // d/dU and d/dPhi of the drift-diffusion term.
                        for p in 0..n_modes {
                            let fac = dcoef * density * lv[p];
                            if fac == 0.0 {
                                continue;
                            }
                            for q in 0..n_modes {
                                let flq = fac * lv[q];
                                for a in 0..n_loc {
                                    let row = loc(i, p, a);
                                    let conv_a =
                                        conv[0] * grads[a][0] + conv[1] * grads[a][1];
                                    for b in 0..n_loc {
                                        let grad_ab = grads[b][0] * grads[a][0]
                                            + grads[b][1] * grads[a][1];
                                        // exp(u) linearization of the whole flux,
                                        // plus grad(delta u) . grad v.
                                        local_jac[row * n_local_unknowns + loc(i, q, b)] +=
                                            flq * (vals[b] * conv_a + grad_ab);
                                        // drift through delta phi.
                                        local_jac
                                            [row * n_local_unknowns + loc(n_species, q, b)] +=
                                            flq * drift[i] * grad_ab;
                                    }
                                }
                            }
                        }
                    }
                }

                // Interior Poisson rows tested against temporal degree m-1.
                if let Some(p_vals) = &p_vals {
                    let pv = &p_vals[g];
                    let g_src = spec
                        .poisson_forcing
                        .as_ref()
                        .map_or(0.0, |gf| gf(t_phys, &x));
                    let source = rho0 + total_mobile_charge + g_src;
                    for r in 0..n_ptest {
                        let fac = dt * tw * w_sp * pv[r];
                        if fac == 0.0 {
                            continue;
                        }
                        let row0 = n_species; // phi rows live in the phi block
                        for a in 0..n_loc {
                            let stiff = a_coef
                                * eps
                                * (phi_grad[0] * grads[a][0] + phi_grad[1] * grads[a][1]);
                            local_res[loc(row0, r, a)] +=
                                fac * (stiff - a_coef * source * vals[a]);
                        }
                        if want_jacobian {
                            for q in 0..n_modes {
                                let flq = fac * lv[q];
                                for a in 0..n_loc {
                                    let row = loc(n_species, r, a);
                                    for b in 0..n_loc {
                                        let grad_ab = grads[b][0] * grads[a][0]
                                            + grads[b][1] * grads[a][1];
                                        local_jac
                                            [row * n_local_unknowns + loc(n_species, q, b)] +=
                                            flq * a_coef * eps * grad_ab;
                                    }
                                }
                                for i in 0..n_species {
                                    let mut u = 0.0;
                                    for qq in 0..n_modes {
                                        u += lv[qq] * mode_val[i * n_modes + qq];
                                    }
                                    let dens = guarded_exp(u)?;
                                    let dfac = -fac * a_coef * charge[i] * dens * lv[q];
                                    if dfac == 0.0 {
                                        continue;
                                    }
                                    for a in 0..n_loc {
                                        let row = loc(n_species, r, a);
                                        let va = dfac * vals[a];
                                        for b in 0..n_loc {
                                            local_jac[row * n_local_unknowns + loc(i, q, b)] +=
                                                va * vals[b];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }

            // Right-endpoint Poisson equation (the last phi row block).
            {
                let m_row = n_modes - 1;
                let mut phi_grad = [0.0, 0.0];
                for q in 0..n_modes {
                    let mg = mode_grad[n_species * n_modes + q];
                    phi_grad[0] += t_right[q] * mg[0];
                    phi_grad[1] += t_right[q] * mg[1];
                }
                let g_src = spec
                    .poisson_forcing
                    .as_ref()
                    .map_or(0.0, |gf| gf(slab.t_end(), &x));
                let mut source = rho0 + g_src;
                for i in 0..n_species {
                    let mut u = 0.0;
                    for q in 0..n_modes {
                        u += t_right[q] * mode_val[i * n_modes + q];
                    }
                    dens_right[i] = guarded_exp(u)?;
                    source += charge[i] * dens_right[i];
                }
                for a in 0..n_loc {
                    let stiff =
                        a_coef * eps * (phi_grad[0] * grads[a][0] + phi_grad[1] * grads[a][1]);
                    local_res[loc(n_species, m_row, a)] +=
                        w_sp * (stiff - a_coef * source * vals[a]);
                }
                if want_jacobian {
                    for q in 0..n_modes {
                        let flq = w_sp * t_right[q];
                        if flq == 0.0 {
                            continue;
                        }
                        for a in 0..n_loc {
                            let row = loc(n_species, m_row, a);
                            for b in 0..n_loc {
                                let grad_ab =
                                    grads[b][0] * grads[a][0] + grads[b][1] * grads[a][1];
                                local_jac[row * n_local_unknowns + loc(n_species, q, b)] +=
                                    flq * a_coef * eps * grad_ab;
                            }
                            for i in 0..n_species {
                                let va = -flq * a_coef * charge[i] * dens_right[i] * vals[a];
                                for b in 0..n_loc {
                                    local_jac[row * n_local_unknowns + loc(i, q, b)] +=
                                        va * vals[b];
                                }
                            }
                        }
                    }
                }
            }

            // Zero-mean gauge: constraint rows (integral of phi at each
            // temporal node) and the matching multiplier columns in the phi
            // equation families.
            if slab.zero_mean {
                for q in 0..n_modes {
                    let lambda = slab.coeffs[slab.gauge_index(q)];
                    for a in 0..n_loc {
                        let w_a = w_sp * vals[a];
                        local_res[loc(n_species, q, a)] += lambda * w_a;
                        res[slab.gauge_index(q)] += w_a * local_coef[loc(n_species, q, a)];
                        if let Some(t) = trip.as_mut() {
                            t.push((slab.gauge_index(q), slab.phi_index(q, dofs[a]), w_a));
                            t.push((slab.phi_index(q, dofs[a]), slab.gauge_index(q), w_a));
                        }
                    }
                }
            }
        }

        // Scatter the local residual and Jacobian into the global structures.
        for f in 0..n_fields {
            for q in 0..n_modes {
                for (a, &d) in dofs.iter().enumerate() {
                    let row = if f < n_species {
                        slab.species_index(f, q, d)
                    } else {
                        slab.phi_index(q, d)
                    };
                    res[row] += local_res[loc(f, q, a)];
                }
            }
        }
        if let Some(trip) = trip.as_mut() {
            for fr in 0..n_fields {
                for qr in 0..n_modes {
                    for (a, &da) in dofs.iter().enumerate() {
                        let row = if fr < n_species {
                            slab.species_index(fr, qr, da)
                        } else {
                            slab.phi_index(qr, da)
                        };
                        let lrow = loc(fr, qr, a);
                        for fc in 0..n_fields {
                            for qc in 0..n_modes {
                                for (b, &db) in dofs.iter().enumerate() {
                                    let v = local_jac
                                        [lrow * n_local_unknowns + loc(fc, qc, b)];
                                    if v != 0.0 {
                                        let col = if fc < n_species {
                                            slab.species_index(fc, qc, db)
                                        } else {
                                            slab.phi_index(qc, db)
                                        };
                                        trip.push((row, col, v));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Ok((res, trip))
}

/// Interpolate the initial densities and solve the endpoint Poisson equation
/// for the initial potential.
pub fn initial_state(
    spec: &ProblemSpec,
    disc: Arc<Discretization>,
    t0: f64,
) -> Result<TraceState> {
    spec.validate()?;
    let space = &disc.space;
    let mut u = Vec::with_capacity(spec.n_species);
    for (i, c0) in spec.initial_density.iter().enumerate() {
        let mut coeffs = Vec::with_capacity(space.ndofs);
        for p in &space.node_coords {
            let c = c0(p);
            if !(c > 0.0) {
                return Err(Error::PositivityViolation(format!(
                    "initial density of species {i} is {c} at x = {p:?}"
                )));
            }
            coeffs.push(c.ln());
        }
        u.push(coeffs);
    }
    let phi = solve_endpoint_poisson(spec, &disc, &u, t0)?;
    Ok(TraceState { disc, time: t0, u, phi })
}

/// Solve the spatial Poisson equation at a single time, given entropy
/// variables: used for the initial potential.
pub fn solve_endpoint_poisson(
    spec: &ProblemSpec,
    disc: &Discretization,
    u: &[Vec<f64>],
    t: f64,
) -> Result<Vec<f64>> {
    let space = &disc.space;
    let mesh = &spec.mesh;
    let n_space = space.ndofs;
    let zero_mean = spec.gauge == PhiGauge::ZeroMean;
    let n = n_space + if zero_mean { 1 } else { 0 };
    let sq = &disc.space_quad;
    let table = space.tabulate(&sq.points);
    let n_loc = space.n_local();

    let mut rhs = vec![0.0; n];
    let mut trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut grads = vec![[0.0f64; 2]; n_loc];
    for e in 0..mesh.n_elements() {
        let dofs = &space.elem_dofs[e];
        let det = space.geometry(e).det;
        for gq in 0..sq.len() {
            let vals = &table.values[gq];
            for (a, rg) in table.ref_gradients[gq].iter().enumerate() {
                grads[a] = space.map_gradient(e, rg);
            }
            let x = space.map_to_physical(e, &sq.points[gq]);
            let a_coef = spec.cross_section.evaluate(mesh, e, &x);
            let eps = spec.permittivity.evaluate(mesh, e, &x);
            let rho0 = spec.fixed_charge.evaluate(mesh, e, &x);
            let w = sq.weights[gq] * det;
            let mut source = rho0
                + spec
                    .poisson_forcing
                    .as_ref()
                    .map_or(0.0, |gf| gf(t, &x));
            for i in 0..spec.n_species {
                let mut ui = 0.0;
                for (a, &d) in dofs.iter().enumerate() {
                    ui += u[i][d] * vals[a];
                }
                source += spec.species_charge(i) * guarded_exp(ui)?;
            }
            for (a, &da) in dofs.iter().enumerate() {
                rhs[da] += w * a_coef * source * vals[a];
                for (b, &db) in dofs.iter().enumerate() {
                    let grad_ab = grads[b][0] * grads[a][0] + grads[b][1] * grads[a][1];
                    trip.push((da, db, w * a_coef * eps * grad_ab));
                }
                if zero_mean {
                    trip.push((n_space, da, w * vals[a]));
                    trip.push((da, n_space, w * vals[a]));
                }
            }
        }
    }

    // Dirichlet rows for phi.
    let mut constrained: BTreeMap<usize, f64> = BTreeMap::new();
    for (marker, bc) in &spec.phi_bc {
        let BoundaryCondition::Dirichlet(value) = bc else { continue };
        if let Some(dofs) = space.boundary_dofs.get(marker) {
            for &s in dofs {
                constrained.insert(s, value(t, &space.node_coords[s]));
            }
        }
    }
    if !constrained.is_empty() {
        let mut kept = 0;
        for idx in 0..trip.len() {
            let (r, c, v) = trip[idx];
            if constrained.contains_key(&r) {
                continue;
            }
            if let Some(&val) = constrained.get(&c) {
                rhs[r] -= v * val;
                continue;
            }
            trip[kept] = (r, c, v);
            kept += 1;
        }
        trip.truncate(kept);
        for (&dof, &val) in &constrained {
            trip.push((dof, dof, 1.0));
            rhs[dof] = val;
        }
    }

    let a = SparseMatrix::from_triplets(n, n, &trip);
    let mut phi = lu_solve(&a, &rhs)?;
    phi.truncate(n_space);
    Ok(phi)
}
