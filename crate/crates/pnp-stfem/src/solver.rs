//! Sparse linear algebra and the per-slab Newton solve.
//!
//! The direct solver is a left-looking LU with partial pivoting on top of a
//! reverse Cuthill-McKee reordering, which keeps fill low for the banded-ish
//! systems the space-time assembly produces.

use crate::assembly::{self, ProblemSpec, SlabState};
use crate::diagnostics;
use crate::error::{Error, Result};

/// Compressed sparse row matrix. Column indices are sorted and unique
/// within each row.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, _, _) in triplets {
            assert!(r < n_rows, "row {r} out of bounds");
            counts[r + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        let mut col_idx = vec![0usize; triplets.len()];
        let mut values = vec![0.0; triplets.len()];
        let mut next = counts.clone();
        for &(r, c, v) in triplets {
            assert!(c < n_cols, "col {c} out of bounds");
            let slot = next[r];
            col_idx[slot] = c;
            values[slot] = v;
            next[r] += 1;
        }
        // Sort within each row and merge duplicates.
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut out_cols = Vec::with_capacity(triplets.len());
        let mut out_vals = Vec::with_capacity(triplets.len());
        for r in 0..n_rows {
            let lo = counts[r];
            let hi = counts[r + 1];
            let mut entries: Vec<(usize, f64)> =
                (lo..hi).map(|i| (col_idx[i], values[i])).collect();
            entries.sort_unstable_by_key(|e| e.0);
            for (c, v) in entries {
                if let Some(last) = out_cols.last() {
                    if *last == c && out_cols.len() > row_ptr[r] {
                        *out_vals.last_mut().unwrap() += v;
                        continue;
                    }
                }
                out_cols.push(c);
                out_vals.push(v);
            }
            row_ptr[r + 1] = out_cols.len();
        }
        SparseMatrix { n_rows, n_cols, row_ptr, col_idx: out_cols, values: out_vals }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(i) => vals[i],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let mut acc = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                acc += v * x[*c];
            }
            y[r] = acc;
        }
        y
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n_rows)
            .map(|r| self.row(r).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Reverse Cuthill-McKee ordering of the symmetrized sparsity pattern.
/// Returns `perm` with `perm[new] = old`.
fn rcm_ordering(a: &SparseMatrix) -> Vec<usize> {
    let n = a.n_rows;
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..n {
        for &c in a.row(r).0 {
            if c != r {
                adjacency[r].push(c);
                adjacency[c].push(r);
            }
        }
    }
    for list in adjacency.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adjacency.iter().map(|l| l.len()).collect();

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::new();
    loop {
        let start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| degree[i]);
        let Some(start) = start else { break };
        visited[start] = true;
        queue.push_back(start);
        while let Some(node) = queue.pop_front() {
            order.push(node);
            let mut nbrs: Vec<usize> =
                adjacency[node].iter().copied().filter(|&v| !visited[v]).collect();
            nbrs.sort_unstable_by_key(|&v| degree[v]);
            for v in nbrs {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

/// LU factors of a (permuted, row-equilibrated) sparse matrix, kept for
/// repeated solves.
pub struct LuFactors {
    n: usize,
    /// Fill-reducing permutation, perm[new] = old.
    perm: Vec<usize>,
    /// Row pivot map: pinv[permuted_row] = elimination step.
    pinv: Vec<usize>,
    /// Reciprocal row scales in original row numbering.
    row_scale: Vec<f64>,
    l_col_ptr: Vec<usize>,
    l_rows: Vec<usize>,
    l_vals: Vec<f64>,
    u_col_ptr: Vec<usize>,
    u_rows: Vec<usize>,
    u_vals: Vec<f64>,
}

const UNPIVOTED: usize = usize::MAX;

/// Factor a square, structurally nonsingular matrix.
pub fn lu_factor(a: &SparseMatrix) -> Result<LuFactors> {
    assert_eq!(a.n_rows, a.n_cols, "LU needs a square matrix");
    let n = a.n_rows;
    let perm = rcm_ordering(a);
    let mut inv_perm = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
        inv_perm[old] = new;
    }

    // Row equilibration: the slab systems mix equation blocks whose natural
    // scales differ by the local density (down to ~1e-60 in depleted
    // regions), and partial pivoting compares entries across rows.
    let mut row_scale = vec![0.0f64; n];
    for r in 0..n {
        let max = a.row(r).1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        row_scale[r] = if max > 0.0 { 1.0 / max } else { 1.0 };
    }

    // Column-compressed copy of the symmetrically permuted, scaled matrix.
    let mut col_counts = vec![0usize; n + 1];
    for r in 0..n {
        for &c in a.row(r).0 {
            col_counts[inv_perm[c] + 1] += 1;
        }
    }
    for j in 0..n {
        col_counts[j + 1] += col_counts[j];
    }
    let nnz = a.nnz();
    let mut b_rows = vec![0usize; nnz];
    let mut b_vals = vec![0.0; nnz];
    let mut next = col_counts.clone();
    for r in 0..n {
        let (cols, vals) = a.row(r);
        for (c, v) in cols.iter().zip(vals) {
            let j = inv_perm[*c];
            let slot = next[j];
            b_rows[slot] = inv_perm[r];
            b_vals[slot] = *v * row_scale[r];
            next[j] += 1;
        }
    }
    let b_col_ptr = col_counts;

    // Left-looking factorization with partial pivoting.
    let mut pinv = vec![UNPIVOTED; n];
    let mut l_col_ptr = vec![0usize];
    let mut l_rows: Vec<usize> = Vec::with_capacity(4 * nnz);
    let mut l_vals: Vec<f64> = Vec::with_capacity(4 * nnz);
    let mut u_col_ptr = vec![0usize];
    let mut u_rows: Vec<usize> = Vec::with_capacity(4 * nnz);
    let mut u_vals: Vec<f64> = Vec::with_capacity(4 * nnz);

    let mut x = vec![0.0; n];
    let mut stamp = vec![usize::MAX; n];
    let mut reach: Vec<usize> = Vec::with_capacity(n);
    let mut dfs_stack: Vec<(usize, usize)> = Vec::new();

    for j in 0..n {
        // Symbolic: depth-first search from the pattern of column j through
        // the already-built columns of L, producing a topological order.
        reach.clear();
        for idx in b_col_ptr[j]..b_col_ptr[j + 1] {
            let start = b_rows[idx];
            if stamp[start] == j {
                continue;
            }
            dfs_stack.push((start, 0));
            stamp[start] = j;
            while let Some(&mut (node, ref mut child)) = dfs_stack.last_mut() {
                let col = pinv[node];
                let done = if col == UNPIVOTED {
                    true
                } else {
                    let lo = l_col_ptr[col];
                    let hi = l_col_ptr[col + 1];
                    let mut advanced = false;
                    while lo + *child < hi {
                        let next_node = l_rows[lo + *child];
                        *child += 1;
                        if stamp[next_node] != j {
                            stamp[next_node] = j;
                            dfs_stack.push((next_node, 0));
                            advanced = true;
                            break;
                        }
                    }
                    !advanced
                };
                if done {
                    reach.push(node);
                    dfs_stack.pop();
                }
            }
        }
        // reach is in reverse topological order; process from the back.

        // Numeric: scatter column j and apply the reached L columns.
        for idx in b_col_ptr[j]..b_col_ptr[j + 1] {
            x[b_rows[idx]] = b_vals[idx];
        }
        for &node in reach.iter().rev() {
            let col = pinv[node];
            if col == UNPIVOTED {
                continue;
            }
            let xval = x[node];
            if xval != 0.0 {
                for idx in l_col_ptr[col]..l_col_ptr[col + 1] {
                    x[l_rows[idx]] -= l_vals[idx] * xval;
                }
            }
        }

        // Partial pivoting among not-yet-pivoted rows.
        let mut pivot_row = UNPIVOTED;
        let mut pivot_abs = 0.0;
        for &node in &reach {
            if pinv[node] == UNPIVOTED && x[node].abs() > pivot_abs {
                pivot_abs = x[node].abs();
                pivot_row = node;
            }
        }
        if pivot_row == UNPIVOTED || pivot_abs < 1e-300 {
            return Err(Error::SingularMatrix { row: perm[j] });
        }
        let pivot = x[pivot_row];
        pinv[pivot_row] = j;

        // Emit U column j (strictly upper entries in pivot order, then the
        // diagonal last) and L column j (multipliers, diagonal excluded).
        for &node in reach.iter().rev() {
            if pinv[node] != UNPIVOTED && node != pivot_row {
                if x[node] != 0.0 {
                    u_rows.push(pinv[node]);
                    u_vals.push(x[node]);
                }
            }
            if node != pivot_row && pinv[node] == UNPIVOTED && x[node] != 0.0 {
                l_rows.push(node);
                l_vals.push(x[node] / pivot);
            }
            x[node] = 0.0;
        }
        x[pivot_row] = 0.0;
        u_rows.push(j);
        u_vals.push(pivot);
        u_col_ptr.push(u_rows.len());
        l_col_ptr.push(l_rows.len());
    }

    // Remap L's row indices into pivot order now that pinv is complete.
    for r in l_rows.iter_mut() {
        *r = pinv[*r];
    }

    Ok(LuFactors {
        n,
        perm,
        pinv,
        row_scale,
        l_col_ptr,
        l_rows,
        l_vals,
        u_col_ptr,
        u_rows,
        u_vals,
    })
}

impl LuFactors {
    /// Solve A x = b with the stored factors.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let n = self.n;
        // Scale, then apply the fill-reducing and pivot permutations.
        let mut y = vec![0.0; n];
        for new in 0..n {
            let old = self.perm[new];
            y[new] = b[old] * self.row_scale[old];
        }
        let mut x = vec![0.0; n];
        for (row, &piv) in self.pinv.iter().enumerate() {
            x[piv] = y[row];
        }
        // Forward substitution with unit L.
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                for idx in self.l_col_ptr[j]..self.l_col_ptr[j + 1] {
                    x[self.l_rows[idx]] -= self.l_vals[idx] * xj;
                }
            }
        }
        // Backward substitution; the diagonal is the last entry per column.
        for j in (0..n).rev() {
            let hi = self.u_col_ptr[j + 1];
            let diag = self.u_vals[hi - 1];
            let xj = x[j] / diag;
            x[j] = xj;
            if xj != 0.0 {
                for idx in self.u_col_ptr[j]..hi - 1 {
                    x[self.u_rows[idx]] -= self.u_vals[idx] * xj;
                }
            }
        }
        // Undo the fill-reducing permutation.
        let mut out = vec![0.0; n];
        for new in 0..n {
            out[self.perm[new]] = x[new];
        }
        out
    }
}

/// Direct solve of A x = b with one step of iterative refinement.
pub fn lu_solve(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let factors = lu_factor(a)?;
    let mut x = factors.solve(b);
    let ax = a.matvec(&x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
    let dx = factors.solve(&r);
    for (xi, di) in x.iter_mut().zip(&dx) {
        *xi += di;
    }
    Ok(x)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Outcome of one slab's Newton iteration.
#[derive(Debug, Clone)]
pub struct NewtonReport {
    pub iterations: usize,
    pub converged: bool,
    pub final_residual_norm: f64,
    /// Residual norms, starting with the initial guess.
    pub residual_history: Vec<f64>,
    /// Right-trace energy after each iteration.
    pub energy_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    /// Stop when the residual norm drops below `rel_tol` times its initial
    /// value (or below `abs_tol`).
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Backtracking line-search halvings before giving up on descent.
    pub max_backtracks: usize,
    /// Secondary stop: the relative slab-energy change per iteration has
    /// shrunk by this factor from the first iteration's change.
    pub energy_factor: f64,
    /// Relative slab-energy changes below this floor count as converged;
    /// in strongly depleted states the residual norm cannot see the
    /// vanishing-density block, and iterating past energy stagnation only
    /// stirs those degenerate unknowns.
    pub energy_floor: f64,
    /// Lower bound imposed on the entropy variables (a density floor of
    /// exp(floor)). Below roughly -45 the discrete equations carry no
    /// information about a dof (every row coefficient scales with the local
    /// density), so unbounded descent only accumulates noise and eventually
    /// underflows exp() into exactly-zero rows.
    pub entropy_floor: f64,
    /// Upper bound of the admissible box. Trial iterates above it are
    /// projected back so that a wildly overshooting direction backtracks
    /// normally instead of tripping the exp() overflow guard on every trial.
    pub entropy_ceiling: f64,
    /// Componentwise cap on the Newton update of the entropy variables.
    /// Linearizing exp(u) far from the solution proposes astronomically
    /// large log-space moves (the classical Newton-on-exp crawl advances
    /// order one per iteration anyway); capping keeps every trial state
    /// evaluable and lets depletion fronts walk instead of stalling.
    pub entropy_step_cap: f64,
    /// Equation rows whose largest Jacobian entry falls below this fraction
    /// of the global maximum are frozen for the current solve (their
    /// unknowns keep their values). Such rows scale with the vanishing local
    /// density; keeping them in the linear system lets their ill-conditioned
    /// sub-block leak arbitrarily large corrections into the live unknowns.
    /// Frozen dofs revive as soon as neighbouring values raise their row
    /// scale again.
    pub dead_row_rtol: f64,
    /// After the live system converges, solve the depleted sub-block (frozen
    /// dofs plus everything below `relax_below`) to convergence with the
    /// live values held fixed, using at most this many rate-limited sweeps.
    /// The sub-block is internally well-scaled, so this lets a depleted
    /// region keep tracking its own (energetically negligible) dynamics;
    /// crucially, when the surroundings recover, the sub-solve walks the
    /// revival front across the whole region instead of leaving a standing
    /// log-density cliff whose spurious dissipation density
    /// exp(u)|grad mu|^2 would break the discrete energy balance.
    pub dead_sweeps: usize,
    /// Entropy values below this take part in the post-solve relaxation.
    /// The residual stopping criteria cannot see these dofs (all their
    /// equation rows scale with exp(u)), so the main iteration may leave
    /// them unconverged.
    pub relax_below: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iterations: 25,
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            max_backtracks: 8,
            energy_factor: 1e-8,
            energy_floor: 1e-13,
            entropy_floor: -150.0,
            entropy_ceiling: 50.0,
            entropy_step_cap: 3.0,
            dead_row_rtol: 1e-45,
            dead_sweeps: 200,
            relax_below: -35.0,
        }
    }
}

/// Set of depleted unknowns of one solve, keyed by (species, spatial dof) so
/// the same bookkeeping serves any temporal order.
///
/// A species dof is flagged once every equation row attached to it has
/// collapsed below `dead_row_rtol` times the system scale: at that point the
/// local density is so small that the rows carry no usable information, and
/// (after row equilibration) such rows would even be eligible as pivots for
/// live columns, leaking amplified noise into the live unknowns. Flagged
/// dofs keep their values for the current solve and revive as soon as
/// neighbouring values raise their row scale again.
#[derive(Debug, Clone)]
pub struct DepletionMask {
    pub n_species: usize,
    pub n_space: usize,
    pub frozen: Vec<bool>,
}

impl DepletionMask {
    pub fn new(n_species: usize, n_space: usize) -> Self {
        DepletionMask { n_species, n_space, frozen: vec![false; n_species * n_space] }
    }

    pub fn n_frozen(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }
}

/// Refresh the mask with the species dofs whose rows have all collapsed.
fn detect_dead_dofs(
    triplets: &[(usize, usize, f64)],
    slab: &SlabState,
    rtol: f64,
    mask: &mut DepletionMask,
) {
    let n_species = mask.n_species;
    let n_space = mask.n_space;
    let n_modes = slab.n_modes();
    let species_rows = n_species * n_modes * n_space;
    let mut scale = vec![0.0f64; n_species * n_space];
    let mut global = 0.0f64;
    for &(r, _, v) in triplets {
        let a = v.abs();
        global = global.max(a);
        if r < species_rows {
            let i = r / (n_modes * n_space);
            let s = r % n_space;
            let slot = i * n_space + s;
            scale[slot] = scale[slot].max(a);
        }
    }
    let cutoff = global * rtol;
    for (slot, &m) in scale.iter().enumerate() {
        mask.frozen[slot] = m <= cutoff;
    }
}

/// Best-effort relaxation of the depleted sub-block (frozen dofs plus all
/// dofs below `relax_below`) with the live solution held fixed. Updates are
/// box-projected and rate-limited; failures leave the state as it was.
fn relax_dead_block(
    spec: &ProblemSpec,
    slab: &mut SlabState,
    opts: &NewtonOptions,
    mask: &DepletionMask,
) -> Result<()> {
    let n_modes = slab.n_modes();
    let n_space = mask.n_space;
    let mut sub_of = vec![usize::MAX; slab.n_unknowns()];
    let mut sub_dofs = Vec::new();
    for i in 0..mask.n_species {
        for s in 0..n_space {
            let depleted = mask.frozen[i * n_space + s]
                || (0..n_modes).all(|q| {
                    slab.coeffs[slab.species_index(i, q, s)] < opts.relax_below
                });
            if depleted {
                for q in 0..n_modes {
                    let g = slab.species_index(i, q, s);
                    sub_of[g] = sub_dofs.len();
                    sub_dofs.push(g);
                }
            }
        }
    }
    if sub_dofs.is_empty() {
        return Ok(());
    }
    let trace_failures = std::env::var_os("PNP_TRACE_RELAX").is_some();
    for _ in 0..opts.dead_sweeps {
        let (res, trip) = match assembly::assemble_triplets(spec, slab) {
            Ok(pair) => pair,
            Err(Error::DivergedState(msg)) => {
                if trace_failures {
                    eprintln!("relax: diverged assembly: {msg}");
                }
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        let m = sub_dofs.len();
        let mut sub_trip = Vec::new();
        for &(r, c, v) in &trip {
            let sr = sub_of[r];
            if sr != usize::MAX {
                let sc = sub_of[c];
                if sc != usize::MAX {
                    sub_trip.push((sr, sc, v));
                }
            }
        }
        let rhs: Vec<f64> = sub_dofs.iter().map(|&g| -res[g]).collect();
        let sub = SparseMatrix::from_triplets(m, m, &sub_trip);
        let delta = match lu_solve(&sub, &rhs) {
            Ok(d) => d,
            Err(e) => {
                if trace_failures {
                    eprintln!("relax: sub-solve failed: {e}");
                }
                return Ok(());
            }
        };
        // Rate-limited to the natural log-space crawl, parked just above the
        // custody threshold (the live solution is held fixed here, so values
        // must stay energetically invisible; the main iteration owns the
        // visible band). Iterate until the sub-block stops moving.
        let mut moved = 0.0f64;
        for (k, &g) in sub_dofs.iter().enumerate() {
            let update = delta[k].clamp(-3.0, 3.0);
            let new = (slab.coeffs[g] + update)
                .clamp(opts.entropy_floor, opts.relax_below + 2.0);
            moved = moved.max((new - slab.coeffs[g]).abs());
            slab.coeffs[g] = new;
        }
        if moved < 1e-6 {
            break;
        }
    }
    Ok(())
}

/// Replace the rows of masked dofs (all temporal modes) with identity rows
/// and zero right-hand side, pinning those unknowns.
fn freeze_masked_rows(
    residual: &mut [f64],
    triplets: &mut Vec<(usize, usize, f64)>,
    slab: &SlabState,
    mask: &DepletionMask,
) {
    if mask.n_frozen() == 0 {
        return;
    }
    let n_species = mask.n_species;
    let n_space = mask.n_space;
    let n_modes = slab.n_modes();
    let species_rows = n_species * n_modes * n_space;
    let is_frozen_row = |r: usize| -> bool {
        if r >= species_rows {
            return false;
        }
        let i = r / (n_modes * n_space);
        let s = r % n_space;
        mask.frozen[i * n_space + s]
    };
    triplets.retain(|&(r, _, _)| !is_frozen_row(r));
    for i in 0..n_species {
        for s in 0..n_space {
            if mask.frozen[i * n_space + s] {
                for q in 0..n_modes {
                    let r = slab.species_index(i, q, s);
                    triplets.push((r, r, 1.0));
                    residual[r] = 0.0;
                }
            }
        }
    }
}

/// Newton's method for one space-time slab. The slab arrives holding the
/// initial guess (normally the constant-in-time extension of the incoming
/// trace) and is returned converged.
pub fn newton_solve(
    spec: &ProblemSpec,
    slab: SlabState,
    opts: &NewtonOptions,
) -> Result<(SlabState, NewtonReport)> {
    let mut mask = DepletionMask::new(spec.n_species, slab.n_space());
    newton_solve_masked(spec, slab, opts, &mut mask)
}

/// [`newton_solve`] with a caller-owned depletion mask, so consecutive slab
/// solves of one run share the set of pinned dofs.
pub fn newton_solve_masked(
    spec: &ProblemSpec,
    mut slab: SlabState,
    opts: &NewtonOptions,
    mask: &mut DepletionMask,
) -> Result<(SlabState, NewtonReport)> {
    assembly::impose_dirichlet_values(spec, &mut slab)?;
    let n_entropy = spec.n_species * slab.n_modes() * slab.n_space();
    for c in slab.coeffs[..n_entropy].iter_mut() {
        *c = c.clamp(opts.entropy_floor, opts.entropy_ceiling);
    }

    let initial_residual = match assembly::residual(spec, &slab) {
        Ok(r) => r,
        Err(Error::DivergedState(msg)) => {
            return Err(Error::NewtonFailure(format!("diverged at initial guess: {msg}")))
        }
        Err(e) => return Err(e),
    };
    let mut norm = l2_norm(&initial_residual);
    let norm0 = norm;
    let target = opts.abs_tol.max(opts.rel_tol * norm0);

    let mut report = NewtonReport {
        iterations: 0,
        converged: norm <= target,
        final_residual_norm: norm,
        residual_history: vec![norm],
        energy_history: Vec::new(),
    };
    let mut energy_prev = diagnostics::energy(spec, &slab.right_trace());
    let mut energy_delta_first: Option<f64> = None;

    while !report.converged {
        if report.iterations >= opts.max_iterations {
            return Err(Error::NewtonFailure(format!(
                "no convergence in {} iterations (residual {:.3e}, target {:.3e})",
                opts.max_iterations, norm, target
            )));
        }
        let (mut res_d, mut trip) = assembly::assemble_triplets(spec, &slab)?;
        let n = slab.n_unknowns();
        detect_dead_dofs(&trip, &slab, opts.dead_row_rtol, mask);
        freeze_masked_rows(&mut res_d, &mut trip, &slab, mask);
        let jac = SparseMatrix::from_triplets(n, n, &trip);
        let neg: Vec<f64> = res_d.iter().map(|v| -v).collect();
        let mut delta = match lu_solve(&jac, &neg) {
            Ok(d) => d,
            Err(Error::SingularMatrix { row }) => {
                return Err(Error::NewtonFailure(format!("singular Jacobian at row {row}")))
            }
            Err(e) => return Err(e),
        };
        for d in delta[..n_entropy].iter_mut() {
            *d = d.clamp(-opts.entropy_step_cap, opts.entropy_step_cap);
        }

        // Backtracking with a bounded non-monotone acceptance: resolving a
        // moving depletion front raises neighbouring residuals before
        // collapsing them, so insisting on strict descent stalls the front;
        // a trial is taken as soon as it stays within a factor of the
        // current norm, and divergence (exp overflow) always backtracks.
        let base = slab.coeffs.clone();
        let mut step = 1.0;
        let mut best: Option<(Vec<f64>, f64)> = None;
        for _ in 0..=opts.max_backtracks {
            let mut trial: Vec<f64> =
                base.iter().zip(&delta).map(|(x, d)| x + step * d).collect();
            // Project the entropy variables onto the admissible box.
            for c in trial[..n_entropy].iter_mut() {
                *c = c.clamp(opts.entropy_floor, opts.entropy_ceiling);
            }
            slab.coeffs = trial;
            match assembly::residual(spec, &slab) {
                Ok(r) => {
                    let trial_norm = l2_norm(&r);
                    if best.as_ref().map_or(true, |(_, n)| trial_norm < *n) {
                        best = Some((slab.coeffs.clone(), trial_norm));
                    }
                    if trial_norm <= 2.0 * norm {
                        break;
                    }
                }
                Err(Error::DivergedState(_)) => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        let Some((coeffs, new_norm)) = best else {
            return Err(Error::NewtonFailure(
                "line search could not leave the diverged region".into(),
            ));
        };
        slab.coeffs = coeffs;
        norm = new_norm;

        report.iterations += 1;
        report.residual_history.push(norm);
        report.final_residual_norm = norm;

        let energy = diagnostics::energy(spec, &slab.right_trace());
        report.energy_history.push(energy);
        let scale = energy.abs().max(1e-300);
        let delta_rel = (energy - energy_prev).abs() / scale;
        energy_prev = energy;

        if norm <= target {
            report.converged = true;
            break;
        }
        if delta_rel <= opts.energy_floor {
            report.converged = true;
            break;
        }
        match energy_delta_first {
            None => energy_delta_first = Some(delta_rel),
            Some(first) => {
                if first > 0.0 && delta_rel <= opts.energy_factor * first {
                    report.converged = true;
                    break;
                }
            }
        }
    }
    if opts.dead_sweeps > 0 {
        relax_dead_block(spec, &mut slab, opts, mask)?;
    }
    Ok((slab, report))
}
