//! Discrete spaces and quadrature: H1-conforming nodal Pk spaces on
//! simplicial meshes, Lagrange-in-time bases at right Gauss-Radau points,
//! and Gauss rules on the reference interval/triangle.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Quadrature rule on a reference domain ([0,1] or the unit triangle).
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    /// Reference coordinates; the second entry is unused in 1D.
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    /// Polynomials up to this total degree integrate exactly.
    pub exactness: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Legendre polynomial P_n on [-1, 1] by the three-term recurrence.
fn legendre(n: usize, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return p0;
    }
    for k in 1..n {
        let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Derivative of P_n via the standard identity.
fn legendre_deriv(n: usize, x: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let pn = legendre(n, x);
    let pn1 = legendre(n - 1, x);
    (n as f64) * (x * pn - pn1) / (x * x - 1.0)
}

/// Gauss-Legendre rule with `npts` points on [0, 1], exact to degree 2*npts-1.
pub fn gauss_legendre(npts: usize) -> QuadratureRule {
    assert!(npts >= 1, "need at least one quadrature point");
    let n = npts;
    let mut points = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        // Chebyshev initial guess, then Newton.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let delta = legendre(n, x) / legendre_deriv(n, x);
            x -= delta;
            if delta.abs() < 1e-16 {
                break;
            }
        }
        let dp = legendre_deriv(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        points.push([0.5 * (1.0 - x), 0.0]); // descending roots -> ascending points
        weights.push(0.5 * w);
    }
    QuadratureRule { points, weights, exactness: 2 * npts - 1 }
}

/// Gauss-Legendre rule on [0, 1] for the temporal direction.
pub fn temporal_quadrature(npts: usize) -> QuadratureRule {
    gauss_legendre(npts)
}

/// Quadrature on the reference simplex exact to the given total degree.
///
/// 1D uses Gauss-Legendre on [0, 1]. 2D uses the centroid rule for degree 1
/// and a collapsed (Duffy) tensor rule otherwise.
pub fn spatial_quadrature(dim: usize, order: usize) -> QuadratureRule {
    let order = order.max(1);
    match dim {
        1 => {
            let mut rule = gauss_legendre(order / 2 + 1);
            rule.exactness = order;
            rule
        }
        2 => {
            if order == 1 {
                return QuadratureRule {
                    points: vec![[1.0 / 3.0, 1.0 / 3.0]],
                    weights: vec![0.5],
                    exactness: 1,
                };
            }
            // Map [0,1]^2 onto the triangle via (x, y*(1-x)); the Jacobian
            // factor (1-x) raises the x-degree by one, so the x-rule must be
            // exact to degree order+1 and the y-rule to degree order.
            let gx = gauss_legendre((order + 1) / 2 + 1);
            let gy = gauss_legendre(order / 2 + 1);
            let mut points = Vec::with_capacity(gx.len() * gy.len());
            let mut weights = Vec::with_capacity(gx.len() * gy.len());
            for (px, wx) in gx.points.iter().zip(&gx.weights) {
                for (py, wy) in gy.points.iter().zip(&gy.weights) {
                    let x = px[0];
                    let y = py[0] * (1.0 - x);
                    points.push([x, y]);
                    weights.push(wx * wy * (1.0 - x));
                }
            }
            QuadratureRule { points, weights, exactness: order }
        }
        d => panic!("unsupported dimension {d}"),
    }
}

/// Lagrange basis of P_m on [0, 1] with nodes at the right Gauss-Radau
/// points (t = 1 is always the last node), so the right trace of a
/// represented polynomial is simply its last coefficient.
#[derive(Debug, Clone)]
pub struct TemporalBasis {
    pub degree: usize,
    pub nodes: Vec<f64>,
}

impl TemporalBasis {
    /// Basis of degree `m` at the m+1 right Gauss-Radau nodes.
    pub fn radau_right(m: usize) -> Self {
        let mut nodes = radau_right_nodes(m);
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        TemporalBasis { degree: m, nodes }
    }

    pub fn n_modes(&self) -> usize {
        self.degree + 1
    }

    /// Basis values at `t` (any real, including the traces t=0 and t=1).
    pub fn values(&self, t: f64) -> Vec<f64> {
        let n = self.nodes.len();
        let mut vals = vec![1.0; n];
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    vals[j] *= (t - self.nodes[i]) / (self.nodes[j] - self.nodes[i]);
                }
            }
        }
        vals
    }

    /// Basis derivatives at `t`.
    pub fn derivatives(&self, t: f64) -> Vec<f64> {
        let n = self.nodes.len();
        let mut ders = vec![0.0; n];
        for j in 0..n {
            let mut sum = 0.0;
            for k in 0..n {
                if k == j {
                    continue;
                }
                let mut prod = 1.0 / (self.nodes[j] - self.nodes[k]);
                for i in 0..n {
                    if i != j && i != k {
                        prod *= (t - self.nodes[i]) / (self.nodes[j] - self.nodes[i]);
                    }
                }
                sum += prod;
            }
            ders[j] = sum;
        }
        ders
    }
}

/// Right Gauss-Radau nodes on [0, 1]: the free nodes are the roots of
/// (P_{m+1} - P_m)/(x - 1) on [-1, 1]; t = 1 is always included.
fn radau_right_nodes(m: usize) -> Vec<f64> {
    let mut nodes = Vec::with_capacity(m + 1);
    if m > 0 {
        let f = |x: f64| legendre(m + 1, x) - legendre(m, x);
        // The m free roots are simple and interior; bracket by scanning.
        let scan = 64 * (m + 1);
        let lo_limit = -1.0 + 1e-9;
        let hi_limit = 1.0 - 1e-9;
        let mut prev_x = lo_limit;
        let mut prev_f = f(prev_x);
        for i in 1..=scan {
            let x = lo_limit + (hi_limit - lo_limit) * i as f64 / scan as f64;
            let fx = f(x);
            if prev_f == 0.0 {
                nodes.push(0.5 * (prev_x + 1.0));
            } else if prev_f * fx < 0.0 {
                let (mut lo, mut hi) = (prev_x, x);
                let mut flo = prev_f;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let fmid = f(mid);
                    if flo * fmid <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                        flo = fmid;
                    }
                }
                nodes.push(0.5 * (0.5 * (lo + hi) + 1.0));
            }
            prev_x = x;
            prev_f = fx;
        }
        assert_eq!(nodes.len(), m, "Radau root scan missed a node");
    }
    nodes.push(1.0);
    nodes
}

/// Per-element affine geometry: transposed inverse Jacobian and determinant.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub inv_jac_t: [[f64; 2]; 2],
    pub det: f64,
}

/// Nodal reference element: equispaced lattice nodes and the monomial
/// coefficients of the Lagrange basis (from an inverted Vandermonde matrix).
#[derive(Debug, Clone)]
struct ReferenceElement {
    nodes: Vec<[f64; 2]>,
    exponents: Vec<[usize; 2]>,
    /// coeffs[j][m] is the coefficient of monomial m in basis function j.
    coeffs: Vec<Vec<f64>>,
}

impl ReferenceElement {
    fn build(dim: usize, k: usize) -> Result<Self> {
        let nodes = reference_nodes(dim, k);
        let exponents: Vec<[usize; 2]> = match dim {
            1 => (0..=k).map(|a| [a, 0]).collect(),
            _ => {
                let mut exps = Vec::new();
                for total in 0..=k {
                    for a in (0..=total).rev() {
                        exps.push([a, total - a]);
                    }
                }
                exps
            }
        };
        let n = nodes.len();
        assert_eq!(exponents.len(), n);
        let mut vandermonde = vec![vec![0.0; n]; n];
        for (row, node) in nodes.iter().enumerate() {
            for (col, e) in exponents.iter().enumerate() {
                vandermonde[row][col] = node[0].powi(e[0] as i32) * node[1].powi(e[1] as i32);
            }
        }
        let inverse = invert_dense(vandermonde)
            .ok_or_else(|| Error::UnsupportedDegree(k))?;
        // Basis j solves V c_j = e_j, i.e. c_j is column j of V^{-1}.
        let coeffs = (0..n)
            .map(|j| (0..n).map(|m| inverse[m][j]).collect())
            .collect();
        Ok(ReferenceElement { nodes, exponents, coeffs })
    }

    fn n_local(&self) -> usize {
        self.nodes.len()
    }

    /// Values and reference-coordinate gradients of all basis functions.
    fn eval(&self, p: &[f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>) {
        let n = self.n_local();
        let nm = self.exponents.len();
        let mut mono = vec![0.0; nm];
        let mut dmono = vec![[0.0; 2]; nm];
        for (m, e) in self.exponents.iter().enumerate() {
            let (a, b) = (e[0] as i32, e[1] as i32);
            mono[m] = p[0].powi(a) * p[1].powi(b);
            dmono[m][0] = if a > 0 { a as f64 * p[0].powi(a - 1) * p[1].powi(b) } else { 0.0 };
            dmono[m][1] = if b > 0 { b as f64 * p[0].powi(a) * p[1].powi(b - 1) } else { 0.0 };
        }
        let mut values = vec![0.0; n];
        let mut grads = vec![[0.0; 2]; n];
        for j in 0..n {
            let cj = &self.coeffs[j];
            let mut v = 0.0;
            let mut gx = 0.0;
            let mut gy = 0.0;
            for m in 0..nm {
                v += cj[m] * mono[m];
                gx += cj[m] * dmono[m][0];
                gy += cj[m] * dmono[m][1];
            }
            values[j] = v;
            grads[j] = [gx, gy];
        }
        (values, grads)
    }
}

/// Equispaced lattice on the reference simplex in the canonical local order:
/// vertices, then edge nodes (per edge, walking from its first vertex), then
/// interior lattice nodes.
fn reference_nodes(dim: usize, k: usize) -> Vec<[f64; 2]> {
    let kf = k as f64;
    match dim {
        1 => {
            let mut nodes = vec![[0.0, 0.0], [1.0, 0.0]];
            for j in 1..k {
                nodes.push([j as f64 / kf, 0.0]);
            }
            nodes
        }
        _ => {
            let verts = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
            let mut nodes = verts.to_vec();
            for (a, b) in [(0, 1), (1, 2), (2, 0)] {
                for j in 1..k {
                    let t = j as f64 / kf;
                    nodes.push([
                        verts[a][0] + t * (verts[b][0] - verts[a][0]),
                        verts[a][1] + t * (verts[b][1] - verts[a][1]),
                    ]);
                }
            }
            for j in 1..k {
                for i in 1..k {
                    if i + j <= k.saturating_sub(1) {
                        nodes.push([i as f64 / kf, j as f64 / kf]);
                    }
                }
            }
            nodes
        }
    }
}

/// Gauss-Jordan inversion with partial pivoting; returns None when singular.
fn invert_dense(mut a: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut inv: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in 0..n {
        let pivot_row = (col..n).max_by(|&r, &s| {
            a[r][col].abs().partial_cmp(&a[s][col].abs()).unwrap()
        })?;
        if a[pivot_row][col].abs() < 1e-14 {
            return None;
        }
        a.swap(col, pivot_row);
        inv.swap(col, pivot_row);
        let pivot = a[col][col];
        for j in 0..n {
            a[col][j] /= pivot;
            inv[col][j] /= pivot;
        }
        for r in 0..n {
            if r != col {
                let factor = a[r][col];
                if factor != 0.0 {
                    for j in 0..n {
                        a[r][j] -= factor * a[col][j];
                        inv[r][j] -= factor * inv[col][j];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// H1-conforming nodal Pk space on a simplicial mesh.
#[derive(Debug)]
pub struct SpatialSpace {
    pub mesh: Arc<Mesh>,
    pub degree: usize,
    pub ndofs: usize,
    /// Global dof indices per element, in the canonical local node order.
    pub elem_dofs: Vec<Vec<usize>>,
    /// Sorted global dofs on boundary facets, per marker.
    pub boundary_dofs: BTreeMap<i32, Vec<usize>>,
    /// Physical coordinates of each global dof's node.
    pub node_coords: Vec<[f64; 2]>,
    geometry: Vec<ElementGeometry>,
    reference: ReferenceElement,
}

/// Build the Pk space on a mesh. Degree 0 is rejected.
pub fn build_space(mesh: Arc<Mesh>, k: usize) -> Result<SpatialSpace> {
    if k == 0 {
        return Err(Error::UnsupportedDegree(0));
    }
    let reference = ReferenceElement::build(mesh.dim, k)?;

    let nv = mesh.vertices.len();
    let ne = mesh.n_elements();
    let mut elem_dofs: Vec<Vec<usize>> = Vec::with_capacity(ne);
    let mut node_coords: Vec<[f64; 2]> = mesh.vertices.clone();
    let ndofs;
    let mut edge_index: BTreeMap<(usize, usize), usize> = BTreeMap::new();

    match mesh.dim {
        1 => {
            let per_interior = k - 1;
            for (e, ev) in mesh.elements.iter().enumerate() {
                let mut dofs = vec![ev[0], ev[1]];
                for j in 1..k {
                    let d = nv + e * per_interior + (j - 1);
                    dofs.push(d);
                    let x0 = mesh.vertices[ev[0]][0];
                    let x1 = mesh.vertices[ev[1]][0];
                    node_coords.push([x0 + (x1 - x0) * j as f64 / k as f64, 0.0]);
                }
                elem_dofs.push(dofs);
            }
            ndofs = nv + ne * per_interior;
        }
        _ => {
            // Enumerate global edges by sorted vertex pair.
            for ev in &mesh.elements {
                for (a, b) in [(ev[0], ev[1]), (ev[1], ev[2]), (ev[2], ev[0])] {
                    let key = (a.min(b), a.max(b));
                    let next = edge_index.len();
                    edge_index.entry(key).or_insert(next);
                }
            }
            let n_edges = edge_index.len();
            let per_edge = k - 1;
            let n_interior = (k.saturating_sub(1)) * (k.saturating_sub(2)) / 2;
            ndofs = nv + n_edges * per_edge + ne * n_interior;
            node_coords.resize(ndofs, [0.0, 0.0]);

            for (e, ev) in mesh.elements.iter().enumerate() {
                let mut dofs = vec![ev[0], ev[1], ev[2]];
                for (a, b) in [(ev[0], ev[1]), (ev[1], ev[2]), (ev[2], ev[0])] {
                    let key = (a.min(b), a.max(b));
                    let eid = edge_index[&key];
                    for j in 1..k {
                        // Edge-interior nodes are stored walking from the
                        // lower-indexed vertex, so shared dofs coincide.
                        let slot = if a < b { j - 1 } else { k - 1 - j };
                        let d = nv + eid * per_edge + slot;
                        dofs.push(d);
                        let t = j as f64 / k as f64;
                        let pa = mesh.vertices[a];
                        let pb = mesh.vertices[b];
                        node_coords[d] =
                            [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
                    }
                }
                let base = nv + n_edges * per_edge + e * n_interior;
                let v0 = mesh.vertices[ev[0]];
                let v1 = mesh.vertices[ev[1]];
                let v2 = mesh.vertices[ev[2]];
                let mut t = 0;
                for j in 1..k {
                    for i in 1..k {
                        if i + j <= k - 1 {
                            let d = base + t;
                            dofs.push(d);
                            let (xi, eta) = (i as f64 / k as f64, j as f64 / k as f64);
                            node_coords[d] = [
                                v0[0] + xi * (v1[0] - v0[0]) + eta * (v2[0] - v0[0]),
                                v0[1] + xi * (v1[1] - v0[1]) + eta * (v2[1] - v0[1]),
                            ];
                            t += 1;
                        }
                    }
                }
                elem_dofs.push(dofs);
            }
        }
    }

    // Affine geometry per element; reject degenerate maps here so that
    // evaluation is infallible.
    let mut geometry = Vec::with_capacity(ne);
    for (e, ev) in mesh.elements.iter().enumerate() {
        let geo = match mesh.dim {
            1 => {
                let h = mesh.vertices[ev[1]][0] - mesh.vertices[ev[0]][0];
                if h <= 0.0 {
                    return Err(Error::SingularElement(e));
                }
                ElementGeometry { inv_jac_t: [[1.0 / h, 0.0], [0.0, 0.0]], det: h }
            }
            _ => {
                let v0 = mesh.vertices[ev[0]];
                let v1 = mesh.vertices[ev[1]];
                let v2 = mesh.vertices[ev[2]];
                let (a, c) = (v1[0] - v0[0], v1[1] - v0[1]);
                let (b, d) = (v2[0] - v0[0], v2[1] - v0[1]);
                let det = a * d - b * c;
                if det <= 0.0 {
                    return Err(Error::SingularElement(e));
                }
                ElementGeometry {
                    inv_jac_t: [[d / det, -c / det], [-b / det, a / det]],
                    det,
                }
            }
        };
        geometry.push(geo);
    }

    // Boundary dof sets per marker.
    let mut boundary_dofs: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for bf in &mesh.boundary_facets {
        let set = boundary_dofs.entry(bf.marker).or_default();
        match mesh.dim {
            1 => set.push(bf.vertices[0]),
            _ => {
                let (a, b) = (bf.vertices[0], bf.vertices[1]);
                set.push(a);
                set.push(b);
                let key = (a.min(b), a.max(b));
                if let Some(&eid) = edge_index.get(&key) {
                    for slot in 0..k - 1 {
                        set.push(nv + eid * (k - 1) + slot);
                    }
                }
            }
        }
    }
    for set in boundary_dofs.values_mut() {
        set.sort_unstable();
        set.dedup();
    }

    Ok(SpatialSpace {
        mesh,
        degree: k,
        ndofs,
        elem_dofs,
        boundary_dofs,
        node_coords,
        geometry,
        reference,
    })
}

impl SpatialSpace {
    pub fn n_local(&self) -> usize {
        self.reference.n_local()
    }

    pub fn geometry(&self, e: usize) -> &ElementGeometry {
        &self.geometry[e]
    }

    /// Map a reference point of element `e` to physical coordinates.
    pub fn map_to_physical(&self, e: usize, p: &[f64; 2]) -> [f64; 2] {
        let ev = self.mesh.element_vertices(e);
        let v0 = self.mesh.vertices[ev[0]];
        match self.mesh.dim {
            1 => {
                let v1 = self.mesh.vertices[ev[1]];
                [v0[0] + p[0] * (v1[0] - v0[0]), 0.0]
            }
            _ => {
                let v1 = self.mesh.vertices[ev[1]];
                let v2 = self.mesh.vertices[ev[2]];
                [
                    v0[0] + p[0] * (v1[0] - v0[0]) + p[1] * (v2[0] - v0[0]),
                    v0[1] + p[0] * (v1[1] - v0[1]) + p[1] * (v2[1] - v0[1]),
                ]
            }
        }
    }

    /// Basis values and *physical* gradients at a reference point of
    /// element `e`.
    pub fn eval_basis(&self, e: usize, ref_point: &[f64; 2]) -> (Vec<f64>, Vec<[f64; 2]>) {
        let (values, ref_grads) = self.reference.eval(ref_point);
        let jt = &self.geometry[e].inv_jac_t;
        let grads = ref_grads
            .iter()
            .map(|g| {
                [
                    jt[0][0] * g[0] + jt[0][1] * g[1],
                    jt[1][0] * g[0] + jt[1][1] * g[1],
                ]
            })
            .collect();
        (values, grads)
    }

    /// Nodal interpolation of a function into the space.
    pub fn interpolate(&self, f: impl Fn(&[f64; 2]) -> f64) -> Vec<f64> {
        self.node_coords.iter().map(|p| f(p)).collect()
    }

    /// Tabulate basis values and reference gradients at a fixed point set
    /// (they are element-independent; only the gradient map varies).
    pub fn tabulate(&self, points: &[[f64; 2]]) -> BasisTable {
        let mut values = Vec::with_capacity(points.len());
        let mut ref_gradients = Vec::with_capacity(points.len());
        for p in points {
            let (v, g) = self.reference.eval(p);
            values.push(v);
            ref_gradients.push(g);
        }
        BasisTable { values, ref_gradients }
    }

    /// Push a reference gradient through element `e`'s inverse Jacobian.
    pub fn map_gradient(&self, e: usize, g: &[f64; 2]) -> [f64; 2] {
        let jt = &self.geometry[e].inv_jac_t;
        [
            jt[0][0] * g[0] + jt[0][1] * g[1],
            jt[1][0] * g[0] + jt[1][1] * g[1],
        ]
    }
}

/// Basis values and reference-coordinate gradients tabulated at a point set.
#[derive(Debug, Clone)]
pub struct BasisTable {
    /// `values[point][local_dof]`
    pub values: Vec<Vec<f64>>,
    /// `ref_gradients[point][local_dof]`
    pub ref_gradients: Vec<Vec<[f64; 2]>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_interval_mesh, build_unit_square_mesh};
    use std::collections::BTreeSet;

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (*state >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn gauss_legendre_small_rules() {
        let r = temporal_quadrature(1);
        assert_eq!(r.len(), 1);
        assert!((r.points[0][0] - 0.5).abs() < 1e-15);
        assert!((r.weights[0] - 1.0).abs() < 1e-15);

        let r = temporal_quadrature(2);
        let lo = (3.0 - 3f64.sqrt()) / 6.0;
        let hi = (3.0 + 3f64.sqrt()) / 6.0;
        assert!((r.points[0][0] - lo).abs() < 1e-14);
        assert!((r.points[1][0] - hi).abs() < 1e-14);
        assert!((r.weights[0] - 0.5).abs() < 1e-14);
        assert!((r.weights[1] - 0.5).abs() < 1e-14);

        // Exactness: cubic integrates exactly with two points.
        let integral: f64 = r
            .points
            .iter()
            .zip(&r.weights)
            .map(|(p, w)| w * p[0].powi(3))
            .sum();
        assert!((integral - 0.25).abs() < 1e-15);
    }

    #[test]
    fn quadrature_exactness_sweep() {
        for npts in 1..=8 {
            let r = temporal_quadrature(npts);
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for deg in 0..=r.exactness {
                let num: f64 = r
                    .points
                    .iter()
                    .zip(&r.weights)
                    .map(|(p, w)| w * p[0].powi(deg as i32))
                    .sum();
                let exact = 1.0 / (deg as f64 + 1.0);
                assert!(
                    (num - exact).abs() < 1e-13 * exact.max(1.0),
                    "npts={npts} deg={deg}: {num} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn triangle_quadrature() {
        let r = spatial_quadrature(2, 1);
        assert_eq!(r.len(), 1);
        assert!((r.points[0][0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.weights[0] - 0.5).abs() < 1e-15);

        let r = spatial_quadrature(1, 3);
        assert_eq!(r.len(), 2); // 2-point Gauss on [0,1]

        // Monomial sweep against the exact simplex integral
        // a! b! / (a+b+2)!.
        fn factorial(n: usize) -> f64 {
            (1..=n).map(|i| i as f64).product::<f64>().max(1.0)
        }
        for order in 1..=8 {
            let r = spatial_quadrature(2, order);
            assert!((r.weights.iter().sum::<f64>() - 0.5).abs() < 1e-14);
            for a in 0..=order {
                for b in 0..=(order - a) {
                    let num: f64 = r
                        .points
                        .iter()
                        .zip(&r.weights)
                        .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32))
                        .sum();
                    let exact = factorial(a) * factorial(b) / factorial(a + b + 2);
                    assert!(
                        (num - exact).abs() < 1e-13 * exact.max(1.0),
                        "order={order} x^{a} y^{b}: {num} vs {exact}"
                    );
                }
            }
        }
        // The spec's spot check: x^2 y^2 integrates to 1/180.
        let r = spatial_quadrature(2, 4);
        let num: f64 = r
            .points
            .iter()
            .zip(&r.weights)
            .map(|(p, w)| w * p[0].powi(2) * p[1].powi(2))
            .sum();
        assert!((num - 1.0 / 180.0).abs() < 1e-15);
    }

    #[test]
    fn radau_nodes_match_closed_forms() {
        assert_eq!(TemporalBasis::radau_right(0).nodes, vec![1.0]);

        let b = TemporalBasis::radau_right(1);
        assert!((b.nodes[0] - 1.0 / 3.0).abs() < 1e-14);
        assert!((b.nodes[1] - 1.0).abs() < 1e-15);

        let b = TemporalBasis::radau_right(2);
        let lo = (4.0 - 6.0f64.sqrt()) / 10.0;
        let hi = (4.0 + 6.0f64.sqrt()) / 10.0;
        assert!((b.nodes[0] - lo).abs() < 1e-14);
        assert!((b.nodes[1] - hi).abs() < 1e-14);
        assert!((b.nodes[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn temporal_basis_spans_polynomials() {
        for m in 0..=4 {
            let basis = TemporalBasis::radau_right(m);
            let quad = temporal_quadrature(m + 3);
            for j in 0..=m {
                // Interpolate t^j at the nodes, then check values and
                // derivatives at quadrature points and at the traces.
                let coeffs: Vec<f64> = basis.nodes.iter().map(|t| t.powi(j as i32)).collect();
                let mut check_points: Vec<f64> =
                    quad.points.iter().map(|p| p[0]).collect();
                check_points.push(0.0);
                check_points.push(1.0);
                for t in check_points {
                    let vals = basis.values(t);
                    let p: f64 = coeffs.iter().zip(&vals).map(|(c, v)| c * v).sum();
                    assert!((p - t.powi(j as i32)).abs() < 1e-13, "m={m} j={j} t={t}");
                    let ders = basis.derivatives(t);
                    let dp: f64 = coeffs.iter().zip(&ders).map(|(c, v)| c * v).sum();
                    let exact = if j == 0 { 0.0 } else { j as f64 * t.powi(j as i32 - 1) };
                    assert!((dp - exact).abs() < 1e-11, "m={m} j={j} t={t}");
                }
            }
        }
    }

    #[test]
    fn dof_counts() {
        let mesh = Arc::new(build_interval_mesh(0.0, 1.0, 4, &[]).unwrap());
        assert_eq!(build_space(mesh.clone(), 1).unwrap().ndofs, 5);
        assert_eq!(build_space(mesh.clone(), 2).unwrap().ndofs, 9);
        assert_eq!(build_space(mesh, 3).unwrap().ndofs, 13);

        let mesh = Arc::new(build_interval_mesh(-28.0, 25.0, 848, &[]).unwrap());
        assert_eq!(build_space(mesh, 1).unwrap().ndofs, 849);

        // Count edges of the structured mesh programmatically and apply the
        // dof formula nv + n_edges (k-1) + n_tri (k-1)(k-2)/2.
        let mesh = Arc::new(build_unit_square_mesh(8).unwrap());
        let mut edges = BTreeSet::new();
        for ev in &mesh.elements {
            for (a, b) in [(ev[0], ev[1]), (ev[1], ev[2]), (ev[2], ev[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        assert_eq!(edges.len(), 208);
        let space = build_space(mesh.clone(), 2).unwrap();
        assert_eq!(space.ndofs, 81 + 208);
        let space = build_space(mesh, 3).unwrap();
        assert_eq!(space.ndofs, 81 + 208 * 2 + 128);
    }

    #[test]
    fn rejects_degree_zero() {
        let mesh = Arc::new(build_unit_square_mesh(2).unwrap());
        assert!(matches!(build_space(mesh, 0), Err(Error::UnsupportedDegree(0))));
    }

    #[test]
    fn rejects_degenerate_element() {
        use crate::mesh::{BoundaryFacet, Mesh};
        // Hand-built mesh with an inverted (clockwise) triangle.
        let mesh = Mesh {
            dim: 2,
            vertices: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            elements: vec![[0, 2, 1]],
            boundary_facets: vec![
                BoundaryFacet { marker: 1, vertices: [0, 1], len: 2 },
                BoundaryFacet { marker: 1, vertices: [1, 2], len: 2 },
                BoundaryFacet { marker: 1, vertices: [2, 0], len: 2 },
            ],
            element_region: vec![0],
        };
        assert!(matches!(build_space(Arc::new(mesh), 1), Err(Error::SingularElement(0))));
    }

    #[test]
    fn partition_of_unity() {
        let mesh = Arc::new(build_unit_square_mesh(3).unwrap());
        let mut state = 7u64;
        for k in 1..=3 {
            let space = build_space(mesh.clone(), k).unwrap();
            for _ in 0..20 {
                let e = (lcg(&mut state) * space.mesh.n_elements() as f64) as usize;
                let mut x = lcg(&mut state);
                let mut y = lcg(&mut state);
                if x + y > 1.0 {
                    x = 1.0 - x;
                    y = 1.0 - y;
                }
                let (vals, grads) = space.eval_basis(e, &[x, y]);
                let vsum: f64 = vals.iter().sum();
                assert!((vsum - 1.0).abs() < 1e-12);
                let gx: f64 = grads.iter().map(|g| g[0]).sum();
                let gy: f64 = grads.iter().map(|g| g[1]).sum();
                assert!(gx.abs() < 1e-12 && gy.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nodal_property_1d() {
        let mesh = Arc::new(build_interval_mesh(0.0, 1.0, 2, &[]).unwrap());
        let space = build_space(mesh.clone(), 1).unwrap();
        let (vals, _) = space.eval_basis(0, &[0.0, 0.0]);
        assert!((vals[0] - 1.0).abs() < 1e-14 && vals[1].abs() < 1e-14);

        let space = build_space(mesh, 2).unwrap();
        let (vals, _) = space.eval_basis(0, &[0.5, 0.0]);
        // Local order: two endpoints, then the midpoint node.
        assert!(vals[0].abs() < 1e-13 && vals[1].abs() < 1e-13);
        assert!((vals[2] - 1.0).abs() < 1e-13);
    }

    #[test]
    fn continuity_across_shared_facets() {
        // Evaluate a random coefficient vector from both sides of shared
        // element faces; C0 conformity means the traces agree.
        let mesh = Arc::new(build_unit_square_mesh(2).unwrap());
        for k in 1..=3 {
            let space = build_space(mesh.clone(), k).unwrap();
            let mut state = 12345u64;
            let coeffs: Vec<f64> = (0..space.ndofs).map(|_| lcg(&mut state)).collect();
            let eval_at = |e: usize, p: &[f64; 2]| -> f64 {
                let (vals, _) = space.eval_basis(e, p);
                space.elem_dofs[e].iter().zip(&vals).map(|(&d, v)| coeffs[d] * v).sum()
            };
            // Find a shared edge between elements 0 and 1.
            for e2 in 1..mesh.n_elements() {
                let s0: BTreeSet<_> = mesh.element_vertices(0).iter().copied().collect();
                let s2: BTreeSet<_> = mesh.element_vertices(e2).iter().copied().collect();
                let shared: Vec<usize> = s0.intersection(&s2).copied().collect();
                if shared.len() != 2 {
                    continue;
                }
                let pa = mesh.vertices[shared[0]];
                let pb = mesh.vertices[shared[1]];
                for j in 0..=6 {
                    let t = j as f64 / 6.0;
                    let phys = [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
                    let to_ref = |e: usize| -> [f64; 2] {
                        let ev = mesh.element_vertices(e);
                        let v0 = mesh.vertices[ev[0]];
                        let g = space.geometry(e);
                        // inv_jac_t is the transposed inverse; undo transpose.
                        let dx = phys[0] - v0[0];
                        let dy = phys[1] - v0[1];
                        [
                            g.inv_jac_t[0][0] * dx + g.inv_jac_t[1][0] * dy,
                            g.inv_jac_t[0][1] * dx + g.inv_jac_t[1][1] * dy,
                        ]
                    };
                    let a = eval_at(0, &to_ref(0));
                    let b = eval_at(e2, &to_ref(e2));
                    assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn interpolation_reproduces_polynomials() {
        let mesh = Arc::new(build_unit_square_mesh(3).unwrap());
        let mut state = 99u64;
        for k in 1..=3usize {
            let space = build_space(mesh.clone(), k).unwrap();
            let kf = k as i32;
            let poly = move |p: &[f64; 2]| {
                // A full-degree polynomial of total degree k.
                1.0 + p[0] - 0.5 * p[1] + 0.25 * p[0] * p[1].powi(kf - 1) + p[0].powi(kf)
            };
            let coeffs = space.interpolate(poly);
            for _ in 0..50 {
                let e = (lcg(&mut state) * space.mesh.n_elements() as f64) as usize;
                let mut x = lcg(&mut state);
                let mut y = lcg(&mut state);
                if x + y > 1.0 {
                    x = 1.0 - x;
                    y = 1.0 - y;
                }
                let (vals, _) = space.eval_basis(e, &[x, y]);
                let num: f64 =
                    space.elem_dofs[e].iter().zip(&vals).map(|(&d, v)| coeffs[d] * v).sum();
                let phys = space.map_to_physical(e, &[x, y]);
                assert!((num - poly(&phys)).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn boundary_dofs_cover_markers() {
        let mesh = Arc::new(build_unit_square_mesh(4).unwrap());
        let space = build_space(mesh, 2).unwrap();
        let dofs = &space.boundary_dofs[&1];
        // 16 boundary vertices + 16 boundary edge midpoints.
        assert_eq!(dofs.len(), 32);
        for &d in dofs {
            let p = space.node_coords[d];
            let on_boundary = p[0].abs() < 1e-14
                || (p[0] - 1.0).abs() < 1e-14
                || p[1].abs() < 1e-14
                || (p[1] - 1.0).abs() < 1e-14;
            assert!(on_boundary);
        }
    }
}
