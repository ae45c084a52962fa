//! Simplicial meshes (1D intervals, 2D triangles) with boundary markers and
//! region tags, plus region-wise coefficient fields for discontinuous
//! material data.
//!
//! Coefficients are resolved per *element* (via the element's region tag),
//! never per point, so evaluation on a jump interface is unambiguous.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};

/// A boundary facet: a vertex in 1D, an edge in 2D.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFacet {
    pub marker: i32,
    /// Vertex indices; `vertices[1]` is unused in 1D.
    pub vertices: [usize; 2],
    /// Number of vertices actually used (1 in 1D, 2 in 2D).
    pub len: usize,
}

/// Conforming simplicial mesh. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub dim: usize,
    /// Vertex coordinates; `[x, 0]` in 1D.
    pub vertices: Vec<[f64; 2]>,
    /// Element connectivity; `dim + 1` vertices per element, the extra slot
    /// is unused in 1D.
    pub elements: Vec<[usize; 3]>,
    pub boundary_facets: Vec<BoundaryFacet>,
    /// One region tag per element.
    pub element_region: Vec<i32>,
}

impl Mesh {
    /// Number of vertices per element.
    pub fn verts_per_element(&self) -> usize {
        self.dim + 1
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn element_vertices(&self, e: usize) -> &[usize] {
        &self.elements[e][..self.verts_per_element()]
    }

    /// Signed measure of an element under the stored vertex ordering
    /// (length in 1D, area in 2D).
    pub fn element_measure(&self, e: usize) -> f64 {
        let ev = &self.elements[e];
        match self.dim {
            1 => self.vertices[ev[1]][0] - self.vertices[ev[0]][0],
            _ => {
                let a = self.vertices[ev[0]];
                let b = self.vertices[ev[1]];
                let c = self.vertices[ev[2]];
                0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
            }
        }
    }

    /// Total measure of the mesh.
    pub fn total_measure(&self) -> f64 {
        (0..self.n_elements()).map(|e| self.element_measure(e)).sum()
    }

    /// All faces of an element, each as a sorted vertex tuple.
    fn element_faces(&self, e: usize) -> Vec<[usize; 2]> {
        let ev = &self.elements[e];
        match self.dim {
            1 => vec![[ev[0], usize::MAX], [ev[1], usize::MAX]],
            _ => {
                let mut faces = Vec::with_capacity(3);
                for (a, b) in [(ev[0], ev[1]), (ev[1], ev[2]), (ev[2], ev[0])] {
                    faces.push([a.min(b), a.max(b)]);
                }
                faces
            }
        }
    }

    /// Check all structural invariants: vertex indices in range, positive
    /// element measures, boundary facets covering exactly the faces owned by
    /// a single element, and a region tag per element.
    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::InvalidInput(format!("dim must be 1 or 2, got {}", self.dim)));
        }
        if self.element_region.len() != self.elements.len() {
            return Err(Error::InvalidInput(
                "element_region length does not match element count".into(),
            ));
        }
        let nv = self.vertices.len();
        for (e, ev) in self.elements.iter().enumerate() {
            for &v in &ev[..self.verts_per_element()] {
                if v >= nv {
                    return Err(Error::Topology {
                        element: e,
                        msg: format!("references vertex {v} of {nv}"),
                    });
                }
            }
            let measure = self.element_measure(e);
            if !(measure > 0.0) {
                return Err(Error::Topology {
                    element: e,
                    msg: format!("non-positive measure {measure}"),
                });
            }
        }
        // Face incidence counts: interior faces are shared by two elements,
        // boundary faces owned by one and must appear in the facet list.
        let mut face_count: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        for e in 0..self.n_elements() {
            for face in self.element_faces(e) {
                *face_count.entry(face).or_insert(0) += 1;
            }
        }
        for (face, count) in &face_count {
            if *count > 2 {
                return Err(Error::Topology {
                    element: 0,
                    msg: format!("face {face:?} shared by {count} elements"),
                });
            }
        }
        let mut marked: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        for bf in &self.boundary_facets {
            let key = match self.dim {
                1 => [bf.vertices[0], usize::MAX],
                _ => {
                    let (a, b) = (bf.vertices[0], bf.vertices[1]);
                    [a.min(b), a.max(b)]
                }
            };
            *marked.entry(key).or_insert(0) += 1;
        }
        for (face, count) in &face_count {
            let is_boundary = *count == 1;
            let times_marked = marked.get(face).copied().unwrap_or(0);
            if is_boundary && times_marked != 1 {
                return Err(Error::Topology {
                    element: 0,
                    msg: format!("boundary face {face:?} marked {times_marked} times"),
                });
            }
            if !is_boundary && times_marked != 0 {
                return Err(Error::Topology {
                    element: 0,
                    msg: format!("interior face {face:?} listed as boundary"),
                });
            }
        }
        for (face, _) in marked {
            if !face_count.contains_key(&face) {
                return Err(Error::Topology {
                    element: 0,
                    msg: format!("boundary facet {face:?} is not a face of any element"),
                });
            }
        }
        Ok(())
    }

    /// Serialize to the plain-text mesh format (see [`load_mesh`]).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} {} {}",
            self.dim,
            self.vertices.len(),
            self.elements.len(),
            self.boundary_facets.len()
        );
        for v in &self.vertices {
            if self.dim == 1 {
                let _ = writeln!(out, "{}", v[0]);
            } else {
                let _ = writeln!(out, "{} {}", v[0], v[1]);
            }
        }
        for (e, ev) in self.elements.iter().enumerate() {
            let _ = write!(out, "{}", self.element_region[e]);
            for &v in &ev[..self.verts_per_element()] {
                let _ = write!(out, " {v}");
            }
            let _ = writeln!(out);
        }
        for bf in &self.boundary_facets {
            let _ = write!(out, "{}", bf.marker);
            for &v in &bf.vertices[..bf.len] {
                let _ = write!(out, " {v}");
            }
            let _ = writeln!(out);
        }
        out
    }
}

/// Uniform mesh of `[a, b]` with `n` elements, refined so that every
/// breakpoint is a mesh vertex. Region tags number the breakpoint intervals
/// left to right starting at 0.
pub fn build_interval_mesh(a: f64, b: f64, n: usize, breakpoints: &[f64]) -> Result<Mesh> {
    if !(a < b) {
        return Err(Error::InvalidInput(format!("need a < b, got [{a}, {b}]")));
    }
    if n < 1 {
        return Err(Error::InvalidInput("need at least one element".into()));
    }
    for w in breakpoints.windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::InvalidInput(format!(
                "breakpoints must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    for &p in breakpoints {
        if !(a < p && p < b) {
            return Err(Error::InvalidInput(format!("breakpoint {p} outside ({a}, {b})")));
        }
    }

    let h = (b - a) / n as f64;
    let mut coords: Vec<f64> = (0..=n).map(|i| a + i as f64 * h).collect();
    // Snap near-coincident vertices onto the breakpoint, insert the rest.
    let tol = 1e-12 * (b - a);
    for &p in breakpoints {
        match coords.iter().position(|&x| (x - p).abs() <= tol) {
            Some(i) => coords[i] = p,
            None => {
                let i = coords.partition_point(|&x| x < p);
                coords.insert(i, p);
            }
        }
    }

    let region_of = |mid: f64| breakpoints.partition_point(|&p| p < mid) as i32;
    let n_elem = coords.len() - 1;
    let mut elements = Vec::with_capacity(n_elem);
    let mut element_region = Vec::with_capacity(n_elem);
    for e in 0..n_elem {
        elements.push([e, e + 1, usize::MAX]);
        element_region.push(region_of(0.5 * (coords[e] + coords[e + 1])));
    }
    let mesh = Mesh {
        dim: 1,
        vertices: coords.iter().map(|&x| [x, 0.0]).collect(),
        elements,
        boundary_facets: vec![
            BoundaryFacet { marker: 1, vertices: [0, usize::MAX], len: 1 },
            BoundaryFacet { marker: 1, vertices: [n_elem, usize::MAX], len: 1 },
        ],
        element_region,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Structured triangulation of the unit square: `n x n` cells, each split
/// into two triangles along the diagonal. All boundary facets carry marker 1.
pub fn build_unit_square_mesh(n: usize) -> Result<Mesh> {
    if n < 1 {
        return Err(Error::InvalidInput("need at least one subdivision".into()));
    }
    let nv = n + 1;
    let mut vertices = Vec::with_capacity(nv * nv);
    for j in 0..nv {
        for i in 0..nv {
            vertices.push([i as f64 / n as f64, j as f64 / n as f64]);
        }
    }
    let vid = |i: usize, j: usize| j * nv + i;
    let mut elements = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            // Counterclockwise splits of cell (i, j).
            elements.push([vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)]);
            elements.push([vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)]);
        }
    }
    let mut boundary_facets = Vec::with_capacity(4 * n);
    for i in 0..n {
        boundary_facets.push(BoundaryFacet { marker: 1, vertices: [vid(i, 0), vid(i + 1, 0)], len: 2 });
        boundary_facets.push(BoundaryFacet { marker: 1, vertices: [vid(i, n), vid(i + 1, n)], len: 2 });
        boundary_facets.push(BoundaryFacet { marker: 1, vertices: [vid(0, i), vid(0, i + 1)], len: 2 });
        boundary_facets.push(BoundaryFacet { marker: 1, vertices: [vid(n, i), vid(n, i + 1)], len: 2 });
    }
    let element_region = vec![0; elements.len()];
    let mesh = Mesh { dim: 2, vertices, elements, boundary_facets, element_region };
    mesh.validate()?;
    Ok(mesh)
}

/// Parse a mesh from the plain-text format:
///
/// ```text
/// dim nv ne nb
/// x [y]              # nv vertex lines
/// region v0 v1 [v2]  # ne element lines
/// marker v0 [v1]     # nb boundary facet lines
/// ```
///
/// `#` starts a comment, indices are 0-based.
pub fn load_mesh(text: &str) -> Result<Mesh> {
    struct Lines<'a> {
        iter: std::iter::Enumerate<std::str::Lines<'a>>,
    }
    impl<'a> Lines<'a> {
        fn next_data(&mut self) -> Option<(usize, &'a str)> {
            for (i, line) in self.iter.by_ref() {
                let line = line.split('#').next().unwrap_or("").trim();
                if !line.is_empty() {
                    return Some((i + 1, line));
                }
            }
            None
        }
    }
    let mut lines = Lines { iter: text.lines().enumerate() };

    let (lno, header) = lines
        .next_data()
        .ok_or(Error::Parse { line: 1, msg: "empty mesh file".into() })?;
    let headers: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse { line: lno, msg: format!("bad header token {t:?}") }))
        .collect::<Result<_>>()?;
    if headers.len() != 4 {
        return Err(Error::Parse { line: lno, msg: "header must be `dim nv ne nb`".into() });
    }
    let (dim, nv, ne, nb) = (headers[0], headers[1], headers[2], headers[3]);
    if dim != 1 && dim != 2 {
        return Err(Error::Parse { line: lno, msg: format!("dim must be 1 or 2, got {dim}") });
    }

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (lno, line) = lines
            .next_data()
            .ok_or(Error::Parse { line: 0, msg: "unexpected end of file in vertex block".into() })?;
        let coords: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse { line: lno, msg: format!("bad coordinate {t:?}") }))
            .collect::<Result<_>>()?;
        if coords.len() != dim {
            return Err(Error::Parse { line: lno, msg: format!("expected {dim} coordinates") });
        }
        vertices.push([coords[0], if dim == 2 { coords[1] } else { 0.0 }]);
    }

    let mut elements = Vec::with_capacity(ne);
    let mut element_region = Vec::with_capacity(ne);
    for _ in 0..ne {
        let (lno, line) = lines
            .next_data()
            .ok_or(Error::Parse { line: 0, msg: "unexpected end of file in element block".into() })?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != dim + 2 {
            return Err(Error::Parse { line: lno, msg: "expected `region v0 v1 [v2]`".into() });
        }
        let region: i32 = toks[0]
            .parse()
            .map_err(|_| Error::Parse { line: lno, msg: format!("bad region tag {:?}", toks[0]) })?;
        let mut ev = [usize::MAX; 3];
        for (slot, t) in ev.iter_mut().zip(&toks[1..]) {
            *slot = t
                .parse()
                .map_err(|_| Error::Parse { line: lno, msg: format!("bad vertex index {t:?}") })?;
        }
        elements.push(ev);
        element_region.push(region);
    }

    let mut boundary_facets = Vec::with_capacity(nb);
    for _ in 0..nb {
        let (lno, line) = lines
            .next_data()
            .ok_or(Error::Parse { line: 0, msg: "unexpected end of file in facet block".into() })?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != dim + 1 {
            return Err(Error::Parse { line: lno, msg: "expected `marker v0 [v1]`".into() });
        }
        let marker: i32 = toks[0]
            .parse()
            .map_err(|_| Error::Parse { line: lno, msg: format!("bad marker {:?}", toks[0]) })?;
        let mut vs = [usize::MAX; 2];
        for (slot, t) in vs.iter_mut().zip(&toks[1..]) {
            *slot = t
                .parse()
                .map_err(|_| Error::Parse { line: lno, msg: format!("bad vertex index {t:?}") })?;
        }
        boundary_facets.push(BoundaryFacet { marker, vertices: vs, len: dim });
    }

    let mesh = Mesh { dim, vertices, elements, boundary_facets, element_region };
    mesh.validate()?;
    Ok(mesh)
}

/// A scalar field of space, `x = [x, y]` (`y` unused in 1D).
pub type ScalarField = Arc<dyn Fn(&[f64; 2]) -> f64 + Send + Sync>;

/// Material coefficient, possibly discontinuous across region boundaries.
///
/// For the piecewise variants, the *element's* region tag selects the branch,
/// so values on jump interfaces are well-defined.
#[derive(Clone)]
pub enum CoefficientField {
    Constant(f64),
    /// One constant per region tag.
    PiecewiseConstant(BTreeMap<i32, f64>),
    /// One closed form per region tag.
    PiecewiseFn(BTreeMap<i32, ScalarField>),
    /// A single closed form over the whole domain.
    Function(ScalarField),
}

impl std::fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CoefficientField::Constant(v) => write!(f, "Constant({v})"),
            CoefficientField::PiecewiseConstant(m) => write!(f, "PiecewiseConstant({m:?})"),
            CoefficientField::PiecewiseFn(m) => {
                write!(f, "PiecewiseFn({:?} regions)", m.len())
            }
            CoefficientField::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl CoefficientField {
    /// Evaluate at a physical point inside the given element.
    pub fn evaluate(&self, mesh: &Mesh, element: usize, point: &[f64; 2]) -> f64 {
        match self {
            CoefficientField::Constant(v) => *v,
            CoefficientField::PiecewiseConstant(values) => {
                let region = mesh.element_region[element];
                *values
                    .get(&region)
                    .unwrap_or_else(|| panic!("no coefficient value for region {region}"))
            }
            CoefficientField::PiecewiseFn(branches) => {
                let region = mesh.element_region[element];
                let branch = branches
                    .get(&region)
                    .unwrap_or_else(|| panic!("no coefficient branch for region {region}"));
                branch(point)
            }
            CoefficientField::Function(f) => f(point),
        }
    }

    /// True if every mesh region has a branch (trivially true for constants
    /// and global closed forms).
    pub fn covers(&self, mesh: &Mesh) -> bool {
        match self {
            CoefficientField::Constant(_) | CoefficientField::Function(_) => true,
            CoefficientField::PiecewiseConstant(values) => {
                mesh.element_region.iter().all(|r| values.contains_key(r))
            }
            CoefficientField::PiecewiseFn(branches) => {
                mesh.element_region.iter().all(|r| branches.contains_key(r))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_mesh_uniform() {
        let mesh = build_interval_mesh(0.0, 1.0, 4, &[]).unwrap();
        assert_eq!(mesh.n_elements(), 4);
        let xs: Vec<f64> = mesh.vertices.iter().map(|v| v[0]).collect();
        assert_eq!(xs, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!((mesh.total_measure() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn interval_mesh_example2_resolution() {
        // h = 53/848 = 1/16, and every jump of the channel radius lands on
        // the uniform grid, so no extra vertices are inserted.
        let mesh = build_interval_mesh(-28.0, 25.0, 848, &[-18.0, -5.0, 10.0]).unwrap();
        assert_eq!(mesh.n_elements(), 848);
        let h = mesh.element_measure(0);
        assert!((h - 1.0 / 16.0).abs() < 1e-12);
        for bp in [-18.0, -5.0, 10.0] {
            assert!(mesh.vertices.iter().any(|v| (v[0] - bp).abs() < 1e-12));
        }
        // Region tags partition left-to-right.
        assert_eq!(mesh.element_region[0], 0);
        assert_eq!(*mesh.element_region.last().unwrap(), 3);
    }

    #[test]
    fn interval_mesh_inserts_breakpoints() {
        let mesh = build_interval_mesh(0.0, 1.0, 2, &[0.3]).unwrap();
        assert!(mesh.n_elements() >= 2);
        assert!(mesh.vertices.iter().any(|v| (v[0] - 0.3).abs() < 1e-15));
        assert!((mesh.total_measure() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interval_mesh_rejects_bad_breakpoints() {
        assert!(matches!(
            build_interval_mesh(0.0, 1.0, 4, &[0.5, 0.5]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            build_interval_mesh(0.0, 1.0, 4, &[0.7, 0.3]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            build_interval_mesh(0.0, 1.0, 4, &[1.5]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn unit_square_small() {
        let mesh = build_unit_square_mesh(1).unwrap();
        assert_eq!(mesh.n_elements(), 2);
        assert_eq!(mesh.vertices.len(), 4);
        let mesh = build_unit_square_mesh(8).unwrap();
        assert_eq!(mesh.n_elements(), 128);
        assert_eq!(mesh.vertices.len(), 81);
        assert!(build_unit_square_mesh(0).is_err());
    }

    #[test]
    fn unit_square_area_exact() {
        let mesh = build_unit_square_mesh(2).unwrap();
        assert_eq!(mesh.total_measure(), 1.0);
    }

    #[test]
    fn measures_sum_to_domain_measure() {
        let mesh = build_interval_mesh(-28.0, 25.0, 848, &[-18.0, -5.0, 10.0]).unwrap();
        assert!((mesh.total_measure() - 53.0).abs() < 1e-12 * 53.0);
        let mesh = build_unit_square_mesh(7).unwrap();
        assert!((mesh.total_measure() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mesh = build_unit_square_mesh(1).unwrap();
        let text = mesh.to_text();
        let back = load_mesh(&text).unwrap();
        assert_eq!(mesh, back);
        // And serializing again is bit-identical.
        assert_eq!(text, back.to_text());

        let mesh = build_interval_mesh(-28.0, 25.0, 53, &[-18.0, -5.0, 10.0]).unwrap();
        let back = load_mesh(&mesh.to_text()).unwrap();
        assert_eq!(mesh, back);
    }

    #[test]
    fn load_rejects_dangling_vertex() {
        let text = "2 4 1 0\n0 0\n1 0\n1 1\n0 1\n0 0 1 99\n";
        match load_mesh(text) {
            Err(Error::Topology { element, .. }) => assert_eq!(element, 0),
            other => panic!("expected topology error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_inverted_element() {
        // Clockwise triangle has negative area.
        let text = "2 3 1 3\n0 0\n1 0\n0 1\n0 0 2 1\n1 0 1\n1 1 2\n1 2 0\n";
        assert!(matches!(load_mesh(text), Err(Error::Topology { .. })));
    }

    #[test]
    fn load_reports_line_numbers() {
        let text = "1 2 1 2\n0\nbogus\n0 0 1\n1 0\n1 1\n";
        match load_mesh(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn example2_radius() -> CoefficientField {
        let mut branches: BTreeMap<i32, ScalarField> = BTreeMap::new();
        branches.insert(0, Arc::new(|x: &[f64; 2]| -0.5 * x[0] - 7.0));
        branches.insert(1, Arc::new(|_: &[f64; 2]| 2.0));
        branches.insert(2, Arc::new(|_: &[f64; 2]| 0.5));
        branches.insert(3, Arc::new(|x: &[f64; 2]| 0.9 * x[0] - 8.5));
        CoefficientField::PiecewiseFn(branches)
    }

    #[test]
    fn coefficient_evaluation_matches_tables() {
        let mesh = build_interval_mesh(-28.0, 25.0, 848, &[-18.0, -5.0, 10.0]).unwrap();
        let radius = example2_radius();
        let elem = (0..mesh.n_elements())
            .find(|&e| {
                let ev = mesh.element_vertices(e);
                mesh.vertices[ev[0]][0] <= -20.0 && -20.0 < mesh.vertices[ev[1]][0]
            })
            .unwrap();
        assert!((radius.evaluate(&mesh, elem, &[-20.0, 0.0]) - 3.0).abs() < 1e-14);

        let mut eps = BTreeMap::new();
        eps.insert(0, 189.79);
        eps.insert(1, 189.79);
        eps.insert(2, 4.7448);
        eps.insert(3, 189.79);
        let eps = CoefficientField::PiecewiseConstant(eps);
        let elem = (0..mesh.n_elements())
            .find(|&e| mesh.vertices[mesh.element_vertices(e)[0]][0] >= 20.0)
            .unwrap();
        assert!((eps.evaluate(&mesh, elem, &[20.0, 0.0]) - 189.79).abs() < 1e-14);
        assert!(eps.covers(&mesh));
    }

    #[test]
    fn piecewise_field_single_valued_per_region() {
        let mesh = build_interval_mesh(-28.0, 25.0, 106, &[-18.0, -5.0, 10.0]).unwrap();
        let mut values = BTreeMap::new();
        for r in 0..4 {
            values.insert(r, 10.0 + r as f64);
        }
        let field = CoefficientField::PiecewiseConstant(values);
        // Sample pseudo-random points inside each element; the value may only
        // depend on the element's region.
        let mut seen: BTreeMap<i32, f64> = BTreeMap::new();
        let mut state = 0x9e3779b97f4a7c15u64;
        for e in 0..mesh.n_elements() {
            for _ in 0..100 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let t = (state >> 11) as f64 / (1u64 << 53) as f64;
                let ev = mesh.element_vertices(e);
                let x = mesh.vertices[ev[0]][0] * (1.0 - t) + mesh.vertices[ev[1]][0] * t;
                let v = field.evaluate(&mesh, e, &[x, 0.0]);
                let region = mesh.element_region[e];
                let prev = seen.entry(region).or_insert(v);
                assert_eq!(*prev, v);
            }
        }
        assert_eq!(seen.len(), 4);
    }
}
