//! Problem presets, config files, CSV output, and the convergence harness
//! behind the command-line front end.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use crate::assembly::{
    BoundaryCondition, PhiGauge, ProblemSpec, SpeciesForcing, TimeField, TraceState,
};
use crate::diagnostics::{self, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::mesh::{build_interval_mesh, build_unit_square_mesh, CoefficientField, ScalarField};
use crate::timeloop::{DtMaxSchedule, RunConfig, Termination};

/// Flat key = value configuration; the single source of truth for a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Config::default()
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key} = {v:?} is not a number"))),
        }
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("{key} = {v:?} is not an integer"))),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        match self.entries.get(key).map(|s| s.as_str()) {
            None => Ok(None),
            Some("true") | Some("1") => Ok(Some(true)),
            Some("false") | Some("0") => Ok(Some(false)),
            Some(v) => Err(Error::Config(format!("{key} = {v:?} is not a boolean"))),
        }
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::new();
        for (lno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    lno + 1
                )));
            };
            cfg.set(key.trim(), value.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// "0:2,250:200" -> piecewise schedule; a bare number is a constant cap.
fn parse_dt_max(text: &str) -> Result<DtMaxSchedule> {
    if !text.contains(':') {
        let cap: f64 = text
            .parse()
            .map_err(|_| Error::Config(format!("dt_max {text:?} is not a number")))?;
        if !(cap > 0.0) {
            return Err(Error::Config(format!("dt_max {cap} must be positive")));
        }
        return Ok(DtMaxSchedule::constant(cap));
    }
    let mut entries = Vec::new();
    for part in text.split(',') {
        let Some((from, cap)) = part.split_once(':') else {
            return Err(Error::Config(format!("dt_max entry {part:?} is not `t:cap`")));
        };
        let from: f64 = from
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("dt_max time {from:?} is not a number")))?;
        let cap: f64 = cap
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("dt_max cap {cap:?} is not a number")))?;
        entries.push((from, cap));
    }
    DtMaxSchedule::new(entries)
}

fn format_dt_max(sched: &DtMaxSchedule) -> String {
    sched
        .entries()
        .iter()
        .map(|(t, c)| {
            if t.is_infinite() {
                format!("{c}")
            } else {
                format!("{t}:{c}")
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// "a:b,c:d" -> interval list.
fn parse_intervals(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let Some((a, b)) = part.split_once(':') else {
            return Err(Error::Config(format!("interval {part:?} is not `a:b`")));
        };
        let a: f64 =
            a.trim().parse().map_err(|_| Error::Config(format!("bad interval bound {a:?}")))?;
        let b: f64 =
            b.trim().parse().map_err(|_| Error::Config(format!("bad interval bound {b:?}")))?;
        if !(a < b) {
            return Err(Error::Config(format!("empty interval {a}:{b}")));
        }
        out.push((a, b));
    }
    Ok(out)
}

/// The smooth reference solution of the accuracy-test preset at time t:
/// closures for (u_1, u_2, phi).
pub fn example1_exact(t: f64) -> [Box<dyn Fn(&[f64; 2]) -> f64>; 3] {
    let s = move |x: &[f64; 2]| t.sin() * (PI * x[0]).sin() * (PI * x[1]).sin();
    [
        Box::new(move |x| (1.0 + 0.5 * s(x)).ln()),
        Box::new(move |x| (1.0 - 0.5 * s(x)).ln()),
        Box::new(s),
    ]
}

/// Closed-form source terms that make the example1 fields an exact solution.
fn example1_forcing() -> (SpeciesForcing, TimeField) {
    let pi2 = PI * PI;
    let species: SpeciesForcing = Arc::new(move |i, t, x| {
        let sx = (PI * x[0]).sin();
        let sy = (PI * x[1]).sin();
        let cx = (PI * x[0]).cos();
        let cy = (PI * x[1]).cos();
        let sxy = sx * sy;
        let s = t.sin() * sxy;
        // |grad s|^2
        let grad2 = t.sin() * t.sin() * pi2 * (cx * cx * sy * sy + sx * sx * cy * cy);
        match i {
            0 => 0.5 * t.cos() * sxy + 3.0 * pi2 * s + pi2 * s * s - 0.5 * grad2,
            _ => -0.5 * t.cos() * sxy - 3.0 * pi2 * s + pi2 * s * s - 0.5 * grad2,
        }
    });
    let poisson: TimeField = Arc::new(move |t, x| {
        let s = t.sin() * (PI * x[0]).sin() * (PI * x[1]).sin();
        (2.0 * pi2 - 1.0) * s
    });
    (species, poisson)
}

/// Accuracy-test preset: two oppositely charged species on the unit square
/// with manufactured sources, homogeneous Dirichlet data, fixed dt = 2h.
pub fn example1(inv_h: usize, k: usize, m: usize) -> Result<(ProblemSpec, RunConfig)> {
    if inv_h < 1 {
        return Err(Error::Config("example1 needs at least one subdivision".into()));
    }
    let mesh = Arc::new(build_unit_square_mesh(inv_h)?);
    let mut spec = ProblemSpec::new(mesh, 2);
    spec.valences = vec![1.0, -1.0];
    spec.gauge = PhiGauge::Dirichlet;
    for bc in spec.species_bc.iter_mut() {
        bc.insert(1, BoundaryCondition::dirichlet_constant(1.0));
    }
    spec.phi_bc.insert(1, BoundaryCondition::dirichlet_constant(0.0));
    let (f, g) = example1_forcing();
    spec.species_forcing = Some(f);
    spec.poisson_forcing = Some(g);
    spec.initial_density = vec![
        Arc::new(|_: &[f64; 2]| 1.0) as ScalarField,
        Arc::new(|_: &[f64; 2]| 1.0) as ScalarField,
    ];
    let h = 1.0 / inv_h as f64;
    let config = RunConfig::fixed_step(k, m, 2.0 * h, 1.0);
    Ok((spec, config))
}

/// Geometry and material data of the 1D channel preset.
pub struct Example2Data {
    pub eps_region: (f64, f64),
    pub rho0_intervals: Vec<(f64, f64)>,
    pub eps_channel: f64,
    pub eps_elsewhere: f64,
    pub rho0_value: f64,
}

impl Default for Example2Data {
    fn default() -> Self {
        Example2Data {
            // The low-permittivity branch is read as the channel (-5, 10);
            // the fixed-charge support as a union of unit intervals.
            eps_region: (-5.0, 10.0),
            rho0_intervals: vec![
                (-2.0, -1.0),
                (0.0, 1.0),
                (2.0, 3.0),
                (4.0, 5.0),
                (6.0, 7.0),
            ],
            eps_channel: 4.7448,
            eps_elsewhere: 189.79,
            rho0_value: -300.0,
        }
    }
}

/// 1D two-species channel with discontinuous radius, permittivity and fixed
/// charge, adaptive stepping to steady state.
pub fn example2(
    elements_per_unit: usize,
    k: usize,
    m: usize,
    data: &Example2Data,
) -> Result<(ProblemSpec, RunConfig)> {
    let (a, b) = (-28.0, 25.0);
    if elements_per_unit < 1 {
        return Err(Error::Config("example2 needs at least one element per unit".into()));
    }
    let n = ((b - a) * elements_per_unit as f64).round() as usize;

    // Every coefficient jump must land on a mesh vertex.
    let mut breaks: Vec<f64> = vec![-18.0, -5.0, 10.0];
    breaks.push(data.eps_region.0);
    breaks.push(data.eps_region.1);
    for &(lo, hi) in &data.rho0_intervals {
        breaks.push(lo);
        breaks.push(hi);
    }
    breaks.retain(|&x| a < x && x < b);
    breaks.sort_by(|p, q| p.partial_cmp(q).unwrap());
    breaks.dedup_by(|p, q| (*p - *q).abs() < 1e-12);

    let mesh = Arc::new(build_interval_mesh(a, b, n, &breaks)?);

    // Classify every region by its midpoint.
    let mut radius: BTreeMap<i32, ScalarField> = BTreeMap::new();
    let mut eps: BTreeMap<i32, f64> = BTreeMap::new();
    let mut rho0: BTreeMap<i32, f64> = BTreeMap::new();
    let mut edges = vec![a];
    edges.extend_from_slice(&breaks);
    edges.push(b);
    for (region, pair) in edges.windows(2).enumerate() {
        let region = region as i32;
        let mid = 0.5 * (pair[0] + pair[1]);
        let r: ScalarField = if mid < -18.0 {
            Arc::new(|x: &[f64; 2]| -0.5 * x[0] - 7.0)
        } else if mid < -5.0 {
            Arc::new(|_: &[f64; 2]| 2.0)
        } else if mid < 10.0 {
            Arc::new(|_: &[f64; 2]| 0.5)
        } else {
            Arc::new(|x: &[f64; 2]| 0.9 * x[0] - 8.5)
        };
        radius.insert(region, r);
        let in_eps = data.eps_region.0 < mid && mid < data.eps_region.1;
        eps.insert(region, if in_eps { data.eps_channel } else { data.eps_elsewhere });
        let in_rho = data.rho0_intervals.iter().any(|&(lo, hi)| lo < mid && mid < hi);
        rho0.insert(region, if in_rho { data.rho0_value } else { 0.0 });
    }

    let cross_section: BTreeMap<i32, ScalarField> = radius
        .iter()
        .map(|(&region, r)| {
            let r = r.clone();
            let f: ScalarField = Arc::new(move |x: &[f64; 2]| {
                let rv = r(x);
                PI * rv * rv
            });
            (region, f)
        })
        .collect();

    let mut spec = ProblemSpec::new(mesh, 2);
    spec.valences = vec![1.0, -1.0];
    spec.diffusivities = vec![1.0, 1.0383];
    spec.permittivity = CoefficientField::PiecewiseConstant(eps);
    spec.fixed_charge = CoefficientField::PiecewiseConstant(rho0);
    spec.cross_section = CoefficientField::PiecewiseFn(cross_section);
    spec.gauge = PhiGauge::Dirichlet;
    for bc in spec.species_bc.iter_mut() {
        bc.insert(1, BoundaryCondition::dirichlet_constant(1.0));
    }
    spec.phi_bc.insert(1, BoundaryCondition::dirichlet_constant(0.0));

    let dt_max = DtMaxSchedule::new(vec![(0.0, 2.0), (250.0, 200.0)])?;
    let config =
        RunConfig::adaptive(k, m, 1e-4, 1e-3, dt_max, Termination::SteadyState(1e-13));
    Ok((spec, config))
}

/// Named presets with their default resolutions.
pub fn preset(name: &str) -> Result<(ProblemSpec, RunConfig)> {
    match name {
        "example1" => example1(8, 1, 1),
        "example2" => example2(16, 1, 1, &Example2Data::default()),
        other => Err(Error::Config(format!("unknown preset {other:?}"))),
    }
}

/// Build a problem and run configuration from a full config (preset plus
/// overrides), echoing nothing; the caller decides where the effective
/// config is written.
pub fn build_problem(cfg: &Config) -> Result<(ProblemSpec, RunConfig, Config)> {
    let name = cfg.get("preset").ok_or_else(|| Error::Config("missing preset".into()))?;
    let k = cfg.get_usize("k")?.unwrap_or(1);
    let m = cfg.get_usize("m")?.unwrap_or(1);

    let (spec, mut run) = match name {
        "example1" => {
            let h = cfg.get_f64("h")?.unwrap_or(1.0 / 8.0);
            if !(h > 0.0 && h <= 1.0) {
                return Err(Error::Config(format!("example1 mesh size h = {h} out of range")));
            }
            let inv_h = (1.0 / h).round().max(1.0) as usize;
            example1(inv_h, k, m)?
        }
        "example2" => {
            let h = cfg.get_f64("h")?.unwrap_or(1.0 / 16.0);
            if !(h > 0.0 && h <= 53.0) {
                return Err(Error::Config(format!("example2 mesh size h = {h} out of range")));
            }
            let per_unit = (1.0 / h).round().max(1.0) as usize;
            let mut data = Example2Data::default();
            if let Some(region) = cfg.get("example2_eps_region") {
                let iv = parse_intervals(region)?;
                if iv.len() != 1 {
                    return Err(Error::Config("example2_eps_region must be one interval".into()));
                }
                data.eps_region = iv[0];
            }
            if let Some(ivs) = cfg.get("example2_rho0_intervals") {
                data.rho0_intervals = parse_intervals(ivs)?;
            }
            if let Some(v) = cfg.get_f64("example2_eps_channel")? {
                data.eps_channel = v;
            }
            if let Some(v) = cfg.get_f64("example2_eps_elsewhere")? {
                data.eps_elsewhere = v;
            }
            if let Some(v) = cfg.get_f64("example2_rho0")? {
                data.rho0_value = v;
            }
            example2(per_unit, k, m, &data)?
        }
        other => return Err(Error::Config(format!("unknown preset {other:?}"))),
    };

    if let Some(dt) = cfg.get_f64("dt")? {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt = {dt} must be positive")));
        }
        run.dt_init = dt;
    }
    if let Some(tol) = cfg.get_f64("tol")? {
        if !(tol > 0.0) {
            return Err(Error::Config(format!("tol = {tol} must be positive")));
        }
        run.tol = tol;
    }
    if let Some(fixed) = cfg.get_bool("fixed_dt")? {
        run.adaptive = !fixed;
    }
    if let Some(tend) = cfg.get_f64("tend")? {
        run.termination = Termination::EndTime(tend);
    }
    if let Some(th) = cfg.get_f64("steady_tol")? {
        run.termination = Termination::SteadyState(th);
    }
    if let Some(sched) = cfg.get("dt_max") {
        run.dt_max = parse_dt_max(sched)?;
    }
    if let Some(tq) = cfg.get_usize("tquad")? {
        run.time_quad_points = Some(tq);
    }
    if let Some(sq) = cfg.get_usize("squad_order")? {
        run.space_quad_order = Some(sq);
    }
    run.validate()?;

    // Echo the effective configuration (defaults made explicit).
    let mut echo = cfg.clone();
    echo.set("preset", name.to_string());
    echo.set("k", run.degree_space.to_string());
    echo.set("m", run.degree_time.to_string());
    if echo.get("h").is_none() {
        let h = match name {
            "example1" => 1.0 / 8.0,
            _ => 1.0 / 16.0,
        };
        echo.set("h", format!("{h}"));
    }
    echo.set("dt", format!("{}", run.dt_init));
    echo.set("tol", format!("{}", run.tol));
    echo.set("fixed_dt", if run.adaptive { "false" } else { "true" });
    match run.termination {
        Termination::EndTime(t) => echo.set("tend", format!("{t}")),
        Termination::SteadyState(th) => echo.set("steady_tol", format!("{th}")),
    }
    echo.set("dt_max", format_dt_max(&run.dt_max));

    Ok((spec, run, echo))
}

/// CSV header + one row per attempted step; values are printed with 17
/// significant digits so they parse back bit-identically.
pub fn emit_diagnostics(
    records: &[DiagnosticsRecord],
    n_species: usize,
    out: &mut dyn Write,
) -> std::io::Result<()> {
    write!(out, "step,time,dt,energy,dissipation_rate,energy_drop_rate,numerical_dissipation")?;
    for i in 1..=n_species {
        write!(out, ",mass_{i}")?;
    }
    writeln!(out, ",min_density,newton_iterations,estimator,accepted,attempts")?;
    for r in records {
        write!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.step,
            r.time,
            r.dt,
            r.energy,
            r.dissipation_rate,
            r.energy_drop_rate,
            r.numerical_dissipation
        )?;
        for i in 0..n_species {
            write!(out, ",{:.16e}", r.mass.get(i).copied().unwrap_or(f64::NAN))?;
        }
        writeln!(
            out,
            ",{:.16e},{},{:.16e},{},{}",
            r.min_density,
            r.newton_iterations,
            r.estimator,
            if r.accepted { 1 } else { 0 },
            r.attempts
        )?;
    }
    Ok(())
}

/// Parse a diagnostics CSV back into records (round-trip of
/// [`emit_diagnostics`]).
pub fn parse_diagnostics(text: &str, n_species: usize) -> Result<Vec<DiagnosticsRecord>> {
    let mut lines = text.lines();
    let _header = lines.next();
    let mut out = Vec::new();
    for (lno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let expect = 12 + n_species;
        if f.len() != expect {
            return Err(Error::Parse {
                line: lno + 2,
                msg: format!("expected {expect} columns, got {}", f.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse { line: lno + 2, msg: format!("bad number {s:?}") })
        };
        let int = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse { line: lno + 2, msg: format!("bad integer {s:?}") })
        };
        let mut mass = Vec::with_capacity(n_species);
        for i in 0..n_species {
            mass.push(num(f[7 + i])?);
        }
        out.push(DiagnosticsRecord {
            step: int(f[0])?,
            time: num(f[1])?,
            dt: num(f[2])?,
            energy: num(f[3])?,
            dissipation_rate: num(f[4])?,
            energy_drop_rate: num(f[5])?,
            numerical_dissipation: num(f[6])?,
            mass,
            min_density: num(f[7 + n_species])?,
            newton_iterations: int(f[8 + n_species])?,
            estimator: num(f[9 + n_species])?,
            accepted: f[10 + n_species] == "1",
            attempts: int(f[11 + n_species])?,
        });
    }
    Ok(out)
}

/// Sample every element at a fixed set of reference points and write
/// x[,y],phi,u_1..u_N rows.
pub fn dump_fields(
    spec: &ProblemSpec,
    trace: &TraceState,
    samples_per_element: usize,
    out: &mut dyn Write,
) -> std::io::Result<()> {
    let n = samples_per_element.max(1);
    let disc = &trace.disc;
    let space = &disc.space;
    let dim = spec.mesh.dim;
    let points: Vec<[f64; 2]> = if dim == 1 {
        if n == 1 {
            vec![[0.5, 0.0]]
        } else {
            (0..n).map(|j| [j as f64 / (n - 1) as f64, 0.0]).collect()
        }
    } else {
        // Equispaced lattice of the smallest degree holding n points.
        let mut d = 1usize;
        while (d + 1) * (d + 2) / 2 < n {
            d += 1;
        }
        let mut lattice = Vec::new();
        for j in 0..=d {
            for i in 0..=(d - j) {
                lattice.push([i as f64 / d as f64, j as f64 / d as f64]);
            }
        }
        lattice.truncate(n);
        lattice
    };
    let table = space.tabulate(&points);
    let n_species = trace.u.len();

    if dim == 1 {
        write!(out, "x")?;
    } else {
        write!(out, "x,y")?;
    }
    write!(out, ",phi")?;
    for i in 1..=n_species {
        write!(out, ",u_{i}")?;
    }
    writeln!(out)?;

    for e in 0..spec.mesh.n_elements() {
        let dofs = &space.elem_dofs[e];
        for (j, p) in points.iter().enumerate() {
            let vals = &table.values[j];
            let x = space.map_to_physical(e, p);
            if dim == 1 {
                write!(out, "{:.16e}", x[0])?;
            } else {
                write!(out, "{:.16e},{:.16e}", x[0], x[1])?;
            }
            let mut phi = 0.0;
            for (a, &d) in dofs.iter().enumerate() {
                phi += trace.phi[d] * vals[a];
            }
            write!(out, ",{phi:.16e}")?;
            for ui in trace.u.iter() {
                let mut u = 0.0;
                for (a, &d) in dofs.iter().enumerate() {
                    u += ui[d] * vals[a];
                }
                write!(out, ",{u:.16e}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// L2 errors and observed rates on a mesh sequence.
#[derive(Debug)]
pub struct ConvergenceTable {
    pub inv_h: Vec<usize>,
    /// errors[mesh][field] for fields u_1, u_2, phi.
    pub errors: Vec<Vec<f64>>,
    /// rates[mesh-1][field] = log2(errors[i-1]/errors[i]).
    pub rates: Vec<Vec<f64>>,
}

impl ConvergenceTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("1/h,err_u1,rate_u1,err_u2,rate_u2,err_phi,rate_phi\n");
        for (i, inv_h) in self.inv_h.iter().enumerate() {
            out.push_str(&format!("{inv_h}"));
            for f in 0..self.errors[i].len() {
                out.push_str(&format!(",{:.6e}", self.errors[i][f]));
                if i == 0 {
                    out.push_str(",--");
                } else {
                    out.push_str(&format!(",{:.3}", self.rates[i - 1][f]));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Run the accuracy preset on a mesh sequence and report L2 errors of
/// (u_1, u_2, phi) at the final time, with successive log2 rates.
pub fn converge(k: usize, m: usize, meshes: &[usize]) -> Result<ConvergenceTable> {
    if meshes.len() < 2 {
        return Err(Error::Config("convergence study needs at least two meshes".into()));
    }
    let mut errors = Vec::new();
    for &inv_h in meshes {
        let (spec, config) = example1(inv_h, k, m)?;
        let traj = crate::timeloop::run_collect(&spec, &config)?;
        let exact = example1_exact(traj.final_state.time);
        let errs = diagnostics::l2_errors(
            &spec,
            &traj.final_state,
            &[
                Box::new(|x: &[f64; 2]| exact[0](x)),
                Box::new(|x: &[f64; 2]| exact[1](x)),
                Box::new(|x: &[f64; 2]| exact[2](x)),
            ],
        );
        errors.push(errs);
    }
    let mut rates = Vec::new();
    for i in 1..errors.len() {
        let row: Vec<f64> = errors[i]
            .iter()
            .zip(&errors[i - 1])
            .map(|(e, e_prev)| (e_prev / e).log2())
            .collect();
        rates.push(row);
    }
    Ok(ConvergenceTable { inv_h: meshes.to_vec(), errors, rates })
}
