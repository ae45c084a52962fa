//! Command-line front end: solve a preset, run a convergence study, or run
//! the built-in consistency checks.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use pnp_stfem::cli::{self, Config};
use pnp_stfem::diagnostics;
use pnp_stfem::error::Error;
use pnp_stfem::timeloop;

const USAGE: &str = "\
usage:
  pnp-stfem solve (--preset NAME | --config FILE) [overrides] [--out DIR]
  pnp-stfem converge --preset example1 [--k INT] [--m INT] [--meshes 8,16,32] [--out DIR]
  pnp-stfem check

presets: example1 (accuracy test, manufactured solution on the unit square),
         example2 (1D ion channel with discontinuous coefficients)

solve overrides:
  --k INT             spatial polynomial degree (default 1)
  --m INT             temporal polynomial degree (default 1)
  --h REAL            target mesh size
  --dt REAL           initial (or fixed) time step
  --tol REAL          adaptive error tolerance
  --fixed-dt          disable adaptive stepping
  --tend REAL         integrate to a fixed end time
  --steady-tol REAL   integrate to steady state at this threshold
  --dt-max SCHED      maximum step size, e.g. `2` or `0:2,250:200`
  --tquad INT         temporal quadrature points
  --squad-order INT   spatial quadrature exactness
  --samples INT       field-dump samples per element (default 4)
  --out DIR           write config.cfg, diagnostics.csv and fields.csv here
";

fn fail_usage(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    eprintln!("{USAGE}");
    ExitCode::from(2)
}

fn error_exit(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    let code = match err {
        Error::Config(_)
        | Error::InvalidInput(_)
        | Error::Parse { .. }
        | Error::Topology { .. }
        | Error::UnsupportedDegree(_)
        | Error::Io { .. } => 2,
        _ => 3,
    };
    ExitCode::from(code)
}

struct Args {
    positional: Vec<String>,
    flags: Vec<(String, Option<String>)>,
}

fn parse_args(raw: &[String]) -> Result<Args, String> {
    let mut positional = Vec::new();
    let mut flags = Vec::new();
    let mut it = raw.iter().peekable();
    while let Some(arg) = it.next() {
        if let Some(name) = arg.strip_prefix("--") {
            let takes_value = !matches!(name, "fixed-dt");
            if takes_value {
                let value = it
                    .next()
                    .ok_or_else(|| format!("flag --{name} needs a value"))?;
                flags.push((name.to_string(), Some(value.clone())));
            } else {
                flags.push((name.to_string(), None));
            }
        } else {
            positional.push(arg.clone());
        }
    }
    Ok(Args { positional, flags })
}

impl Args {
    fn flag(&self, name: &str) -> Option<&str> {
        self.flags
            .iter()
            .rev()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| v.as_deref())
    }

    fn has(&self, name: &str) -> bool {
        self.flags.iter().any(|(n, _)| n == name)
    }
}

fn config_from_args(args: &Args) -> Result<Config, Error> {
    let mut cfg = if let Some(path) = args.flag("config") {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_string(),
            source,
        })?;
        Config::parse(&text)?
    } else {
        Config::new()
    };
    if let Some(preset) = args.flag("preset") {
        cfg.set("preset", preset);
    }
    for (flag, key) in [
        ("k", "k"),
        ("m", "m"),
        ("h", "h"),
        ("dt", "dt"),
        ("tol", "tol"),
        ("tend", "tend"),
        ("steady-tol", "steady_tol"),
        ("dt-max", "dt_max"),
        ("tquad", "tquad"),
        ("squad-order", "squad_order"),
        ("samples", "samples_per_element"),
    ] {
        if let Some(v) = args.flag(flag) {
            cfg.set(key, v);
        }
    }
    if args.has("fixed-dt") {
        cfg.set("fixed_dt", "true");
    }
    if cfg.get("preset").is_none() {
        return Err(Error::Config("need --preset or --config".into()));
    }
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<(), Error> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn cmd_solve(args: &Args) -> Result<(), Error> {
    let cfg = config_from_args(args)?;
    let (spec, run_config, echo) = cli::build_problem(&cfg)?;
    let out_dir: Option<PathBuf> = args.flag("out").map(PathBuf::from);
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.display().to_string(),
            source,
        })?;
        write_file(dir, "config.cfg", echo.to_text().as_bytes())?;
    }

    let t_solve = std::time::Instant::now();
    let trajectory = timeloop::run_collect(&spec, &run_config)?;
    let elapsed = t_solve.elapsed();

    let accepted = trajectory.accepted_steps;
    let rejected = trajectory.total_attempts - accepted;
    let final_record = trajectory
        .records
        .iter()
        .rev()
        .find(|r| r.accepted)
        .expect("a completed run has an accepted step");
    println!("preset            : {}", cfg.get("preset").unwrap_or("?"));
    println!("spatial dofs      : {}", trajectory.final_state.disc.space.ndofs);
    println!("accepted steps    : {accepted}");
    println!("rejected attempts : {rejected}");
    println!("final time        : {:.6}", trajectory.final_state.time);
    println!("initial energy    : {:.6}", trajectory.initial_energy);
    println!("final energy      : {:.6}", final_record.energy);
    let mean_newton = trajectory
        .records
        .iter()
        .filter(|r| r.accepted)
        .map(|r| r.newton_iterations as f64)
        .sum::<f64>()
        / accepted as f64;
    println!("mean Newton iters : {mean_newton:.2}");
    println!("wall time         : {:.2?}", elapsed);

    if cfg.get("preset") == Some("example1") {
        let exact = cli::example1_exact(trajectory.final_state.time);
        let errs = diagnostics::l2_errors(
            &spec,
            &trajectory.final_state,
            &[
                Box::new(|x: &[f64; 2]| exact[0](x)),
                Box::new(|x: &[f64; 2]| exact[1](x)),
                Box::new(|x: &[f64; 2]| exact[2](x)),
            ],
        );
        println!("L2 errors at t={:.3}: u1 {:.4e}  u2 {:.4e}  phi {:.4e}",
            trajectory.final_state.time, errs[0], errs[1], errs[2]);
    }

    if let Some(dir) = &out_dir {
        let mut csv = Vec::new();
        cli::emit_diagnostics(&trajectory.records, spec.n_species, &mut csv)
            .map_err(|source| Error::Io { path: dir.join("diagnostics.csv").display().to_string(), source })?;
        write_file(dir, "diagnostics.csv", &csv)?;

        let samples = cfg.get_usize("samples_per_element")?.unwrap_or(4);
        let mut fields = Vec::new();
        cli::dump_fields(&spec, &trajectory.final_state, samples, &mut fields)
            .map_err(|source| Error::Io { path: dir.join("fields.csv").display().to_string(), source })?;
        write_file(dir, "fields.csv", &fields)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn cmd_converge(args: &Args) -> Result<(), Error> {
    let preset = args.flag("preset").unwrap_or("example1");
    if preset != "example1" {
        return Err(Error::Config(format!(
            "convergence study is defined for example1, not {preset:?}"
        )));
    }
    let k: usize = args
        .flag("k")
        .unwrap_or("1")
        .parse()
        .map_err(|_| Error::Config("bad --k".into()))?;
    let m: usize = args
        .flag("m")
        .unwrap_or(&k.to_string())
        .parse()
        .map_err(|_| Error::Config("bad --m".into()))?;
    let meshes: Vec<usize> = args
        .flag("meshes")
        .unwrap_or("8,16,32")
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad mesh size {s:?}"))))
        .collect::<Result<_, _>>()?;
    let table = cli::converge(k, m, &meshes)?;
    print!("{}", table.render());
    if let Some(dir) = args.flag("out") {
        let dir = PathBuf::from(dir);
        fs::create_dir_all(&dir).map_err(|source| Error::Io {
            path: dir.display().to_string(),
            source,
        })?;
        write_file(&dir, "convergence.csv", table.render().as_bytes())?;
    }
    Ok(())
}

fn cmd_check() -> Result<(), Error> {
    use pnp_stfem::assembly::{initial_state, Discretization, ProblemSpec};
    use pnp_stfem::fespace::{spatial_quadrature, TemporalBasis};
    use pnp_stfem::mesh::build_interval_mesh;
    use std::sync::Arc;

    let mut all_ok = true;
    let mut check = |name: &str, ok: bool| {
        println!("{} {}", if ok { "PASS" } else { "FAIL" }, name);
        all_ok &= ok;
    };

    // Quadrature exactness.
    let mut ok = true;
    for order in 1..=6 {
        for dim in 1..=2 {
            let rule = spatial_quadrature(dim, order);
            let measure = if dim == 1 { 1.0 } else { 0.5 };
            let sum: f64 = rule.weights.iter().sum();
            ok &= (sum - measure).abs() < 1e-13;
        }
    }
    check("quadrature weights sum to the reference measure", ok);

    // Temporal basis traces.
    let mut ok = true;
    for m in 0..=3 {
        let basis = TemporalBasis::radau_right(m);
        ok &= (basis.nodes.last().unwrap() - 1.0).abs() < 1e-15;
        let vals = basis.values(1.0);
        ok &= (vals.last().unwrap() - 1.0).abs() < 1e-12;
    }
    check("temporal basis includes the right endpoint", ok);

    // Mesh round trip.
    let mesh = build_interval_mesh(-1.0, 2.0, 12, &[0.5]).unwrap();
    let ok = pnp_stfem::mesh::load_mesh(&mesh.to_text()).map(|m| m == mesh).unwrap_or(false);
    check("mesh text format round-trips", ok);

    // A short dissipative run with no-flux boundaries: mass conserved,
    // energy monotone.
    let mesh = Arc::new(build_interval_mesh(0.0, 1.0, 10, &[]).unwrap());
    let mut spec = ProblemSpec::new(mesh, 1);
    spec.initial_density =
        vec![Arc::new(|x: &[f64; 2]| 1.0 + 0.5 * (std::f64::consts::PI * x[0]).sin())];
    let config = timeloop::RunConfig::fixed_step(1, 1, 0.05, 0.25);
    let short_run_ok = match timeloop::run_collect(&spec, &config) {
        Ok(traj) => {
            let m0 = traj.records[0].mass[0];
            let mut ok = true;
            let mut prev_energy = traj.initial_energy;
            for rec in traj.records.iter().filter(|r| r.accepted) {
                ok &= (rec.mass[0] - m0).abs() <= 1e-10 * m0;
                ok &= rec.energy <= prev_energy + 1e-8 * (1.0 + prev_energy.abs());
                ok &= rec.min_density > 0.0;
                prev_energy = rec.energy;
            }
            ok
        }
        Err(e) => {
            eprintln!("note: short run failed: {e}");
            false
        }
    };
    check("short run conserves mass and dissipates energy", short_run_ok);

    // Initial potential of a neutral pure-Neumann problem vanishes.
    let mesh = Arc::new(build_interval_mesh(0.0, 1.0, 8, &[]).unwrap());
    let spec = ProblemSpec::new(mesh, 1);
    let disc = Discretization::new(spec.mesh.clone(), 1, 1).unwrap();
    let ok = match initial_state(&spec, disc, 0.0) {
        Ok(state) => state.phi.iter().all(|&v| v.abs() < 1e-10),
        Err(_) => false,
    };
    check("neutral Neumann problem has zero initial potential", ok);

    if all_ok {
        Ok(())
    } else {
        Err(Error::StepFailure("built-in checks failed".into()))
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().skip(1).collect();
    let args = match parse_args(&raw) {
        Ok(a) => a,
        Err(msg) => return fail_usage(&msg),
    };
    let Some(command) = args.positional.first().map(|s| s.as_str()) else {
        return fail_usage("missing command");
    };
    let result = match command {
        "solve" => cmd_solve(&args),
        "converge" => cmd_converge(&args),
        "check" => cmd_check(),
        other => return fail_usage(&format!("unknown command {other:?}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => error_exit(&e),
    }
}
