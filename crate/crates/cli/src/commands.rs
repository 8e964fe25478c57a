use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};

use csma_mf::env::{self, KernelMode};
use csma_mf::meanfield::IntegrateOptions;
use csma_mf::sim::{ClassAssignment, SimConfig};
use csma_mf::stationary::SolverOptions;
use csma_mf::sweep::{self, SweepPlan};
use csma_mf::{
    chaos_metric, closed_form_full_interference, domination_check, fmt_sig12, integrate_with, load_spec_file, rho_of,
    round_sig12, simulate, solve_fixed_point, throughput, validate_spec, Error, Mixture, Spec,
};

use crate::output::{write_json, write_table, Diag};
use crate::{Cli, Command, Format, OdeArgs, SimulateArgs, SolverArgs, StationaryArgs, SweepArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_NONCONVERGENCE: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_BLOWUP: u8 = 4;

/// Exit status for an error chain, by the first library error found in it.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonConvergence { .. } => EXIT_NONCONVERGENCE,
                Error::Infeasible(_) => EXIT_INFEASIBLE,
                Error::Integration { .. } | Error::Singular(_) => EXIT_BLOWUP,
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_CONFIG
}

pub fn run(cli: &Cli) -> Result<u8> {
    let diag = Diag { quiet: cli.quiet };
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| anyhow!("--config PATH is required"))?;
    let spec = load_spec_file(path).with_context(|| format!("loading {}", path.display()))?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Stationary(a) => stationary(&spec, a, cli.format.unwrap_or(Format::Json), out, &diag),
        Command::Ode(a) => ode(&spec, a, cli.format.unwrap_or(Format::Csv), out, &diag),
        Command::Simulate(a) => sim(&spec, a, cli.format.unwrap_or(Format::Json), out, &diag),
        Command::Sweep(a) => sweep_cmd(&spec, a, cli.format.unwrap_or(Format::Csv), out, &diag),
        Command::Check => check(&spec, cli.format.unwrap_or(Format::Json), out, &diag),
    }
}

fn solver_options(a: &SolverArgs, probes: usize) -> Result<SolverOptions<f64>> {
    let mode: KernelMode = a.kernel.parse()?;
    Ok(SolverOptions {
        tol: a.tol,
        max_iter: a.max_iter,
        damping: a.damping,
        mode,
        probes,
        ..SolverOptions::default()
    })
}

fn r12(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|&x| round_sig12(x)).collect()
}

fn stationary(spec: &Spec, a: &StationaryArgs, format: Format, out: Option<&Path>, diag: &Diag) -> Result<u8> {
    if a.closed_form {
        if !spec.is_full_interference() || !spec.policy.is_exponential() {
            bail!(Error::InvalidArgument(
                "the closed form needs full interference and exponential backoff".into()
            ));
        }
        let cf = closed_form_full_interference(spec.p0, spec.n_max)?;
        match format {
            Format::Json => write_json(
                out,
                &json!({
                    "rho": round_sig12(cf.rho),
                    "Q": r12(&cf.q),
                    "residual": round_sig12(cf.residual),
                }),
            )?,
            Format::Csv => {
                let mut rows = vec![vec!["rho".into(), String::new(), fmt_sig12(cf.rho)]];
                rows.extend(
                    cf.q.iter()
                        .enumerate()
                        .map(|(n, q)| vec!["Q".into(), n.to_string(), fmt_sig12(*q)]),
                );
                write_table(out, &["key", "level", "value"], &rows)?;
            }
        }
        return Ok(EXIT_OK);
    }

    let opts = solver_options(&a.solver, a.probes)?;
    let fp = solve_fixed_point(spec, &opts)?;
    diag.say(format!(
        "converged in {} iterations, residual {:e}",
        fp.iterations, fp.residual
    ));
    if let Some(false) = fp.unique(opts.tol) {
        diag.say(format!(
            "warning: random starts reached solutions up to {:e} apart",
            fp.probe_spread.unwrap_or(f64::NAN)
        ));
    }
    if let Some(gap) = fp.identity_gap.filter(|&g| g > 1e-9) {
        diag.say(format!(
            "note: truncation moves rho by {gap:e} from the untruncated identity"
        ));
    }
    if a.dump_kernel.is_some() || a.dump_pi.is_some() {
        let kernel = env::build_kernel(&fp.rho, spec, opts.mode)?;
        if let Some(p) = &a.dump_kernel {
            kernel.write_csv(fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?)?;
        }
        if let Some(p) = &a.dump_pi {
            fp.pi
                .write_csv(fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?)?;
        }
    }
    match format {
        Format::Json => {
            let mut doc = fp.to_json();
            let obj = doc.as_object_mut().expect("fixed-point report is an object");
            obj.insert("classes".into(), json!(spec.classes));
            obj.insert("converged".into(), json!(true));
            if spec.n_classes() >= 2 {
                obj.insert("ratio".into(), json!(round_sig12(fp.per_user_ratio(0, 1))));
            }
            write_json(out, &doc)?;
        }
        Format::Csv => {
            let mut rows = Vec::new();
            for (c, name) in spec.classes.iter().enumerate() {
                let scalars = [
                    ("rho", fp.rho[c]),
                    ("G", fp.ghi.g[c]),
                    ("H", fp.ghi.h[c]),
                    ("I", fp.ghi.i[c]),
                    ("gamma", fp.throughput.gamma[c]),
                    ("gamma_per_user", fp.throughput.per_user[c]),
                    ("gamma_per_slot", fp.throughput.per_slot[c]),
                ];
                for (k, v) in scalars {
                    rows.push(vec![name.clone(), k.into(), String::new(), fmt_sig12(v)]);
                }
                for (n, &q) in fp.q.class(c).iter().enumerate() {
                    rows.push(vec![name.clone(), "Q".into(), n.to_string(), fmt_sig12(q)]);
                }
            }
            write_table(out, &["class", "key", "level", "value"], &rows)?;
        }
    }
    Ok(EXIT_OK)
}

fn read_mixture(path: &Path, spec: &Spec) -> Result<Mixture> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mix = Mixture::new(rows);
    let problems = mix.check(spec, 1e-9)?;
    if !problems.is_empty() {
        bail!(Error::InvalidArgument(format!(
            "initial mixture: {}",
            problems.join("; ")
        )));
    }
    Ok(mix)
}

fn ode(spec: &Spec, a: &OdeArgs, format: Format, out: Option<&Path>, diag: &Diag) -> Result<u8> {
    let fixed = solve_fixed_point(
        spec,
        &SolverOptions {
            probes: 0,
            ..SolverOptions::default()
        },
    );
    let q0 = match a.init.as_str() {
        "level0" => Mixture::at_level_zero(spec),
        "fixedpoint" => match &fixed {
            Ok(fp) => fp.q.clone(),
            Err(e) => bail!(Error::InvalidArgument(format!("no fixed point to start from: {e}"))),
        },
        path => read_mixture(Path::new(path), spec)?,
    };
    let opts = IntegrateOptions::new(a.horizon, a.dt).stride(a.stride);
    let traj = integrate_with(&q0, spec, &opts)?;
    let rho = rho_of(traj.last(), spec)?;
    let (pi, _) = env::averages(&rho, spec, KernelMode::Consistent)?;
    let gamma = throughput(&pi, &rho, spec)?;
    let tv = fixed.as_ref().ok().map(|fp| traj.last().total_variation(&fp.q));
    let converged = traj.final_rhs_norm < 1e-9;
    diag.say(format!(
        "t = {}: max drift {:e}, |dQ/dt| {:e}, converged {}",
        fmt_sig12(traj.final_time()),
        traj.max_drift,
        traj.final_rhs_norm,
        converged
    ));
    if let Some(tv) = tv {
        diag.say(format!("total variation to the fixed point: {}", fmt_sig12(tv)));
    }
    if let Some(p) = &a.summary {
        traj.write_summary_csv(
            spec,
            fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )?;
    }
    match format {
        Format::Csv => {
            let mut w = crate::output::sink(out)?;
            traj.write_csv(spec, &mut w)?;
            w.flush()?;
        }
        Format::Json => write_json(
            out,
            &json!({
                "classes": spec.classes,
                "T": round_sig12(traj.final_time()),
                "dt": round_sig12(traj.dt),
                "method": traj.method,
                "Q": traj.last().rows().iter().map(|r| r12(r)).collect::<Vec<_>>(),
                "rho": r12(&rho),
                "gamma": r12(&gamma.gamma),
                "max_drift": round_sig12(traj.max_drift),
                "clamped": traj.clamped,
                "final_rhs_norm": round_sig12(traj.final_rhs_norm),
                "converged": converged,
                "tv_to_fixed_point": tv.map(round_sig12),
            }),
        )?,
    }
    Ok(EXIT_OK)
}

fn sim(spec: &Spec, a: &SimulateArgs, format: Format, out: Option<&Path>, diag: &Diag) -> Result<u8> {
    let cfg = SimConfig {
        burn_in: a.burnin,
        assignment: if a.iid {
            ClassAssignment::Iid
        } else {
            ClassAssignment::Deterministic
        },
        trace_stride: a.trace.as_ref().map(|_| a.trace_stride),
        tagged: (a.n_users >= 2).then_some((0, 1)),
        ..SimConfig::new(a.n_users, a.horizon, a.seed)
    };
    let report = simulate(spec, &cfg)?;
    for w in &report.warnings {
        diag.say(format!("warning: {w}"));
    }
    if let Some(p) = &a.trace {
        report.write_trace_csv(
            &spec.classes,
            fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )?;
    }
    let gamma_fp = if a.compare {
        let fp = solve_fixed_point(
            spec,
            &SolverOptions {
                probes: 0,
                ..SolverOptions::default()
            },
        )?;
        Some(fp.throughput.gamma)
    } else {
        None
    };
    match format {
        Format::Json => {
            let mut doc = report.to_json();
            let obj = doc.as_object_mut().expect("simulation report is an object");
            obj.insert("classes".into(), json!(spec.classes));
            if let Some(g) = &gamma_fp {
                let delta: Vec<f64> = report.ghat.iter().zip(g).map(|(s, f)| s - f).collect();
                let rel: Vec<f64> = delta
                    .iter()
                    .zip(g)
                    .map(|(d, f)| if *f != 0.0 { d / f } else { 0.0 })
                    .collect();
                obj.insert(
                    "compare".into(),
                    json!({"gamma_fixed_point": r12(g), "delta": r12(&delta), "relative": r12(&rel)}),
                );
            }
            write_json(out, &doc)?;
        }
        Format::Csv => {
            let per_user = report.ghat_per_user();
            let mut header = vec!["seed", "class", "ghat", "ghat_per_user", "collision_share", "rho_hat"];
            if gamma_fp.is_some() {
                header.extend(["gamma_fixed_point", "delta"]);
            }
            let rows: Vec<Vec<String>> = (0..spec.n_classes())
                .map(|c| {
                    let mut row = vec![
                        report.seed.to_string(),
                        spec.classes[c].clone(),
                        fmt_sig12(report.ghat[c]),
                        fmt_sig12(per_user[c]),
                        fmt_sig12(report.collision_share[c]),
                        fmt_sig12(report.rho_hat[c]),
                    ];
                    if let Some(g) = &gamma_fp {
                        row.push(fmt_sig12(g[c]));
                        row.push(fmt_sig12(report.ghat[c] - g[c]));
                    }
                    row
                })
                .collect();
            write_table(out, &header, &rows)?;
        }
    }
    if let Some(t) = &report.tagged {
        diag.say(format!("tagged-pair dependence score {}", fmt_sig12(chaos_metric(t))));
    }
    Ok(EXIT_OK)
}

fn sweep_cmd(spec: &Spec, a: &SweepArgs, format: Format, out: Option<&Path>, diag: &Diag) -> Result<u8> {
    let param: sweep::SweepParam = a.param.parse()?;
    let grid = sweep::parse_grid(&a.grid)?;
    let methods = sweep::parse_methods(&a.methods)?;
    let mut plan = SweepPlan::new(spec.clone(), param, grid, methods)?;
    plan.solver = solver_options(&a.solver, 0)?;
    plan.ode_horizon = a.horizon;
    plan.ode_dt = a.dt;
    plan.sim = SimConfig {
        burn_in: a.burnin,
        ..SimConfig::new(a.n_users, a.sim_horizon, a.seed)
    };
    let rows = sweep::run_sweep(&plan)?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        diag.say(format!("{failed} rows record failures, see the status column"));
    }
    match format {
        Format::Csv => {
            let mut w = crate::output::sink(out)?;
            sweep::write_rows_csv(&rows, &mut w)?;
            w.flush()?;
        }
        Format::Json => {
            let arr: Vec<Value> = rows
                .iter()
                .map(|r| {
                    json!({
                        "param_value": r.param_value,
                        "method": r.method.to_string(),
                        "class": r.class,
                        "gamma": r.gamma,
                        "gamma_per_user": r.gamma_per_user,
                        "rho": r.rho,
                        "status": r.status,
                    })
                })
                .collect();
            write_json(out, &Value::Array(arr))?;
        }
    }
    if let Some(p) = &a.gnuplot {
        let data = out
            .map(|o| o.display().to_string())
            .unwrap_or_else(|| "sweep.csv".into());
        fs::write(p, sweep::gnuplot_script(&data, param, &spec.classes, &plan.methods))
            .with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(EXIT_OK)
}

fn check(spec: &Spec, format: Format, out: Option<&Path>, diag: &Diag) -> Result<u8> {
    let violations = validate_spec(spec);
    let report = domination_check(spec)?;
    let violation = report.violation.as_ref().map(|v| {
        json!({
            "rho": r12(&v.rho),
            "z": v.z,
            "z1": v.z1,
            "lhs": round_sig12(v.lhs),
            "rhs": round_sig12(v.rhs),
        })
    });
    match format {
        Format::Json => write_json(
            out,
            &json!({
                "valid": violations.is_empty(),
                "violations": violations,
                "domination": {
                    "passed": report.passed,
                    "dominating_recurrent": report.dominating_recurrent,
                    "closed_classes": report.closed_classes,
                    "kernels_checked": report.kernels_checked,
                    "violation": violation,
                },
            }),
        )?,
        Format::Csv => write_table(
            out,
            &["check", "passed", "detail"],
            &[
                vec!["spec".into(), violations.is_empty().to_string(), violations.join("; ")],
                vec![
                    "domination".into(),
                    report.passed.to_string(),
                    format!(
                        "{} kernels, {} closed classes",
                        report.kernels_checked, report.closed_classes
                    ),
                ],
            ],
        )?,
    }
    if !report.passed {
        diag.say("domination check failed");
        return Ok(EXIT_INFEASIBLE);
    }
    diag.say(format!("domination holds on {} kernels", report.kernels_checked));
    Ok(EXIT_OK)
}
