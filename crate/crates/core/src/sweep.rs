//! One-parameter sweeps producing long-form result tables.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;

use crate::env::{self, KernelMode};
use crate::error::{Error, Result};
use crate::meanfield::{integrate_with, IntegrateOptions};
use crate::model::{rho_of, ClassMixture, NetworkSpec};
use crate::scalar::{fmt_sig12, round_sig12};
use crate::sim::{simulate, SimConfig};
use crate::stationary::{solve_fixed_point, throughput, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Share of class 2 with the first and third class splitting the rest evenly.
    Mu2,
    /// Mean success and collision duration, set together.
    L,
    P0,
    /// Number of simulated users.
    N,
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mu2" => Ok(SweepParam::Mu2),
            "L" => Ok(SweepParam::L),
            "p0" => Ok(SweepParam::P0),
            "N" => Ok(SweepParam::N),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep parameter \"{other}\" (expected mu2, L, p0 or N)"
            ))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Mu2 => "mu2",
            SweepParam::L => "L",
            SweepParam::P0 => "p0",
            SweepParam::N => "N",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    FixedPoint,
    Ode,
    Simulate,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixedpoint" => Ok(Method::FixedPoint),
            "ode" => Ok(Method::Ode),
            "simulate" => Ok(Method::Simulate),
            other => Err(Error::InvalidArgument(format!(
                "unknown method \"{other}\" (expected fixedpoint, ode or simulate)"
            ))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::FixedPoint => "fixedpoint",
            Method::Ode => "ode",
            Method::Simulate => "simulate",
        })
    }
}

pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let mut methods = s
        .split(',')
        .map(|m| m.trim().parse())
        .collect::<Result<Vec<Method>>>()?;
    methods.sort();
    methods.dedup();
    Ok(methods)
}

/// Parses `start:stop:count` (evenly spaced, inclusive) or a comma list.
/// The result is sorted and free of duplicates.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::InvalidArgument(format!("grid \"{s}\": {why}"));
    let s = s.trim();
    if s.is_empty() {
        return Err(bad("empty"));
    }
    let mut grid: Vec<f64> = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected start:stop:count"));
        }
        let a: f64 = parts[0].trim().parse().map_err(|_| bad("bad start"))?;
        let b: f64 = parts[1].trim().parse().map_err(|_| bad("bad stop"))?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad("bad count"))?;
        match n {
            0 => return Err(bad("count must be positive")),
            1 => vec![a],
            _ => (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect(),
        }
    } else {
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<_>>()?
    };
    if grid.is_empty() {
        return Err(bad("empty"));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(bad("values must be finite"));
    }
    grid.iter_mut().for_each(|v| *v = round_sig12(*v));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub spec: NetworkSpec<f64>,
    pub param: SweepParam,
    pub grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub solver: SolverOptions<f64>,
    pub ode_horizon: f64,
    pub ode_dt: f64,
    /// Template for simulated points; `n_users` is replaced in N sweeps.
    pub sim: SimConfig,
}

impl SweepPlan {
    pub fn new(spec: NetworkSpec<f64>, param: SweepParam, grid: Vec<f64>, methods: Vec<Method>) -> Result<Self> {
        let plan = SweepPlan {
            spec,
            param,
            grid,
            methods,
            solver: SolverOptions {
                probes: 0,
                ..SolverOptions::default()
            },
            ode_horizon: 2000.0,
            ode_dt: 1.0,
            sim: SimConfig::new(200, 500.0, 7),
        };
        plan.check()?;
        Ok(plan)
    }

    pub fn check(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidArgument("sweep grid is empty".into()));
        }
        if self.grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument("sweep grid must be strictly increasing".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("no methods selected".into()));
        }
        if self.param == SweepParam::Mu2 && self.spec.n_classes() != 3 {
            return Err(Error::InvalidArgument("mu2 sweeps need exactly three classes".into()));
        }
        if self.param == SweepParam::N && self.grid.iter().any(|&v| v < 1.0 || v.fract() != 0.0) {
            return Err(Error::InvalidArgument("N grid values must be positive integers".into()));
        }
        Ok(())
    }

    /// Spec and simulation settings at one grid value.
    pub fn point(&self, value: f64) -> Result<(NetworkSpec<f64>, SimConfig)> {
        let mut sim = self.sim.clone();
        let spec = match self.param {
            SweepParam::Mu2 => {
                let side = (1.0 - value) / 2.0;
                self.spec.with_mu(vec![side, value, side])?
            }
            SweepParam::L => self.spec.with_durations(value, value)?,
            SweepParam::P0 => self.spec.with_p0(value)?,
            SweepParam::N => {
                sim.n_users = value as usize;
                self.spec.clone()
            }
        };
        Ok((spec, sim))
    }
}

/// One long-form result row. Numbers are stored rounded to 12 significant digits.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param_value: f64,
    pub method: Method,
    pub class: String,
    pub gamma: Option<f64>,
    pub gamma_per_user: Option<f64>,
    pub rho: Option<f64>,
    pub status: String,
}

fn method_rows(
    spec: &NetworkSpec<f64>,
    sim: &SimConfig,
    plan: &SweepPlan,
    value: f64,
    method: Method,
) -> Result<Vec<SweepRow>> {
    let (gamma, per_user, rho): (Vec<f64>, Vec<f64>, Vec<f64>) = match method {
        Method::FixedPoint => {
            let fp = solve_fixed_point(spec, &plan.solver)?;
            (fp.throughput.gamma, fp.throughput.per_user, fp.rho.0)
        }
        Method::Ode => {
            let opts = IntegrateOptions::new(plan.ode_horizon, plan.ode_dt).stride(usize::MAX);
            let traj = integrate_with(&ClassMixture::at_level_zero(spec), spec, &opts)?;
            let rho = rho_of(traj.last(), spec)?;
            let (pi, _) = env::averages(&rho, spec, KernelMode::Consistent)?;
            let t = throughput(&pi, &rho, spec)?;
            (t.gamma, t.per_user, rho.0)
        }
        Method::Simulate => {
            let r = simulate(spec, sim)?;
            (r.ghat.clone(), r.ghat_per_user(), r.rho_hat.clone())
        }
    };
    Ok((0..spec.n_classes())
        .map(|c| SweepRow {
            param_value: value,
            method,
            class: spec.classes[c].clone(),
            gamma: Some(round_sig12(gamma[c])),
            gamma_per_user: Some(round_sig12(per_user[c])),
            rho: Some(round_sig12(rho[c])),
            status: "ok".into(),
        })
        .collect())
}

/// Runs every (grid value, method) pair in parallel. Failures become rows
/// with empty values and the error in `status`.
pub fn run_sweep(plan: &SweepPlan) -> Result<Vec<SweepRow>> {
    plan.check()?;
    let jobs: Vec<(f64, Method)> = plan
        .grid
        .iter()
        .flat_map(|&v| plan.methods.iter().map(move |&m| (v, m)))
        .collect();
    let mut rows: Vec<SweepRow> = jobs
        .par_iter()
        .flat_map_iter(|&(value, method)| {
            let result = plan
                .point(value)
                .and_then(|(spec, sim)| method_rows(&spec, &sim, plan, value, method));
            match result {
                Ok(rows) => rows,
                Err(e) => plan
                    .spec
                    .classes
                    .iter()
                    .map(|class| SweepRow {
                        param_value: value,
                        method,
                        class: class.clone(),
                        gamma: None,
                        gamma_per_user: None,
                        rho: None,
                        status: e.to_string(),
                    })
                    .collect(),
            }
        })
        .collect();
    let class_index = |name: &str| plan.spec.classes.iter().position(|c| c == name);
    rows.sort_by(|a, b| {
        a.param_value
            .total_cmp(&b.param_value)
            .then(a.method.cmp(&b.method))
            .then(class_index(&a.class).cmp(&class_index(&b.class)))
    });
    Ok(rows)
}

pub const SWEEP_HEADER: [&str; 7] = [
    "param_value",
    "method",
    "class",
    "gamma",
    "gamma_per_user",
    "rho",
    "status",
];

pub fn write_rows_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SWEEP_HEADER)?;
    let opt = |v: Option<f64>| v.map(fmt_sig12).unwrap_or_default();
    for r in rows {
        out.write_record([
            fmt_sig12(r.param_value),
            r.method.to_string(),
            r.class.clone(),
            opt(r.gamma),
            opt(r.gamma_per_user),
            opt(r.rho),
            r.status.clone(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rows_csv<R: Read>(r: R) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.iter().ne(SWEEP_HEADER.iter().copied()) {
        return Err(Error::Parse(format!("unexpected sweep header {:?}", header)));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Parse(format!("bad number \"{s}\""))) };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(SweepRow {
            param_value: num(&rec[0])?,
            method: rec[1].parse()?,
            class: rec[2].to_string(),
            gamma: opt(&rec[3])?,
            gamma_per_user: opt(&rec[4])?,
            rho: opt(&rec[5])?,
            status: rec[6].to_string(),
        });
    }
    Ok(rows)
}

/// Sum of `gamma` over classes for each grid value of one method.
pub fn total_gamma(rows: &[SweepRow], method: Method) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for r in rows.iter().filter(|r| r.method == method) {
        let g = r.gamma.unwrap_or(f64::NAN);
        match out.last_mut() {
            Some((v, s)) if *v == r.param_value => *s += g,
            _ => out.push((r.param_value, g)),
        }
    }
    out
}

/// Gnuplot script plotting `gamma` per class against the swept parameter.
pub fn gnuplot_script(csv_path: &str, param: SweepParam, classes: &[String], methods: &[Method]) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set key outside right\n");
    s.push_str(&format!("set xlabel '{param}'\n"));
    s.push_str("set ylabel 'throughput (time share)'\n");
    let mut curves = Vec::new();
    for m in methods {
        for c in classes {
            curves.push(format!(
                "'{csv_path}' skip 1 using (strcol(2) eq '{m}' && strcol(3) eq '{c}' ? $1 : 1/0):4 with linespoints title '{m} {c}'"
            ));
        }
    }
    s.push_str(&format!("plot {}\n", curves.join(", \\\n     ")));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> NetworkSpec<f64> {
        NetworkSpec::chain3([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1.0 / 16.0, 100.0, 100.0, 32).unwrap()
    }

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("0.1:0.5:5").unwrap(), vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!(parse_grid("100, 10,50,10").unwrap(), vec![10.0, 50.0, 100.0]);
        assert_eq!(parse_grid("0.05:0.95:19").unwrap().len(), 19);
        for bad in ["", " ", "1:2", "a,b", "1:2:0", ","] {
            assert!(parse_grid(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn methods_parse_and_order() {
        assert_eq!(
            parse_methods("simulate,fixedpoint,ode,ode").unwrap(),
            vec![Method::FixedPoint, Method::Ode, Method::Simulate]
        );
        assert!(parse_methods("guess").is_err());
        assert!("mu3".parse::<SweepParam>().is_err());
    }

    #[test]
    fn mu2_points_keep_unit_mass() {
        let plan = SweepPlan::new(chain(), SweepParam::Mu2, vec![0.1, 0.9], vec![Method::FixedPoint]).unwrap();
        let (spec, _) = plan.point(0.9).unwrap();
        assert_eq!(spec.mu[0], spec.mu[2]);
        assert!((spec.mu.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let single = NetworkSpec::single_class(0.0625, 10.0, 10.0, 8).unwrap();
        assert!(SweepPlan::new(single, SweepParam::Mu2, vec![0.5], vec![Method::FixedPoint]).is_err());
        assert!(SweepPlan::new(chain(), SweepParam::L, vec![], vec![Method::FixedPoint]).is_err());
    }

    #[test]
    fn rows_sorted_and_round_trip() {
        let mut plan = SweepPlan::new(
            chain(),
            SweepParam::L,
            vec![10.0, 50.0],
            vec![Method::Simulate, Method::FixedPoint],
        )
        .unwrap();
        plan.sim = SimConfig::new(30, 20.0, 1);
        let rows = run_sweep(&plan).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 3);
        assert_eq!(rows[0].method, Method::FixedPoint);
        assert_eq!(rows[0].class, "1");
        assert_eq!(rows[3].method, Method::Simulate);
        let mut buf = Vec::new();
        write_rows_csv(&rows, &mut buf).unwrap();
        let back = read_rows_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn failures_become_status_rows() {
        let plan = SweepPlan::new(chain(), SweepParam::P0, vec![0.05, 1.5], vec![Method::FixedPoint]).unwrap();
        let rows = run_sweep(&plan).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[..3].iter().all(|r| r.status == "ok"));
        assert!(rows[3..].iter().all(|r| r.gamma.is_none() && r.status.contains("p0")));
        let mut buf = Vec::new();
        write_rows_csv(&rows, &mut buf).unwrap();
        assert_eq!(read_rows_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn gnuplot_mentions_every_curve() {
        let s = gnuplot_script(
            "out.csv",
            SweepParam::Mu2,
            &["1".into(), "2".into()],
            &[Method::FixedPoint],
        );
        assert_eq!(s.matches("with linespoints").count(), 2);
        assert!(s.contains("set xlabel 'mu2'"));
    }
}
