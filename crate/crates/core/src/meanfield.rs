//! Transient mean-field dynamics of the per-class backoff-level distribution.
//!
//! A user of class `c` at level `n` leaves its level at rate `p_n I_c`; a
//! fraction `G_c / I_c` of those departures are successes (level `S(n)`), the
//! rest collisions (level `C(n)`). `G`, `H`, `I` are averaged over the
//! environment's stationary law at the current attempt intensities.

use std::collections::HashMap;
use std::io::Write;

use crate::env::{self, Ghi, KernelMode};
use crate::error::{Error, Result};
use crate::model::{rho_of, ClassMixture, NetworkSpec, RhoVector};
use crate::scalar::{fmt_sig12, Real};

/// Negative entries down to this are rounding noise and get clamped.
pub const CLAMP_TOL: f64 = 1e-12;
/// Attempt intensities are quantized to this when memoizing averaged rates.
const MEMO_QUANTUM: f64 = 1e-12;
const MEMO_CAPACITY: usize = 256;

/// Averaged per-level success and collision rates.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanRates<T> {
    /// `success[c][n] = p_n G_c`.
    pub success: Vec<Vec<T>>,
    /// `collision[c][n] = p_n H_c`.
    pub collision: Vec<Vec<T>>,
    pub rho: RhoVector<T>,
    pub ghi: Ghi<T>,
}

fn rates_from_ghi<T: Real>(spec: &NetworkSpec<T>, rho: RhoVector<T>, ghi: Ghi<T>) -> MeanRates<T> {
    let probs = spec.policy.probabilities();
    let success = ghi.g.iter().map(|&g| probs.iter().map(|&p| p * g).collect()).collect();
    let collision = ghi.h.iter().map(|&h| probs.iter().map(|&p| p * h).collect()).collect();
    MeanRates {
        success,
        collision,
        rho,
        ghi,
    }
}

pub fn mean_rates<T: Real>(mix: &ClassMixture<T>, spec: &NetworkSpec<T>) -> Result<MeanRates<T>> {
    let rho = rho_of(mix, spec)?;
    let (_, ghi) = env::averages(&rho, spec, KernelMode::Consistent)?;
    Ok(rates_from_ghi(spec, rho, ghi))
}

fn rhs_from_ghi<T: Real>(mix: &ClassMixture<T>, spec: &NetworkSpec<T>, ghi: &Ghi<T>) -> ClassMixture<T> {
    let policy = &spec.policy;
    let mut d = ClassMixture::zeros(mix.n_classes(), mix.n_levels());
    for c in 0..mix.n_classes() {
        let row = d.class_mut(c);
        for (n, &q) in mix.class(c).iter().enumerate() {
            let flow = q * policy.probability(n);
            let to_success = flow * ghi.g[c];
            let to_collision = flow * ghi.h[c];
            row[n] = row[n] - (to_success + to_collision);
            let s = policy.success(n);
            row[s] = row[s] + to_success;
            let k = policy.collision(n);
            row[k] = row[k] + to_collision;
        }
    }
    d
}

/// Time derivative of the level distribution.
pub fn ode_rhs<T: Real>(mix: &ClassMixture<T>, spec: &NetworkSpec<T>) -> Result<ClassMixture<T>> {
    let rates = mean_rates(mix, spec)?;
    Ok(rhs_from_ghi(mix, spec, &rates.ghi))
}

/// Single-class full-interference dynamics with exponential backoff
/// `p_n = p0 2^-n`, levels `0..q.len()`, the last level saturating.
pub fn full_interference_rhs<T: Real>(q: &[T], p0: T) -> Result<Vec<T>> {
    if q.is_empty() {
        return Err(Error::Dimension("empty level distribution".into()));
    }
    if !(p0 > T::zero() && p0 <= T::one()) {
        return Err(Error::InvalidArgument(format!("p0 must lie in (0,1], got {p0}")));
    }
    let half = T::lit(0.5);
    let mut probs = Vec::with_capacity(q.len());
    let mut p = p0;
    for _ in 0..q.len() {
        probs.push(p);
        p = p * half;
    }
    let rho: T = q.iter().zip(&probs).map(|(&x, &p)| x * p).sum();
    let stay = (-rho).exp();
    let busy = -(-rho).exp_m1();
    let last = q.len() - 1;
    let mut d = vec![T::zero(); q.len()];
    d[0] = rho * stay - p0 * q[0];
    for n in 1..q.len() {
        d[n] = probs[n - 1] * q[n - 1] * busy - probs[n] * q[n];
    }
    d[last] = d[last] + probs[last] * q[last] * busy;
    Ok(d)
}

/// [`full_interference_rhs`] applied to a mixture, rejecting anything but a
/// single-class exponential spec.
pub fn full_interference_rhs_for<T: Real>(mix: &ClassMixture<T>, spec: &NetworkSpec<T>) -> Result<Vec<T>> {
    if spec.n_classes() != 1 || !spec.policy.is_exponential() {
        return Err(Error::InvalidArgument(
            "full-interference dynamics need a single class with exponential backoff".into(),
        ));
    }
    if mix.n_classes() != 1 || mix.n_levels() != spec.n_levels() {
        return Err(Error::Dimension("mixture does not match the network".into()));
    }
    full_interference_rhs(mix.class(0), spec.p0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrateOptions<T> {
    pub t_end: T,
    pub dt: T,
    /// Keep every `stride`-th step in the trajectory; the last step is always kept.
    pub stride: usize,
    pub mode: KernelMode,
}

impl<T: Real> IntegrateOptions<T> {
    pub fn new(t_end: T, dt: T) -> Self {
        IntegrateOptions {
            t_end,
            dt,
            stride: 1,
            mode: KernelMode::Consistent,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }
}

/// Sampled solution of the mean-field ODE.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<ClassMixture<T>>,
    pub rho: Vec<RhoVector<T>>,
    pub dt: T,
    pub method: &'static str,
    /// Largest `|sum_n Q_c^n - mu_c|` seen after any step.
    pub max_drift: T,
    /// Entries in `[-1e-12, 0)` that were clamped to zero.
    pub clamped: usize,
    /// Sup-norm of the derivative at the final state.
    pub final_rhs_norm: T,
}

impl<T: Real> Trajectory<T> {
    pub fn last(&self) -> &ClassMixture<T> {
        self.states.last().expect("trajectory has at least its initial state")
    }

    pub fn final_time(&self) -> T {
        *self.times.last().expect("trajectory has at least its initial state")
    }

    /// Writes `t,class,level,mass` rows.
    pub fn write_csv<W: Write>(&self, spec: &NetworkSpec<T>, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "class", "level", "mass"])?;
        for (t, q) in self.times.iter().zip(&self.states) {
            for c in 0..q.n_classes() {
                for (n, &m) in q.class(c).iter().enumerate() {
                    out.write_record([
                        fmt_sig12(t.as_f64()),
                        spec.classes[c].clone(),
                        n.to_string(),
                        fmt_sig12(m.as_f64()),
                    ])?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `t,class,rho` rows.
    pub fn write_summary_csv<W: Write>(&self, spec: &NetworkSpec<T>, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "class", "rho"])?;
        for (t, rho) in self.times.iter().zip(&self.rho) {
            for (c, r) in rho.iter().enumerate() {
                out.write_record([fmt_sig12(t.as_f64()), spec.classes[c].clone(), fmt_sig12(r.as_f64())])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Right-hand side with averaged rates memoized on quantized `rho`.
struct Rhs<'a, T> {
    spec: &'a NetworkSpec<T>,
    mode: KernelMode,
    memo: HashMap<Vec<i64>, Ghi<T>>,
}

impl<'a, T: Real> Rhs<'a, T> {
    fn eval(&mut self, mix: &ClassMixture<T>, t: T) -> Result<(ClassMixture<T>, RhoVector<T>)> {
        let rho = rho_of(mix, self.spec)?;
        if rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::Integration {
                t: t.as_f64(),
                reason: "attempt intensity is not finite".into(),
            });
        }
        let key: Vec<i64> = rho.iter().map(|r| (r.as_f64() / MEMO_QUANTUM).round() as i64).collect();
        let ghi = match self.memo.get(&key) {
            Some(g) => g.clone(),
            None => {
                let (_, g) = env::averages(&rho, self.spec, self.mode)?;
                if self.memo.len() >= MEMO_CAPACITY {
                    self.memo.clear();
                }
                self.memo.insert(key, g.clone());
                g
            }
        };
        Ok((rhs_from_ghi(mix, self.spec, &ghi), rho))
    }
}

/// Classical RK4 from `q0` up to `t_end` with fixed step `dt`.
pub fn integrate<T: Real>(q0: &ClassMixture<T>, spec: &NetworkSpec<T>, t_end: T, dt: T) -> Result<Trajectory<T>> {
    integrate_with(q0, spec, &IntegrateOptions::new(t_end, dt))
}

pub fn integrate_with<T: Real>(
    q0: &ClassMixture<T>,
    spec: &NetworkSpec<T>,
    opts: &IntegrateOptions<T>,
) -> Result<Trajectory<T>> {
    let (t_end, dt) = (opts.t_end, opts.dt);
    if !(t_end > T::zero()) || !t_end.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {t_end}")));
    }
    if !(dt > T::zero()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {dt}")));
    }
    let dt_max = T::lit(0.1) / spec.p0;
    if dt > dt_max * (T::one() + T::epsilon()) {
        return Err(Error::InvalidArgument(format!(
            "step {dt} exceeds the stability bound 0.1/p0 = {dt_max}"
        )));
    }
    let violations = q0.check(spec, T::lit(1e-9))?;
    if !violations.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "initial mixture: {}",
            violations.join("; ")
        )));
    }

    let mut rhs = Rhs {
        spec,
        mode: opts.mode,
        memo: HashMap::new(),
    };
    let steps = (t_end / dt).ceil().to_usize().unwrap_or(usize::MAX).max(1);
    let stride = opts.stride.max(1);
    let half = T::lit(0.5);
    let sixth = T::one() / T::lit(6.0);

    let mut q = q0.clone();
    let mut t = T::zero();
    let (mut k1, rho0) = rhs.eval(&q, t)?;
    let mut traj = Trajectory {
        times: vec![t],
        states: vec![q.clone()],
        rho: vec![rho0],
        dt,
        method: "rk4",
        max_drift: T::zero(),
        clamped: 0,
        final_rhs_norm: T::zero(),
    };

    for step in 1..=steps {
        let t_next = if step == steps { t_end } else { dt * T::lit(step as f64) };
        let h = t_next - t;
        let (k2, _) = rhs.eval(&q.axpby(T::one(), &k1, h * half), t + h * half)?;
        let (k3, _) = rhs.eval(&q.axpby(T::one(), &k2, h * half), t + h * half)?;
        let (k4, _) = rhs.eval(&q.axpby(T::one(), &k3, h), t_next)?;
        let incr = k1
            .axpby(T::one(), &k2, T::lit(2.0))
            .axpby(T::one(), &k3, T::lit(2.0))
            .axpby(T::one(), &k4, T::one());
        q = q.axpby(T::one(), &incr, h * sixth);
        t = t_next;
        traj.clamped += sanitize(&mut q, t)?;
        for c in 0..q.n_classes() {
            traj.max_drift = traj.max_drift.max((q.class_mass(c) - spec.mu[c]).abs());
        }
        let (k_next, rho) = rhs.eval(&q, t)?;
        k1 = k_next;
        if step % stride == 0 || step == steps {
            traj.times.push(t);
            traj.states.push(q.clone());
            traj.rho.push(rho);
        }
    }
    traj.final_rhs_norm = k1.rows().iter().flatten().fold(T::zero(), |m, &v| m.max(v.abs()));
    Ok(traj)
}

/// Clamps rounding-level negatives, rejects NaN and real negativity.
fn sanitize<T: Real>(q: &mut ClassMixture<T>, t: T) -> Result<usize> {
    let tol = T::lit(CLAMP_TOL);
    let mut clamped = 0;
    for c in 0..q.n_classes() {
        let row = q.class_mut(c);
        let before: T = row.iter().copied().sum();
        let mut touched = false;
        for (n, v) in row.iter_mut().enumerate() {
            if v.is_nan() || v.is_infinite() {
                return Err(Error::Integration {
                    t: t.as_f64(),
                    reason: format!("non-finite mass at class {c}, level {n}"),
                });
            }
            if *v < -tol {
                return Err(Error::Integration {
                    t: t.as_f64(),
                    reason: format!("mass {v} at class {c}, level {n} is negative"),
                });
            }
            if *v < T::zero() {
                *v = T::zero();
                clamped += 1;
                touched = true;
            }
        }
        if touched {
            let after: T = row.iter().copied().sum();
            if after > T::zero() {
                let scale = before / after;
                for v in row.iter_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
    Ok(clamped)
}
