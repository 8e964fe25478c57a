//! Stationary mean-field equations: the coupled fixed point between attempt
//! intensities and the environment law, its geometric form under exponential
//! backoff, the full-interference root, and throughputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::env::{self, EnvStationary, Ghi, KernelMode, Topology};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{ClassMixture, NetworkSpec, RhoVector};
use crate::scalar::{round_sig12, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions<T> {
    /// Stop when `max_c |rho_hat_c - rho_c| < tol`.
    pub tol: T,
    pub max_iter: usize,
    /// Weight of the new iterate, in `(0, 1]`.
    pub damping: T,
    pub mode: KernelMode,
    /// Extra solves from random starting points.
    pub probes: usize,
    pub seed: u64,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        SolverOptions {
            tol: T::lit(1e-12),
            max_iter: 10_000,
            damping: T::lit(0.5),
            mode: KernelMode::Consistent,
            probes: 5,
            seed: 1,
        }
    }
}

/// Per-class throughput in three units.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputVector<T> {
    /// Fraction of slots carrying a successful class-`c` transmission.
    pub gamma: Vec<T>,
    /// `gamma_c / mu_c`; zero for empty classes.
    pub per_user: Vec<T>,
    /// `gamma_c / L`: successful packets per slot.
    pub per_slot: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult<T> {
    pub rho: RhoVector<T>,
    pub pi: EnvStationary<T>,
    pub ghi: Ghi<T>,
    pub q: ClassMixture<T>,
    pub throughput: ThroughputVector<T>,
    pub iterations: usize,
    /// `max_c |rho_c - sum_n p_n Q_c^n|`.
    pub residual: T,
    /// Fixed-point residual after each iteration.
    pub trace: Vec<T>,
    /// Mass placed at the last level by truncation, per class.
    pub tail_mass: Vec<T>,
    /// `max_c |rho_c - p0 mu_c (G_c - H_c) / G_c|`, exponential backoff only.
    pub identity_gap: Option<T>,
    /// Largest distance between this solution and the random-start probes.
    pub probe_spread: Option<T>,
}

impl<T: Real> FixedPointResult<T> {
    pub fn gamma(&self) -> &[T] {
        &self.throughput.gamma
    }

    /// Per-user throughput of class `a` relative to class `b`.
    pub fn per_user_ratio(&self, a: usize, b: usize) -> T {
        self.throughput.per_user[a] / self.throughput.per_user[b]
    }

    /// Probes agree with the returned solution within `100 tol`.
    pub fn unique(&self, tol: T) -> Option<bool> {
        self.probe_spread.map(|s| s <= T::lit(100.0) * tol)
    }

    pub fn to_json(&self) -> Value {
        let v = |xs: &[T]| -> Vec<f64> { xs.iter().map(|x| round_sig12(x.as_f64())).collect() };
        let q: Vec<Vec<f64>> = self.q.rows().iter().map(|r| v(r)).collect();
        json!({
            "rho": v(&self.rho),
            "G": v(&self.ghi.g),
            "H": v(&self.ghi.h),
            "I": v(&self.ghi.i),
            "gamma": v(&self.throughput.gamma),
            "gamma_per_user": v(&self.throughput.per_user),
            "gamma_per_slot": v(&self.throughput.per_slot),
            "Q": q,
            "residual": round_sig12(self.residual.as_f64()),
            "iterations": self.iterations,
            "tail_mass": v(&self.tail_mass),
            "identity_gap": self.identity_gap.map(|g| round_sig12(g.as_f64())),
            "probe_spread": self.probe_spread.map(|g| round_sig12(g.as_f64())),
        })
    }
}

/// `gamma_c = sum_z law(z) C_c(z) L rho_c prod_{d in V_c} (C_d(z)(e^-rho_d - 1) + 1)`,
/// summed over the attempt-epoch law.
pub fn throughput<T: Real>(
    pi: &EnvStationary<T>,
    rho: &RhoVector<T>,
    spec: &NetworkSpec<T>,
) -> Result<ThroughputVector<T>> {
    let n = spec.n_classes();
    if rho.len() != n || pi.n_classes != n {
        return Err(Error::Dimension(format!(
            "throughput needs {n} classes, got rho of {} and a law over {}",
            rho.len(),
            pi.n_classes
        )));
    }
    let topo = Topology::new(spec);
    let mut gamma = vec![T::zero(); n];
    for (idx, &w) in pi.attempt_law.iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        let z = env::decode(idx, n);
        let clear = topo.clear_mask(&z);
        for c in (0..n).filter(|&c| clear[c]) {
            let prod = topo
                .interferers(c)
                .iter()
                .fold(T::one(), |acc, &d| if clear[d] { acc * (-rho[d]).exp() } else { acc });
            gamma[c] = gamma[c] + w * spec.l_success * rho[c] * prod;
        }
    }
    let per_user = gamma
        .iter()
        .zip(&spec.mu)
        .map(|(&g, &m)| if m > T::zero() { g / m } else { T::zero() })
        .collect();
    let per_slot = gamma.iter().map(|&g| g / spec.l_success).collect();
    Ok(ThroughputVector {
        gamma,
        per_user,
        per_slot,
    })
}

/// Level distribution for exponential backoff:
/// `Q_c^n = mu_c (G_c - H_c)/I_c (2 H_c / I_c)^n` below `n_max`, the tail
/// `mu_c (2 H_c / I_c)^n_max` lumped at `n_max`.
///
/// Returns `(Q, rho, tail_mass)` with `rho_c = sum_n p_n Q_c^n`.
pub fn exp_backoff_geometric<T: Real>(
    ghi: &Ghi<T>,
    spec: &NetworkSpec<T>,
) -> Result<(ClassMixture<T>, RhoVector<T>, Vec<T>)> {
    let n_levels = spec.n_levels();
    let n_max = n_levels - 1;
    let mut q = ClassMixture::zeros(spec.n_classes(), n_levels);
    let mut tails = vec![T::zero(); spec.n_classes()];
    for c in 0..spec.n_classes() {
        let mu = spec.mu[c];
        if mu == T::zero() {
            continue;
        }
        let (g, h, i) = (ghi.g[c], ghi.h[c], ghi.i[c]);
        if !(g > h) {
            return Err(Error::Infeasible(format!(
                "class {}: G = {g} does not exceed H = {h}, the geometric level law diverges",
                spec.classes[c]
            )));
        }
        let ratio = T::lit(2.0) * h / i;
        let head = mu * (g - h) / i;
        let row = q.class_mut(c);
        let mut pow = T::one();
        for v in row.iter_mut().take(n_max) {
            *v = head * pow;
            pow = pow * ratio;
        }
        row[n_max] = mu * pow;
        tails[c] = row[n_max];
    }
    let rho = crate::model::rho_of(&q, spec)?;
    Ok((q, rho, tails))
}

/// Level balance for an arbitrary policy, solved as a linear system in
/// `y_n = p_n Q_c^n` with one balance row replaced by `sum_n y_n = 1`, then
/// rescaled so that `sum_n Q_c^n = mu_c`.
pub fn level_balance<T: Real>(ghi: &Ghi<T>, spec: &NetworkSpec<T>) -> Result<(ClassMixture<T>, RhoVector<T>)> {
    let policy = &spec.policy;
    let n = spec.n_levels();
    let mut q = ClassMixture::zeros(spec.n_classes(), n);
    for c in 0..spec.n_classes() {
        let mu = spec.mu[c];
        if mu == T::zero() {
            continue;
        }
        let (g, h) = (ghi.g[c], ghi.h[c]);
        if !(g + h > T::zero()) {
            return Err(Error::Infeasible(format!(
                "class {} is never clear to send",
                spec.classes[c]
            )));
        }
        let mut a = Matrix::zeros(n, n);
        for m in 0..n {
            a.add(m, m, -(g + h));
            a.add(policy.success(m), m, g);
            a.add(policy.collision(m), m, h);
        }
        for m in 0..n {
            a.set(0, m, T::one());
        }
        let mut b = vec![T::zero(); n];
        b[0] = T::one();
        let y = linalg::solve(&a, &b)?;
        let row = q.class_mut(c);
        for m in 0..n {
            row[m] = (y[m] / policy.probability(m)).max(T::zero());
        }
        let mass: T = row.iter().copied().sum();
        for v in row.iter_mut() {
            *v = *v * mu / mass;
        }
    }
    let rho = crate::model::rho_of(&q, spec)?;
    Ok((q, rho))
}

struct Iterate<T> {
    pi: EnvStationary<T>,
    ghi: Ghi<T>,
    q: ClassMixture<T>,
    rho_hat: RhoVector<T>,
    tails: Vec<T>,
}

fn evaluate<T: Real>(rho: &RhoVector<T>, spec: &NetworkSpec<T>, mode: KernelMode) -> Result<Iterate<T>> {
    let (pi, ghi) = env::averages(rho, spec, mode)?;
    let (q, rho_hat, tails) = if spec.policy.is_exponential() {
        exp_backoff_geometric(&ghi, spec)?
    } else {
        let (q, r) = level_balance(&ghi, spec)?;
        let n_max = spec.n_levels() - 1;
        let tails = q.rows().iter().map(|row| row[n_max]).collect();
        (q, r, tails)
    };
    Ok(Iterate {
        pi,
        ghi,
        q,
        rho_hat,
        tails,
    })
}

/// Solution, its evaluation, iteration count and residual trace.
type Converged<T> = (RhoVector<T>, Iterate<T>, usize, Vec<T>);

fn iterate_from<T: Real>(spec: &NetworkSpec<T>, opts: &SolverOptions<T>, start: RhoVector<T>) -> Result<Converged<T>> {
    let mut rho = start;
    let mut trace = Vec::new();
    for k in 1..=opts.max_iter {
        let it = evaluate(&rho, spec, opts.mode)?;
        let gap = it.rho_hat.max_abs_diff(&rho);
        trace.push(gap);
        if !gap.is_finite() {
            return Err(Error::NonConvergence {
                iterations: k,
                last_step: gap.as_f64(),
                trace: trace.iter().map(|t| t.as_f64()).collect(),
            });
        }
        if gap < opts.tol {
            return Ok((rho, it, k, trace));
        }
        let keep = T::one() - opts.damping;
        rho = RhoVector(
            rho.iter()
                .zip(it.rho_hat.iter())
                .map(|(&r, &h)| keep * r + opts.damping * h)
                .collect(),
        );
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        last_step: trace.last().map_or(f64::NAN, |t| t.as_f64()),
        trace: trace.iter().map(|t| t.as_f64()).collect(),
    })
}

/// Damped iteration on `rho` starting from `rho_c = p0 mu_c / 2`.
pub fn solve_fixed_point<T: Real>(spec: &NetworkSpec<T>, opts: &SolverOptions<T>) -> Result<FixedPointResult<T>> {
    if !(opts.damping > T::zero() && opts.damping <= T::one()) {
        return Err(Error::InvalidArgument(format!(
            "damping must lie in (0,1], got {}",
            opts.damping
        )));
    }
    if !(opts.tol > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {}",
            opts.tol
        )));
    }
    let half = T::lit(0.5);
    let start = RhoVector(spec.mu.iter().map(|&m| spec.p0 * m * half).collect());
    let (rho, it, iterations, trace) = iterate_from(spec, opts, start)?;

    let probe_spread = if opts.probes > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let starts: Vec<RhoVector<T>> = (0..opts.probes)
            .map(|_| {
                RhoVector(
                    spec.mu
                        .iter()
                        .map(|&m| spec.p0 * m * T::lit(rng.gen::<f64>()))
                        .collect(),
                )
            })
            .collect();
        let spreads: Vec<Result<T>> = starts
            .into_par_iter()
            .map(|s| iterate_from(spec, opts, s).map(|(r, ..)| r.max_abs_diff(&rho)))
            .collect();
        let mut worst = T::zero();
        for s in spreads {
            worst = worst.max(s?);
        }
        Some(worst)
    } else {
        None
    };

    let identity_gap = spec.policy.is_exponential().then(|| {
        (0..spec.n_classes()).fold(T::zero(), |m, c| {
            if spec.mu[c] == T::zero() {
                return m;
            }
            let (g, h) = (it.ghi.g[c], it.ghi.h[c]);
            m.max((rho[c] - spec.p0 * spec.mu[c] * (g - h) / g).abs())
        })
    });
    let residual = it.rho_hat.max_abs_diff(&rho);
    let throughput = throughput(&it.pi, &rho, spec)?;
    Ok(FixedPointResult {
        rho,
        pi: it.pi,
        ghi: it.ghi,
        q: it.q,
        throughput,
        iterations,
        residual,
        trace,
        tail_mass: it.tails,
        identity_gap,
        probe_spread,
    })
}

/// Full-interference stationary point for exponential backoff.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedForm<T> {
    pub rho: T,
    /// Levels `0..=n_max`, geometric tail lumped at `n_max`.
    pub q: Vec<T>,
    /// `|p0 e^rho + rho - 2 p0|` at the returned root.
    pub residual: T,
}

/// Root of `p0 e^rho + rho - 2 p0 = 0` on `(0, ln 2)` and
/// `Q^n = (2(1 - e^-rho))^n rho e^-rho / p0`.
pub fn closed_form_full_interference<T: Real>(p0: T, n_max: usize) -> Result<ClosedForm<T>> {
    if !(p0 > T::zero()) {
        return Err(Error::InvalidArgument(format!("p0 must be positive, got {p0}")));
    }
    if p0 >= T::LN_2() {
        return Err(Error::Infeasible(format!(
            "p0 = {p0} is not below ln 2, the full-interference dynamics need p0 < ln 2"
        )));
    }
    let two = T::lit(2.0);
    let f = |r: T| p0 * r.exp() + r - two * p0;
    let (mut lo, mut hi) = (T::zero(), T::LN_2());
    for _ in 0..200 {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rho = if f(lo).abs() <= f(hi).abs() { lo } else { hi };
    let ratio = two * -(-rho).exp_m1();
    let q0 = rho * (-rho).exp() / p0;
    let mut q = Vec::with_capacity(n_max + 1);
    let mut pow = T::one();
    for _ in 0..n_max {
        q.push(q0 * pow);
        pow = pow * ratio;
    }
    // tail of the geometric series, sum_{n >= n_max} q0 ratio^n
    q.push(q0 * pow / (T::one() - ratio));
    Ok(ClosedForm {
        rho,
        q,
        residual: f(rho).abs(),
    })
}
