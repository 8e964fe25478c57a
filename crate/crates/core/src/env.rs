//! Environment chain on per-class channel states `{0,1,2}^C`.
//!
//! State `z` records, per class, whether the class is idle (0), carries one
//! successful transmission (1) or is in a collision (2). States are indexed by
//! the mixed-radix encoding of `z` with the first class most significant.
//!
//! One slot of the chain, in the default [`KernelMode::Consistent`] mode:
//!
//! 1. every busy class ends its activity independently, with probability
//!    `1/L` (success) or `1/Lc` (collision);
//! 2. every class that is clear to send in the post-departure state draws a
//!    Poisson number of attempts with mean `rho_c`;
//! 3. a class with exactly one attempt and no attempt among its interferers
//!    enters state 1, any other attempting class enters state 2.
//!
//! The post-departure state is the attempt epoch; [`EnvStationary::attempt_law`]
//! is the stationary law at that epoch and is what the averaged rates use.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{NetworkSpec, RhoVector};
use crate::scalar::Real;

/// 3^12 states.
pub const DEFAULT_STATE_CAP: usize = 531_441;

pub const IDLE: u8 = 0;
pub const SUCCESS: u8 = 1;
pub const COLLISION: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelMode {
    /// Exact marginalization of the slot dynamics described in the module docs.
    #[default]
    Consistent,
    /// Literal product of the per-event factors, pre-slot clear-to-send;
    /// rows need not sum to one.
    Verbatim,
}

impl FromStr for KernelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "consistent" => Ok(KernelMode::Consistent),
            "verbatim" => Ok(KernelMode::Verbatim),
            other => Err(Error::InvalidArgument(format!("unknown kernel mode \"{other}\""))),
        }
    }
}

impl fmt::Display for KernelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelMode::Consistent => "consistent",
            KernelMode::Verbatim => "verbatim",
        })
    }
}

/// Enumeration of `{0,1,2}^C`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    n_classes: usize,
    states: Vec<Vec<u8>>,
}

impl StateSpace {
    pub fn new(n_classes: usize) -> Self {
        let size = 3usize.pow(n_classes as u32);
        let states = (0..size).map(|i| decode(i, n_classes)).collect();
        StateSpace { n_classes, states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn state(&self, index: usize) -> &[u8] {
        &self.states[index]
    }

    pub fn index(&self, z: &[u8]) -> usize {
        encode(z)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[u8])> {
        self.states.iter().enumerate().map(|(i, z)| (i, z.as_slice()))
    }
}

pub fn encode(z: &[u8]) -> usize {
    z.iter().fold(0, |acc, &v| acc * 3 + v as usize)
}

pub fn decode(mut index: usize, n_classes: usize) -> Vec<u8> {
    let mut z = vec![0u8; n_classes];
    for slot in z.iter_mut().rev() {
        *slot = (index % 3) as u8;
        index /= 3;
    }
    z
}

/// Interference structure in the form the chain needs.
#[derive(Debug, Clone)]
pub struct Topology {
    interferers: Vec<Vec<usize>>,
    /// `c` and `d` interfere in at least one direction.
    coupled: Vec<Vec<bool>>,
}

impl Topology {
    pub fn new<T: Real>(spec: &NetworkSpec<T>) -> Self {
        let n = spec.n_classes();
        Topology {
            interferers: (0..n).map(|c| spec.interferers(c)).collect(),
            coupled: (0..n)
                .map(|c| (0..n).map(|d| spec.adjacency[c][d] || spec.adjacency[d][c]).collect())
                .collect(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.interferers.len()
    }

    pub fn interferers(&self, c: usize) -> &[usize] {
        &self.interferers[c]
    }

    /// `C_c(z)`: every class in `V_c` is idle.
    #[inline]
    pub fn clear_to_send(&self, z: &[u8], c: usize) -> bool {
        self.interferers[c].iter().all(|&d| z[d] == IDLE)
    }

    pub fn clear_mask(&self, z: &[u8]) -> Vec<bool> {
        (0..self.n_classes()).map(|c| self.clear_to_send(z, c)).collect()
    }
}

/// Poisson attempt-count categories for one clear class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttemptProfile<T> {
    pub none: T,
    pub one: T,
    pub many: T,
}

impl<T: Real> AttemptProfile<T> {
    fn by_category(&self, k: u8) -> T {
        match k {
            0 => self.none,
            1 => self.one,
            _ => self.many,
        }
    }
}

/// Probabilities of zero, one and two-or-more attempts for intensity `rho`.
pub fn attempt_profile<T: Real>(rho: T) -> Result<AttemptProfile<T>> {
    if !(rho >= T::zero()) || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "attempt rate must be finite and >= 0, got {rho}"
        )));
    }
    let none = (-rho).exp();
    let one = rho * none;
    // 1 - (1 + rho) e^-rho without cancellation for small rho
    let many = (-(-rho).exp_m1() - one).max(T::zero());
    Ok(AttemptProfile { none, one, many })
}

/// Row-stochastic (consistent mode) transition matrix of the environment chain.
#[derive(Debug, Clone)]
pub struct EnvKernel<T> {
    matrix: Matrix<T>,
    mode: KernelMode,
    rho: RhoVector<T>,
    n_classes: usize,
    /// Sparse post-departure distribution per state; consistent mode only.
    departures: Option<Vec<Vec<(usize, T)>>>,
    max_row_deviation: T,
}

impl<T: Real> EnvKernel<T> {
    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    pub fn rho(&self) -> &RhoVector<T> {
        &self.rho
    }

    pub fn n_states(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    #[inline]
    pub fn get(&self, from: usize, to: usize) -> T {
        self.matrix.get(from, to)
    }

    /// `max_z |sum_z' K(z,z') - 1|`.
    pub fn max_row_deviation(&self) -> T {
        self.max_row_deviation
    }

    /// Copy with every row rescaled to sum to one.
    pub fn renormalized(&self) -> Result<Self> {
        let mut out = self.clone();
        for i in 0..out.matrix.rows() {
            let s: T = out.matrix.row(i).iter().copied().sum();
            if !(s > T::zero()) {
                return Err(Error::Singular(format!("kernel row {i} has no mass")));
            }
            for v in out.matrix.row_mut(i) {
                *v = *v / s;
            }
        }
        out.max_row_deviation = row_deviation(&out.matrix);
        Ok(out)
    }

    /// Writes the matrix, one CSV line per row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.matrix.rows() {
            let line: Vec<String> = self
                .matrix
                .row(i)
                .iter()
                .map(|v| crate::scalar::fmt_sig12(v.as_f64()))
                .collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

fn row_deviation<T: Real>(m: &Matrix<T>) -> T {
    (0..m.rows()).fold(T::zero(), |acc, i| {
        let s: T = m.row(i).iter().copied().sum();
        acc.max((s - T::one()).abs())
    })
}

fn check_rho<T: Real>(rho: &RhoVector<T>, spec: &NetworkSpec<T>) -> Result<()> {
    if rho.len() != spec.n_classes() {
        return Err(Error::Dimension(format!(
            "rho has {} entries, spec has {} classes",
            rho.len(),
            spec.n_classes()
        )));
    }
    Ok(())
}

pub fn build_kernel<T: Real>(rho: &RhoVector<T>, spec: &NetworkSpec<T>, mode: KernelMode) -> Result<EnvKernel<T>> {
    build_kernel_capped(rho, spec, mode, DEFAULT_STATE_CAP)
}

pub fn build_kernel_capped<T: Real>(
    rho: &RhoVector<T>,
    spec: &NetworkSpec<T>,
    mode: KernelMode,
    state_cap: usize,
) -> Result<EnvKernel<T>> {
    check_rho(rho, spec)?;
    let n_classes = spec.n_classes();
    let size = 3usize
        .checked_pow(n_classes as u32)
        .filter(|&s| s <= state_cap)
        .ok_or(Error::StateCap {
            states: 3usize.saturating_pow(n_classes as u32),
            cap: state_cap,
        })?;
    let space = StateSpace::new(n_classes);
    let topo = Topology::new(spec);
    let profiles = rho.iter().map(|&r| attempt_profile(r)).collect::<Result<Vec<_>>>()?;

    let (matrix, departures) = match mode {
        KernelMode::Consistent => {
            let departures: Vec<Vec<(usize, T)>> = space
                .iter()
                .map(|(_, z)| departure_outcomes(z, spec.l_success, spec.l_collision))
                .collect();
            let attempts: Vec<Vec<(usize, T)>> = space
                .iter()
                .map(|(_, z)| attempt_outcomes(z, &topo, &profiles))
                .collect();
            let mut m = Matrix::zeros(size, size);
            for (from, dep) in departures.iter().enumerate() {
                for &(mid, pd) in dep {
                    for &(to, pa) in &attempts[mid] {
                        m.add(from, to, pd * pa);
                    }
                }
            }
            (m, Some(departures))
        }
        KernelMode::Verbatim => {
            let mut m = Matrix::zeros(size, size);
            for (from, z) in space.iter() {
                for (to, z2) in space.iter() {
                    let v = verbatim_entry(z, z2, &topo, &profiles, spec.l_success, spec.l_collision);
                    if v != T::zero() {
                        m.set(from, to, v);
                    }
                }
            }
            (m, None)
        }
    };
    let max_row_deviation = row_deviation(&matrix);
    Ok(EnvKernel {
        matrix,
        mode,
        rho: rho.clone(),
        n_classes,
        departures,
        max_row_deviation,
    })
}

/// Post-departure states reachable from `z`, with probabilities.
pub fn departure_outcomes<T: Real>(z: &[u8], l_success: T, l_collision: T) -> Vec<(usize, T)> {
    let mut out: Vec<(Vec<u8>, T)> = vec![(z.to_vec(), T::one())];
    for (c, &zc) in z.iter().enumerate() {
        let q = match zc {
            SUCCESS => l_success.recip(),
            COLLISION => l_collision.recip(),
            _ => continue,
        };
        let mut next = Vec::with_capacity(out.len() * 2);
        for (s, p) in out {
            if q > T::zero() {
                let mut ended = s.clone();
                ended[c] = IDLE;
                next.push((ended, p * q));
            }
            if q < T::one() {
                next.push((s, p * (T::one() - q)));
            }
        }
        out = next;
    }
    out.into_iter().map(|(s, p)| (encode(&s), p)).collect()
}

/// States reached from the post-departure state `z` after one round of attempts.
pub fn attempt_outcomes<T: Real>(z: &[u8], topo: &Topology, profiles: &[AttemptProfile<T>]) -> Vec<(usize, T)> {
    let clear: Vec<usize> = (0..z.len()).filter(|&c| topo.clear_to_send(z, c)).collect();
    let mut out: Vec<(usize, T)> = Vec::new();
    let mut cats = vec![0u8; clear.len()];
    let mut category = vec![0u8; z.len()];
    loop {
        let mut p = T::one();
        for (&c, &k) in clear.iter().zip(&cats) {
            p = p * profiles[c].by_category(k);
            category[c] = k;
        }
        if p > T::zero() {
            let mut next = z.to_vec();
            for &c in &clear {
                next[c] = resolve_attempt(c, &category, topo);
            }
            let idx = encode(&next);
            match out.iter_mut().find(|(i, _)| *i == idx) {
                Some(e) => e.1 = e.1 + p,
                None => out.push((idx, p)),
            }
        }
        // odometer over {0,1,2}^clear
        let mut k = 0;
        while k < cats.len() {
            cats[k] += 1;
            if cats[k] < 3 {
                break;
            }
            cats[k] = 0;
            k += 1;
        }
        if k == cats.len() {
            break;
        }
    }
    out
}

/// New state of clear class `c` given the attempt categories of all classes.
#[inline]
fn resolve_attempt(c: usize, category: &[u8], topo: &Topology) -> u8 {
    match category[c] {
        0 => IDLE,
        k => {
            let interfered = topo.interferers(c).iter().any(|&d| d != c && category[d] > 0);
            if k == 1 && !interfered {
                SUCCESS
            } else {
                COLLISION
            }
        }
    }
}

fn verbatim_entry<T: Real>(
    z: &[u8],
    z2: &[u8],
    topo: &Topology,
    profiles: &[AttemptProfile<T>],
    l_success: T,
    l_collision: T,
) -> T {
    let mut v = T::one();
    let mut colliding: Vec<usize> = Vec::new();
    for c in 0..z.len() {
        let clear = topo.clear_to_send(z, c);
        let factor = match (z[c], z2[c]) {
            (IDLE, IDLE) => {
                if clear {
                    profiles[c].none
                } else {
                    T::one()
                }
            }
            (IDLE, SUCCESS) => {
                if clear {
                    profiles[c].one
                } else {
                    T::zero()
                }
            }
            (IDLE, _) => {
                colliding.push(c);
                T::one()
            }
            (SUCCESS, IDLE) => l_success.recip(),
            (SUCCESS, SUCCESS) => T::one() - l_success.recip(),
            (COLLISION, IDLE) => l_collision.recip(),
            (COLLISION, COLLISION) => T::one() - l_collision.recip(),
            _ => T::zero(),
        };
        v = v * factor;
        if v == T::zero() {
            return v;
        }
    }
    // collision events: connected components of the interference relation
    let mut seen = vec![false; colliding.len()];
    for start in 0..colliding.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut component = vec![colliding[start]];
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for j in 0..colliding.len() {
                if !seen[j] && topo.coupled[colliding[i]][colliding[j]] {
                    seen[j] = true;
                    component.push(colliding[j]);
                    queue.push_back(j);
                }
            }
        }
        for &c in &component {
            if !topo.clear_to_send(z, c) {
                return T::zero();
            }
        }
        if component.len() == 1 {
            v = v * profiles[component[0]].many;
        } else {
            for &c in &component {
                v = v * (T::one() - profiles[c].none);
            }
        }
    }
    v
}

/// Stationary law of the environment chain.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStationary<T> {
    /// Law of the state at the start of a slot.
    pub pi: Vec<T>,
    /// Law of the post-departure state, at which clear-to-send is evaluated.
    /// Equal to `pi` for verbatim kernels.
    pub attempt_law: Vec<T>,
    /// `||pi K - pi||_1` for the kernel that was solved.
    pub residual: T,
    /// Number of states in the recurrent class of the all-idle state.
    pub support: usize,
    pub n_classes: usize,
}

impl<T: Real> EnvStationary<T> {
    /// Stationary probability that class `c` is in `state`.
    pub fn class_marginal(&self, c: usize, state: u8) -> T {
        self.pi
            .iter()
            .enumerate()
            .filter(|(i, _)| decode(*i, self.n_classes)[c] == state)
            .map(|(_, &p)| p)
            .sum()
    }

    /// Writes `index,z,pi,attempt_law` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,z,pi,attempt_law")?;
        for (i, (&p, &a)) in self.pi.iter().zip(&self.attempt_law).enumerate() {
            let z: String = decode(i, self.n_classes).iter().map(|v| char::from(b'0' + v)).collect();
            writeln!(
                w,
                "{},{},{},{}",
                i,
                z,
                crate::scalar::fmt_sig12(p.as_f64()),
                crate::scalar::fmt_sig12(a.as_f64())
            )?;
        }
        Ok(())
    }
}

/// Solves `pi K = pi, sum pi = 1` on the recurrent class of the all-idle state.
///
/// Verbatim kernels are row-normalized before solving.
pub fn stationary_dist<T: Real>(kernel: &EnvKernel<T>) -> Result<EnvStationary<T>> {
    let normalized;
    let k = if kernel.mode == KernelMode::Verbatim {
        normalized = kernel.renormalized()?;
        &normalized
    } else {
        kernel
    };
    let m = &k.matrix;
    let n = m.rows();

    // states reachable from all-idle; closed by construction
    let mut in_class = vec![false; n];
    let mut order = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    in_class[0] = true;
    while let Some(i) = queue.pop_front() {
        order.push(i);
        for (j, &v) in m.row(i).iter().enumerate() {
            if v > T::zero() && !in_class[j] {
                in_class[j] = true;
                queue.push_back(j);
            }
        }
    }
    order.sort_unstable();
    let r = order.len();
    let mut local = vec![usize::MAX; n];
    for (li, &gi) in order.iter().enumerate() {
        local[gi] = li;
    }

    // rows: balance equations for each state except the last, then normalization
    let mut a = Matrix::zeros(r, r);
    for (li, &gi) in order.iter().enumerate() {
        for (lj, &gj) in order.iter().enumerate().take(r - 1) {
            let mut v = m.get(gi, gj);
            if li == lj {
                v = v - T::one();
            }
            a.set(lj, li, v);
        }
        a.set(r - 1, li, T::one());
    }
    let mut b = vec![T::zero(); r];
    b[r - 1] = T::one();
    let sol = linalg::solve(&a, &b)?;

    let mut pi = vec![T::zero(); n];
    for (li, &gi) in order.iter().enumerate() {
        pi[gi] = sol[li].max(T::zero());
    }
    let total: T = pi.iter().copied().sum();
    for p in pi.iter_mut() {
        *p = *p / total;
    }

    let pk = m.left_mul(&pi);
    let residual = pk.iter().zip(&pi).map(|(&a, &b)| (a - b).abs()).sum();

    let attempt_law = match &k.departures {
        Some(dep) => {
            let mut law = vec![T::zero(); n];
            for (i, &p) in pi.iter().enumerate() {
                if p == T::zero() {
                    continue;
                }
                for &(j, q) in &dep[i] {
                    law[j] = law[j] + p * q;
                }
            }
            law
        }
        None => pi.clone(),
    };

    Ok(EnvStationary {
        pi,
        attempt_law,
        residual,
        support: r,
        n_classes: k.n_classes,
    })
}

/// Averaged clear-and-success (`g`), clear-and-collision (`h`) and clear (`i`)
/// probabilities per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Ghi<T> {
    pub g: Vec<T>,
    pub h: Vec<T>,
    pub i: Vec<T>,
}

impl<T: Real> Ghi<T> {
    pub fn n_classes(&self) -> usize {
        self.g.len()
    }
}

pub fn ghi<T: Real>(stat: &EnvStationary<T>, rho: &RhoVector<T>, spec: &NetworkSpec<T>) -> Result<Ghi<T>> {
    check_rho(rho, spec)?;
    let n = spec.n_classes();
    if stat.n_classes != n {
        return Err(Error::Dimension(format!(
            "stationary law is over {} classes, spec has {}",
            stat.n_classes, n
        )));
    }
    let topo = Topology::new(spec);
    let mut g = vec![T::zero(); n];
    let mut h = vec![T::zero(); n];
    for (idx, &w) in stat.attempt_law.iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        let z = decode(idx, n);
        let clear = topo.clear_mask(&z);
        for c in 0..n {
            if !clear[c] {
                continue;
            }
            // prod over d in V_c of (C_d (e^-rho_d - 1) + 1) = exp(-sum of clear rho_d)
            let s: T = topo.interferers(c).iter().filter(|&&d| clear[d]).map(|&d| rho[d]).sum();
            g[c] = g[c] + w * (-s).exp();
            h[c] = h[c] + w * -(-s).exp_m1();
        }
    }
    let i = g.iter().zip(&h).map(|(&a, &b)| a + b).collect();
    Ok(Ghi { g, h, i })
}

/// Stationary law and averaged rates at attempt intensities `rho`.
pub fn averages<T: Real>(
    rho: &RhoVector<T>,
    spec: &NetworkSpec<T>,
    mode: KernelMode,
) -> Result<(EnvStationary<T>, Ghi<T>)> {
    let kernel = build_kernel(rho, spec, mode)?;
    let stat = stationary_dist(&kernel)?;
    let rates = ghi(&stat, rho, spec)?;
    Ok((stat, rates))
}

/// Result of checking the uniform domination criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct DominationReport {
    pub passed: bool,
    /// The dominating chain has exactly one closed communicating class.
    pub dominating_recurrent: bool,
    pub closed_classes: usize,
    pub kernels_checked: usize,
    pub violation: Option<DominationViolation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DominationViolation {
    pub rho: Vec<f64>,
    pub z: Vec<u8>,
    pub z1: Vec<u8>,
    pub lhs: f64,
    pub rhs: f64,
}

/// Kernel in which every class that is clear after departures becomes active.
pub fn dominating_kernel<T: Real>(spec: &NetworkSpec<T>) -> Result<Matrix<T>> {
    let n_classes = spec.n_classes();
    let size = 3usize
        .checked_pow(n_classes as u32)
        .filter(|&s| s <= DEFAULT_STATE_CAP)
        .ok_or(Error::StateCap {
            states: 3usize.saturating_pow(n_classes as u32),
            cap: DEFAULT_STATE_CAP,
        })?;
    let topo = Topology::new(spec);
    let space = StateSpace::new(n_classes);
    let mut m = Matrix::zeros(size, size);
    for (from, z) in space.iter() {
        for (mid, p) in departure_outcomes(z, spec.l_success, spec.l_collision) {
            let zm = space.state(mid);
            let mut next = zm.to_vec();
            for c in 0..n_classes {
                if topo.clear_to_send(zm, c) {
                    next[c] = SUCCESS;
                }
            }
            m.add(from, encode(&next), p);
        }
    }
    Ok(m)
}

/// Number of closed communicating classes of a finite chain.
fn closed_class_count<T: Real>(m: &Matrix<T>) -> usize {
    let n = m.rows();
    let reach: Vec<Vec<bool>> = (0..n)
        .map(|s| {
            let mut seen = vec![false; n];
            seen[s] = true;
            let mut stack = vec![s];
            while let Some(i) = stack.pop() {
                for (j, &v) in m.row(i).iter().enumerate() {
                    if v > T::zero() && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen
        })
        .collect();
    // i is recurrent iff everything it reaches reaches back
    let mut labeled = vec![false; n];
    let mut count = 0;
    for i in 0..n {
        if labeled[i] {
            continue;
        }
        let recurrent = (0..n).all(|j| !reach[i][j] || reach[j][i]);
        if recurrent {
            count += 1;
            for j in 0..n {
                if reach[i][j] {
                    labeled[j] = true;
                }
            }
        }
    }
    count
}

/// Per-row upper-tail probabilities `P(busy set contains S)` for every subset `S`.
fn upper_tails<T: Real>(row: &[T], n_classes: usize) -> Vec<f64> {
    let subsets = 1usize << n_classes;
    let mut f = vec![0.0f64; subsets];
    for (j, &p) in row.iter().enumerate() {
        if p == T::zero() {
            continue;
        }
        let z = decode(j, n_classes);
        let mask = z
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != IDLE)
            .fold(0usize, |acc, (c, _)| acc | (1 << c));
        f[mask] += p.as_f64();
    }
    // superset sums
    for bit in 0..n_classes {
        for mask in 0..subsets {
            if mask & (1 << bit) == 0 {
                f[mask] += f[mask | (1 << bit)];
            }
        }
    }
    f
}

/// Checks that every environment kernel on a grid of attempt rates is
/// stochastically dominated by [`dominating_kernel`] for the order "busy
/// classes stay busy", and that the dominating chain is positive recurrent.
pub fn domination_check<T: Real>(spec: &NetworkSpec<T>) -> Result<DominationReport> {
    let n = spec.n_classes();
    let dom = dominating_kernel(spec)?;
    let closed = closed_class_count(&dom);
    let dom_tails: Vec<Vec<f64>> = (0..dom.rows()).map(|i| upper_tails(dom.row(i), n)).collect();

    let grid: Vec<f64> = (0..5).map(|k| spec.p0.as_f64() * k as f64 / 4.0).collect();
    let points: Vec<Vec<f64>> = if 5usize.pow(n as u32) <= 3125 {
        (0..5usize.pow(n as u32))
            .map(|mut k| {
                (0..n)
                    .map(|_| {
                        let v = grid[k % 5];
                        k /= 5;
                        v
                    })
                    .collect()
            })
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        (0..512)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..=spec.p0.as_f64())).collect())
            .collect()
    };

    let mut violation = None;
    'outer: for point in &points {
        let rho = RhoVector(point.iter().map(|&r| T::lit(r)).collect());
        let k = build_kernel(&rho, spec, KernelMode::Consistent)?;
        for from in 0..k.n_states() {
            let tails = upper_tails(k.matrix().row(from), n);
            for (mask, (&lhs, &rhs)) in tails.iter().zip(&dom_tails[from]).enumerate() {
                if lhs > rhs + 1e-12 {
                    violation = Some(DominationViolation {
                        rho: point.clone(),
                        z: decode(from, n),
                        z1: (0..n)
                            .map(|c| if mask & (1 << c) != 0 { SUCCESS } else { IDLE })
                            .collect(),
                        lhs,
                        rhs,
                    });
                    break 'outer;
                }
            }
        }
    }
    Ok(DominationReport {
        passed: violation.is_none() && closed == 1,
        dominating_recurrent: closed == 1,
        closed_classes: closed,
        kernels_checked: points.len(),
        violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkSpec;

    fn single(l: f64, lc: f64) -> NetworkSpec<f64> {
        NetworkSpec::single_class(1.0 / 16.0, l, lc, 8).unwrap()
    }

    fn chain() -> NetworkSpec<f64> {
        NetworkSpec::chain3([1.0 / 3.0, 1.0 / 3.0, 1.0 - 2.0 / 3.0], 1.0 / 16.0, 100.0, 100.0, 8).unwrap()
    }

    #[test]
    fn encoding_is_mixed_radix() {
        assert_eq!(encode(&[1, 0, 1]), 10);
        assert_eq!(decode(10, 3), vec![1, 0, 1]);
        let space = StateSpace::new(3);
        assert_eq!(space.len(), 27);
        for (i, z) in space.iter() {
            assert_eq!(space.index(z), i);
        }
    }

    #[test]
    fn attempt_profile_values() {
        let p = attempt_profile(0.0f64).unwrap();
        assert_eq!((p.none, p.one, p.many), (1.0, 0.0, 0.0));
        let p = attempt_profile(1.0f64).unwrap();
        let e = (-1.0f64).exp();
        assert!((p.none - e).abs() < 1e-16);
        assert!((p.one - e).abs() < 1e-16);
        // 1 - 2/e evaluated directly
        assert!((p.many - 0.264_241_117_657_115_4).abs() < 1e-15);
        assert!(attempt_profile(-0.1f64).is_err());
        for &r in &[1e-9f64, 1e-3, 0.0625, 0.7, 5.0] {
            let p = attempt_profile(r).unwrap();
            assert!(p.none >= 0.0 && p.one >= 0.0 && p.many >= 0.0);
            assert!((p.none + p.one + p.many - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_class_kernel_by_hand() {
        // departures first, then attempts on the post-departure state
        let (l, lc, r) = (10.0, 4.0, 0.3);
        let spec = single(l, lc);
        let k = build_kernel(&RhoVector(vec![r]), &spec, KernelMode::Consistent).unwrap();
        let (e0, e1) = ((-r).exp(), r * (-r).exp());
        let e2 = 1.0 - e0 - e1;
        let attempt = [e0, e1, e2];
        let expected = [
            attempt,
            [e0 / l, 1.0 - 1.0 / l + e1 / l, e2 / l],
            [e0 / lc, e1 / lc, 1.0 - 1.0 / lc + e2 / lc],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((k.get(i, j) - expected[i][j]).abs() < 1e-15, "({i},{j})");
            }
        }
        let v = build_kernel(&RhoVector(vec![r]), &spec, KernelMode::Verbatim).unwrap();
        let literal = [attempt, [1.0 / l, 1.0 - 1.0 / l, 0.0], [1.0 / lc, 0.0, 1.0 - 1.0 / lc]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((v.get(i, j) - literal[i][j]).abs() < 1e-15, "verbatim ({i},{j})");
            }
        }
        // the two modes share the row of the idle state
        for j in 0..3 {
            assert!((v.get(0, j) - k.get(0, j)).abs() < 1e-10);
        }
        assert!(v.max_row_deviation() < 1e-15);
    }

    #[test]
    fn zero_rho_freezes_idle_state() {
        let spec = chain();
        let k = build_kernel(&RhoVector(vec![0.0; 3]), &spec, KernelMode::Consistent).unwrap();
        assert_eq!(k.get(0, 0), 1.0);
        let st = stationary_dist(&k).unwrap();
        assert_eq!(st.pi[0], 1.0);
        assert_eq!(st.support, 1);
        let g = ghi(&st, k.rho(), &spec).unwrap();
        for c in 0..3 {
            assert_eq!((g.g[c], g.h[c], g.i[c]), (1.0, 0.0, 1.0));
        }
    }

    #[test]
    fn single_class_stationary_by_hand() {
        // nu = P(post-departure idle); pi = nu (e0, L e1, Lc e2)
        let (l, lc, r) = (100.0, 60.0, 0.0587);
        let spec = single(l, lc);
        let k = build_kernel(&RhoVector(vec![r]), &spec, KernelMode::Consistent).unwrap();
        let st = stationary_dist(&k).unwrap();
        let e0 = (-r).exp();
        let e1 = r * e0;
        let e2 = 1.0 - e0 - e1;
        let nu = 1.0 / (e0 + l * e1 + lc * e2);
        let pi = [nu * e0, nu * l * e1, nu * lc * e2];
        for s in 0..3 {
            assert!((st.pi[s] - pi[s]).abs() < 1e-12, "{s}: {} vs {}", st.pi[s], pi[s]);
        }
        assert!((st.attempt_law[0] - nu).abs() < 1e-12);
        assert!(st.residual < 1e-12);

        let g = ghi(&st, k.rho(), &spec).unwrap();
        assert!((g.g[0] - nu * e0).abs() < 1e-12);
        assert!((g.h[0] - nu * (1.0 - e0)).abs() < 1e-12);
        assert!((g.i[0] - nu).abs() < 1e-12);
    }

    #[test]
    fn chain_kernel_entry_matches_monte_carlo() {
        // from z = (1,0,1): class 2 is blocked; estimate P(z' = (0,0,1)) by
        // sampling the slot dynamics directly
        let spec = NetworkSpec::chain3([0.3, 0.4, 0.3], 0.5, 3.0, 2.0, 4).unwrap();
        let rho = RhoVector(vec![0.4, 0.6, 0.5]);
        let k = build_kernel(&rho, &spec, KernelMode::Consistent).unwrap();
        let from = encode(&[1, 0, 1]);
        let to = encode(&[0, 0, 1]);
        let exact = k.get(from, to);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples = 1_000_000;
        let mut hits = 0u64;
        let poisson = |rng: &mut ChaCha8Rng, lam: f64| {
            let mut n = 0;
            let mut acc = rng.gen::<f64>();
            let lim = (-lam).exp();
            while acc > lim {
                n += 1;
                acc *= rng.gen::<f64>();
            }
            n
        };
        for _ in 0..samples {
            let mut z = [1u8, 0, 1];
            if rng.gen::<f64>() < 1.0 / 3.0 {
                z[0] = 0;
            }
            if rng.gen::<f64>() < 1.0 / 3.0 {
                z[2] = 0;
            }
            let clear = [
                z[0] == 0 && z[1] == 0,
                z.iter().all(|&v| v == 0),
                z[1] == 0 && z[2] == 0,
            ];
            let mut att = [0u32; 3];
            for c in 0..3 {
                if clear[c] {
                    att[c] = poisson(&mut rng, rho[c]);
                }
            }
            let mut next = z;
            let nbrs: [&[usize]; 3] = [&[1], &[0, 2], &[1]];
            for c in 0..3 {
                if clear[c] && att[c] > 0 {
                    let other = nbrs[c].iter().any(|&d| att[d] > 0);
                    next[c] = if att[c] == 1 && !other { 1 } else { 2 };
                }
            }
            if next == [0, 0, 1] {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / samples as f64;
        let sigma = (exact * (1.0 - exact) / samples as f64).sqrt();
        assert!(
            (p_hat - exact).abs() < 3.0 * sigma,
            "{p_hat} vs {exact} (sigma {sigma})"
        );
    }

    #[test]
    fn consistent_rows_are_stochastic_and_pi_solves() {
        for spec in [single(100.0, 100.0), chain(), single(1.0, 1.0)] {
            let n = spec.n_classes();
            for k in 0..10 {
                let r = spec.p0 * (k as f64 + 0.5) / 10.0;
                let rho = RhoVector((0..n).map(|c| r * (1.0 + 0.1 * c as f64)).collect());
                let ker = build_kernel(&rho, &spec, KernelMode::Consistent).unwrap();
                assert!(ker.max_row_deviation() < 1e-10);
                assert!(ker.matrix().row(0).iter().all(|&v| v >= 0.0));
                let st = stationary_dist(&ker).unwrap();
                assert!(st.residual < 1e-12, "residual {}", st.residual);
                assert!((st.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let g = ghi(&st, &rho, &spec).unwrap();
                for c in 0..n {
                    assert_eq!(g.g[c] + g.h[c], g.i[c]);
                }
            }
        }
    }

    #[test]
    fn clear_mass_by_independent_summation() {
        let spec = chain();
        let rho = RhoVector(vec![0.02, 0.015, 0.025]);
        let st = stationary_dist(&build_kernel(&rho, &spec, KernelMode::Consistent).unwrap()).unwrap();
        let g = ghi(&st, &rho, &spec).unwrap();
        let nbrs: [&[usize]; 3] = [&[0, 1], &[0, 1, 2], &[1, 2]];
        for c in 0..3 {
            let mut mass = 0.0;
            for idx in 0..27 {
                let z = decode(idx, 3);
                if nbrs[c].iter().all(|&d| z[d] == 0) {
                    mass += st.attempt_law[idx];
                }
            }
            assert!((mass - g.i[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn verbatim_rows_deviate_on_partial_interference() {
        let spec = chain();
        let rho = RhoVector(vec![0.3, 0.3, 0.3]);
        let v = build_kernel(&rho, &spec, KernelMode::Verbatim).unwrap();
        assert!(v.max_row_deviation() > 1e-6);
        let st = stationary_dist(&v).unwrap();
        assert!(st.residual < 1e-12);
    }

    #[test]
    fn state_cap_enforced() {
        let spec = chain();
        let err = build_kernel_capped(&RhoVector(vec![0.1; 3]), &spec, KernelMode::Consistent, 26).unwrap_err();
        assert!(matches!(err, Error::StateCap { states: 27, cap: 26 }));
        assert!(build_kernel(&RhoVector(vec![0.1; 2]), &spec, KernelMode::Consistent).is_err());
        assert!("sideways".parse::<KernelMode>().is_err());
    }

    #[test]
    fn domination_holds() {
        let report = domination_check(&single(100.0, 100.0)).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.kernels_checked, 5);
        let report = domination_check(&chain()).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.kernels_checked, 125);
        assert!(report.dominating_recurrent);
    }

    #[test]
    fn pi_is_lipschitz_in_rho() {
        let spec = chain();
        let base = RhoVector(vec![0.02, 0.02, 0.02]);
        let pi0 = stationary_dist(&build_kernel(&base, &spec, KernelMode::Consistent).unwrap()).unwrap();
        let mut worst: f64 = 0.0;
        for c in 0..3 {
            let mut r = base.clone();
            r.0[c] += 1e-3;
            let pi1 = stationary_dist(&build_kernel(&r, &spec, KernelMode::Consistent).unwrap()).unwrap();
            let d: f64 = pi0.pi.iter().zip(&pi1.pi).map(|(a, b)| (a - b).abs()).sum();
            worst = worst.max(d / 1e-3);
        }
        assert!(worst.is_finite() && worst < 1e4, "empirical constant {worst}");
    }

    #[test]
    fn works_in_f32() {
        let spec = single(100.0, 100.0).cast::<f32>();
        let k = build_kernel(&RhoVector(vec![0.0587f32]), &spec, KernelMode::Consistent).unwrap();
        let st = stationary_dist(&k).unwrap();
        assert!(st.residual < 1e-5);
        let g = ghi(&st, k.rho(), &spec).unwrap();
        assert!((g.g[0] - 0.1418875).abs() < 1e-4);
    }
}
