//! Slot-level simulation of `N` users.
//!
//! Each slot runs, in order:
//!
//! 1. for every busy class (in class order) one Bernoulli draw with
//!    probability `1/L` or `1/Lc` ends the activity of all its active users,
//!    which move to `S(n)` after a success and `C(n)` after a collision;
//! 2. every idle user (in index order) whose class is clear to send attempts
//!    with probability `p_n / N`;
//! 3. an attempter collides when another user of its own class or of an
//!    interfering class also attempted, otherwise it succeeds.
//!
//! Statistics are accumulated over the state after each slot, once the
//! burn-in slots are over, and are time-weighted so they only need updating
//! when something changes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::env::{self, KernelMode, Topology, COLLISION, IDLE, SUCCESS};
use crate::error::{Error, Result};
use crate::model::{NetworkSpec, RhoVector};
use crate::scalar::round_sig12;

/// Largest environment state space for which the joint (user state, z)
/// occupation table is kept.
const OCCUPATION_STATE_CAP: usize = 729;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassAssignment {
    /// `floor(mu_c N)` users per class, remainders to the largest fractional parts.
    #[default]
    Deterministic,
    /// Each user's class drawn independently from `mu`.
    Iid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_users: usize,
    /// Mean-field horizon; the run lasts `ceil(horizon N)` slots.
    pub horizon: f64,
    pub seed: u64,
    /// Fraction of slots discarded before averaging.
    pub burn_in: f64,
    pub assignment: ClassAssignment,
    /// Per-class level distribution for the initial levels; all at level 0 when absent.
    pub initial_levels: Option<Vec<Vec<f64>>>,
    /// Users whose joint level occupancy is tracked.
    pub tagged: Option<(usize, usize)>,
    /// Multiplies every attempt probability.
    pub attempt_scale: f64,
    /// Record `z` every this many slots.
    pub trace_stride: Option<u64>,
}

impl SimConfig {
    pub fn new(n_users: usize, horizon: f64, seed: u64) -> Self {
        SimConfig {
            n_users,
            horizon,
            seed,
            burn_in: 0.2,
            assignment: ClassAssignment::Deterministic,
            initial_levels: None,
            tagged: Some((0, 1)),
            attempt_scale: 1.0,
            trace_stride: None,
        }
    }

    pub fn total_slots(&self) -> u64 {
        (self.horizon * self.n_users as f64).ceil() as u64
    }
}

/// Time-weighted joint occupancy of two level-valued processes.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTable {
    levels: usize,
    joint: Vec<f64>,
    weight: f64,
}

impl PairTable {
    pub fn new(levels: usize) -> Self {
        PairTable {
            levels,
            joint: vec![0.0; levels * levels],
            weight: 0.0,
        }
    }

    /// Builds a table from paired samples with unit weight each.
    pub fn from_samples(levels: usize, samples: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut t = PairTable::new(levels);
        for (a, b) in samples {
            t.add(a, b, 1.0);
        }
        t
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    #[inline]
    fn add(&mut self, a: usize, b: usize, w: f64) {
        self.joint[a * self.levels + b] += w;
        self.weight += w;
    }

    pub fn probability(&self, a: usize, b: usize) -> f64 {
        if self.weight == 0.0 {
            0.0
        } else {
            self.joint[a * self.levels + b] / self.weight
        }
    }

    fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let mut row = vec![0.0; self.levels];
        let mut col = vec![0.0; self.levels];
        for a in 0..self.levels {
            for b in 0..self.levels {
                let p = self.probability(a, b);
                row[a] += p;
                col[b] += p;
            }
        }
        (row, col)
    }
}

/// `sum_{a,b} |P(a,b) - P(a) P(b)|` for a pair table.
pub fn chaos_metric(table: &PairTable) -> f64 {
    let (row, col) = table.marginals();
    let mut s = 0.0;
    for a in 0..table.levels {
        for b in 0..table.levels {
            s += (table.probability(a, b) - row[a] * col[b]).abs();
        }
    }
    s
}

/// Summary of a run. Averages cover the post-burn-in slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub seed: u64,
    pub n_users: usize,
    pub horizon: f64,
    pub slots: u64,
    pub burn_in_slots: u64,
    pub class_counts: Vec<usize>,
    /// Fraction of slots with `z_c = 1`.
    pub ghat: Vec<f64>,
    /// Fraction of slots with `z_c = 2`.
    pub collision_share: Vec<f64>,
    /// Time-averaged fraction of all users at (class, level).
    pub q_hat: Vec<Vec<f64>>,
    pub rho_hat: Vec<f64>,
    /// Pooled over all ordered pairs of distinct users within each class.
    pub class_pairs: Vec<PairTable>,
    pub tagged: Option<PairTable>,
    /// `occupation[(c * levels + n) * states + z]`: user-slots at (c, n) while the environment was `z`.
    pub occupation: Option<Vec<f64>>,
    /// Average number of users changing level per slot, divided by `N`.
    pub transition_rate: f64,
    /// Average over slots of `k (k - 1) / (N (N - 1))`, `k` users changing level.
    pub pair_transition_rate: f64,
    pub trace: Vec<(u64, Vec<u8>)>,
    pub warnings: Vec<String>,
}

impl SimReport {
    pub fn n_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn n_levels(&self) -> usize {
        self.q_hat.first().map_or(0, |r| r.len())
    }

    /// `ghat_c` divided by the population share of class `c`.
    pub fn ghat_per_user(&self) -> Vec<f64> {
        self.ghat
            .iter()
            .zip(&self.class_counts)
            .map(|(&g, &k)| if k > 0 { g * self.n_users as f64 / k as f64 } else { 0.0 })
            .collect()
    }

    pub fn to_json(&self) -> Value {
        let r = |xs: &[f64]| -> Vec<f64> { xs.iter().map(|&x| round_sig12(x)).collect() };
        json!({
            "seed": self.seed,
            "n_users": self.n_users,
            "horizon": round_sig12(self.horizon),
            "slots": self.slots,
            "burn_in_slots": self.burn_in_slots,
            "class_counts": self.class_counts,
            "ghat": r(&self.ghat),
            "ghat_per_user": r(&self.ghat_per_user()),
            "collision_share": r(&self.collision_share),
            "rho_hat": r(&self.rho_hat),
            "Q_hat": self.q_hat.iter().map(|row| r(row)).collect::<Vec<_>>(),
            "transition_rate": round_sig12(self.transition_rate),
            "pair_transition_rate": round_sig12(self.pair_transition_rate),
            "chaos_tagged": self.tagged.as_ref().map(|t| round_sig12(chaos_metric(t))),
            "chaos_pooled": r(&self.class_pairs.iter().map(chaos_metric).collect::<Vec<_>>()),
            "warnings": self.warnings,
        })
    }

    /// Writes the recorded `z` trace as `slot,<class>...` rows.
    pub fn write_trace_csv<W: Write>(&self, classes: &[String], w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["slot".to_string()];
        header.extend(classes.iter().cloned());
        out.write_record(&header)?;
        for (slot, z) in &self.trace {
            let mut rec = vec![slot.to_string()];
            rec.extend(z.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// The `N`-user system.
#[derive(Debug, Clone)]
pub struct SimState {
    spec: NetworkSpec<f64>,
    topo: Topology,
    cfg: SimConfig,
    rng: ChaCha8Rng,
    class: Vec<usize>,
    level: Vec<usize>,
    phase: Vec<u8>,
    active: Vec<Vec<usize>>,
    z: Vec<u8>,
    counts: Vec<Vec<usize>>,
    class_counts: Vec<usize>,
    attempt_prob: Vec<f64>,
    slot: u64,
    total_slots: u64,
    burn_in_slots: u64,
    // accumulators
    pending: u64,
    measured: u64,
    success_slots: Vec<f64>,
    collision_slots: Vec<f64>,
    occupancy: Vec<Vec<f64>>,
    class_pairs: Vec<PairTable>,
    tagged: Option<PairTable>,
    occupation: Option<Vec<f64>>,
    transitions: f64,
    pair_transitions: f64,
    trace: Vec<(u64, Vec<u8>)>,
    warnings: Vec<String>,
}

fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / wsum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rest = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if weights[i] > 0.0 {
            out[i] += 1;
            rest -= 1;
        }
    }
    out
}

impl SimState {
    pub fn new(spec: &NetworkSpec<f64>, cfg: &SimConfig) -> Result<Self> {
        if cfg.n_users == 0 {
            return Err(Error::InvalidArgument("the simulation needs at least one user".into()));
        }
        if !(cfg.horizon > 0.0) || !cfg.horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {}",
                cfg.horizon
            )));
        }
        if !(0.0..1.0).contains(&cfg.burn_in) {
            return Err(Error::InvalidArgument(format!(
                "burn-in must lie in [0,1), got {}",
                cfg.burn_in
            )));
        }
        if !(cfg.attempt_scale >= 0.0) {
            return Err(Error::InvalidArgument("attempt scale must be >= 0".into()));
        }
        let n = cfg.n_users;
        let n_classes = spec.n_classes();
        let n_levels = spec.n_levels();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut warnings = Vec::new();

        let class: Vec<usize> = match cfg.assignment {
            ClassAssignment::Deterministic => {
                let counts = largest_remainder(&spec.mu, n);
                let empty: Vec<&str> = (0..n_classes)
                    .filter(|&c| spec.mu[c] > 0.0 && counts[c] == 0)
                    .map(|c| spec.classes[c].as_str())
                    .collect();
                if !empty.is_empty() {
                    warnings.push(format!("no users assigned to class(es) {}", empty.join(", ")));
                }
                counts
                    .iter()
                    .enumerate()
                    .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
                    .collect()
            }
            ClassAssignment::Iid => (0..n)
                .map(|_| {
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    for (c, &m) in spec.mu.iter().enumerate() {
                        acc += m;
                        if u < acc {
                            return c;
                        }
                    }
                    (0..n_classes).rev().find(|&c| spec.mu[c] > 0.0).unwrap_or(0)
                })
                .collect(),
        };
        let mut class_counts = vec![0; n_classes];
        for &c in &class {
            class_counts[c] += 1;
        }

        let mut level = vec![0usize; n];
        if let Some(init) = &cfg.initial_levels {
            if init.len() != n_classes || init.iter().any(|r| r.len() != n_levels) {
                return Err(Error::Dimension(format!(
                    "initial levels must be {n_classes}x{n_levels}"
                )));
            }
            for c in 0..n_classes {
                let per_level = largest_remainder(&init[c], class_counts[c]);
                let mut levels = per_level
                    .iter()
                    .enumerate()
                    .flat_map(|(l, &k)| std::iter::repeat_n(l, k));
                for (u, lv) in level.iter_mut().enumerate() {
                    if class[u] == c {
                        *lv = levels.next().unwrap_or(0);
                    }
                }
            }
        }
        let mut counts = vec![vec![0usize; n_levels]; n_classes];
        for u in 0..n {
            counts[class[u]][level[u]] += 1;
        }

        let total_slots = cfg.total_slots();
        let burn_in_slots = (cfg.burn_in * total_slots as f64).floor() as u64;
        let states = 3usize.pow(n_classes as u32);
        let occupation = (states <= OCCUPATION_STATE_CAP).then(|| vec![0.0; n_classes * n_levels * states]);
        let tagged = match cfg.tagged {
            Some((i, j)) if i != j && i < n && j < n => Some(PairTable::new(n_levels)),
            Some(_) if n >= 2 => {
                return Err(Error::InvalidArgument(
                    "tagged users must be two distinct valid indices".into(),
                ))
            }
            _ => None,
        };
        let attempt_prob = spec
            .policy
            .probabilities()
            .iter()
            .map(|&p| p / n as f64 * cfg.attempt_scale)
            .collect();

        Ok(SimState {
            spec: spec.clone(),
            topo: Topology::new(spec),
            cfg: cfg.clone(),
            rng,
            class,
            level,
            phase: vec![IDLE; n],
            active: vec![Vec::new(); n_classes],
            z: vec![IDLE; n_classes],
            counts,
            class_counts,
            attempt_prob,
            slot: 0,
            total_slots,
            burn_in_slots,
            pending: 0,
            measured: 0,
            success_slots: vec![0.0; n_classes],
            collision_slots: vec![0.0; n_classes],
            occupancy: vec![vec![0.0; n_levels]; n_classes],
            class_pairs: vec![PairTable::new(n_levels); n_classes],
            tagged,
            occupation,
            transitions: 0.0,
            pair_transitions: 0.0,
            trace: Vec::new(),
            warnings,
        })
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn user(&self, i: usize) -> (usize, usize, u8) {
        (self.class[i], self.level[i], self.phase[i])
    }

    /// `z` agrees with the user phases.
    pub fn is_consistent(&self) -> bool {
        (0..self.z.len()).all(|c| {
            let users: Vec<usize> = (0..self.phase.len())
                .filter(|&u| self.class[u] == c && self.phase[u] != IDLE)
                .collect();
            let expected = match users.len() {
                0 => IDLE,
                1 if self.phase[users[0]] == SUCCESS => SUCCESS,
                _ => COLLISION,
            };
            let phases_match = users.iter().all(|&u| self.phase[u] == self.z[c]);
            expected == self.z[c] && phases_match && users.len() == self.active[c].len()
        })
    }

    /// Adds the slots held in `pending` to every accumulator.
    fn flush(&mut self) {
        if self.pending == 0 {
            return;
        }
        let w = self.pending as f64;
        self.pending = 0;
        let n_levels = self.spec.n_levels();
        let z_index = env::encode(&self.z);
        let states = 3usize.pow(self.z.len() as u32);
        for c in 0..self.z.len() {
            match self.z[c] {
                SUCCESS => self.success_slots[c] += w,
                COLLISION => self.collision_slots[c] += w,
                _ => {}
            }
            let occupied: Vec<(usize, f64)> = self.counts[c]
                .iter()
                .enumerate()
                .filter(|(_, &k)| k > 0)
                .map(|(l, &k)| (l, k as f64))
                .collect();
            for &(l, k) in &occupied {
                self.occupancy[c][l] += k * w;
                if let Some(table) = self.occupation.as_mut() {
                    table[(c * n_levels + l) * states + z_index] += k * w;
                }
            }
            let k_c = self.class_counts[c] as f64;
            if k_c >= 2.0 {
                let pairs = &mut self.class_pairs[c];
                let norm = w / (k_c * (k_c - 1.0));
                for &(a, na) in &occupied {
                    for &(b, nb) in &occupied {
                        let same = if a == b { na } else { 0.0 };
                        pairs.joint[a * n_levels + b] += (na * nb - same) * norm;
                    }
                }
                pairs.weight += w;
            }
        }
        if let (Some(table), Some((i, j))) = (self.tagged.as_mut(), self.cfg.tagged) {
            table.add(self.level[i], self.level[j], w);
        }
    }

    /// Advances one slot.
    pub fn step(&mut self) {
        self.slot += 1;
        let n_classes = self.z.len();
        let mut changed = 0usize;

        // departures, one draw per busy class
        for c in 0..n_classes {
            let state = self.z[c];
            if state == IDLE {
                continue;
            }
            let q = if state == SUCCESS {
                1.0 / self.spec.l_success
            } else {
                1.0 / self.spec.l_collision
            };
            if self.rng.gen::<f64>() < q {
                self.flush();
                let users = std::mem::take(&mut self.active[c]);
                for &u in &users {
                    let from = self.level[u];
                    let to = if state == SUCCESS {
                        self.spec.policy.success(from)
                    } else {
                        self.spec.policy.collision(from)
                    };
                    self.counts[c][from] -= 1;
                    self.counts[c][to] += 1;
                    self.level[u] = to;
                    self.phase[u] = IDLE;
                    changed += 1;
                }
                self.active[c] = users;
                self.active[c].clear();
                self.z[c] = IDLE;
            }
        }

        // attempts on the post-departure state
        let clear: Vec<bool> = (0..n_classes).map(|c| self.topo.clear_to_send(&self.z, c)).collect();
        if clear.iter().any(|&b| b) {
            let mut attempters: Vec<usize> = Vec::new();
            let mut per_class = vec![0usize; n_classes];
            for u in 0..self.class.len() {
                let c = self.class[u];
                if clear[c] && self.phase[u] == IDLE && self.rng.gen::<f64>() < self.attempt_prob[self.level[u]] {
                    attempters.push(u);
                    per_class[c] += 1;
                }
            }
            if !attempters.is_empty() {
                self.flush();
                for &u in &attempters {
                    let c = self.class[u];
                    let interfered = self.topo.interferers(c).iter().any(|&d| d != c && per_class[d] > 0);
                    let outcome = if per_class[c] == 1 && !interfered {
                        SUCCESS
                    } else {
                        COLLISION
                    };
                    self.phase[u] = outcome;
                    self.active[c].push(u);
                    self.z[c] = outcome;
                }
            }
        }

        if self.slot > self.burn_in_slots {
            self.pending += 1;
            self.measured += 1;
            let n = self.class.len() as f64;
            let k = changed as f64;
            self.transitions += k / n;
            if n > 1.0 {
                self.pair_transitions += k * (k - 1.0) / (n * (n - 1.0));
            }
        }
        if let Some(stride) = self.cfg.trace_stride {
            if stride > 0 && self.slot.is_multiple_of(stride) {
                self.trace.push((self.slot, self.z.clone()));
            }
        }
    }

    /// Runs the remaining slots of the configured horizon.
    pub fn run(mut self) -> SimReport {
        while self.slot < self.total_slots {
            self.step();
        }
        self.report()
    }

    /// Summary of the slots simulated so far.
    pub fn report(&mut self) -> SimReport {
        self.flush();
        let m = self.measured.max(1) as f64;
        let n = self.class.len() as f64;
        let q_hat: Vec<Vec<f64>> = self
            .occupancy
            .iter()
            .map(|row| row.iter().map(|&v| v / (m * n)).collect())
            .collect();
        let probs = self.spec.policy.probabilities();
        let rho_hat = q_hat
            .iter()
            .map(|row| row.iter().zip(probs).map(|(q, p)| q * p).sum())
            .collect();
        SimReport {
            seed: self.cfg.seed,
            n_users: self.class.len(),
            horizon: self.cfg.horizon,
            slots: self.slot,
            burn_in_slots: self.burn_in_slots.min(self.slot),
            class_counts: self.class_counts.clone(),
            ghat: self.success_slots.iter().map(|&s| s / m).collect(),
            collision_share: self.collision_slots.iter().map(|&s| s / m).collect(),
            q_hat,
            rho_hat,
            class_pairs: self.class_pairs.clone(),
            tagged: self.tagged.clone(),
            occupation: self.occupation.clone(),
            transition_rate: self.transitions / m,
            pair_transition_rate: self.pair_transitions / m,
            trace: self.trace.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

/// Initializes and runs one simulation.
pub fn simulate(spec: &NetworkSpec<f64>, cfg: &SimConfig) -> Result<SimReport> {
    Ok(SimState::new(spec, cfg)?.run())
}

/// Per user state `x = (class, level)`: L1 distance between the empirical law
/// of `z` seen by users in `x` and the environment law at the empirical `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationCheck {
    /// `(class, level, share of user-slots, l1)`.
    pub per_state: Vec<(usize, usize, f64, f64)>,
    /// Share-weighted mean of the per-state distances.
    pub weighted: f64,
    /// Largest distance among states holding at least 1% of user-slots.
    pub max_common: f64,
}

pub fn occupation_check(report: &SimReport, spec: &NetworkSpec<f64>) -> Result<OccupationCheck> {
    let table = report
        .occupation
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("report carries no occupation table".into()))?;
    let n_classes = spec.n_classes();
    let n_levels = spec.n_levels();
    if report.n_classes() != n_classes || report.n_levels() != n_levels {
        return Err(Error::Dimension("report does not match the network".into()));
    }
    let states = 3usize.pow(n_classes as u32);
    let rho = RhoVector(report.rho_hat.clone());
    let (pi, _) = env::averages(&rho, spec, KernelMode::Consistent)?;
    let total: f64 = table.iter().sum();
    let mut per_state = Vec::new();
    let (mut weighted, mut max_common) = (0.0, 0.0f64);
    for c in 0..n_classes {
        for l in 0..n_levels {
            let row = &table[(c * n_levels + l) * states..(c * n_levels + l + 1) * states];
            let mass: f64 = row.iter().sum();
            if mass == 0.0 {
                continue;
            }
            let l1: f64 = row.iter().zip(&pi.pi).map(|(&v, &p)| (v / mass - p).abs()).sum();
            let share = mass / total;
            weighted += share * l1;
            if share >= 0.01 {
                max_common = max_common.max(l1);
            }
            per_state.push((c, l, share, l1));
        }
    }
    Ok(OccupationCheck {
        per_state,
        weighted,
        max_common,
    })
}
