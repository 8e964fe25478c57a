//! Network description, config ingestion and structural validation.
//!
//! A [`NetworkSpec`] is plain data: classes with their population shares,
//! the 0/1 interference matrix, protocol durations and the backoff policy.
//! Every other module takes a spec that passed [`validate_spec`].

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const DEFAULT_N_MAX: usize = 64;

/// Shares must sum to one within this before they are renormalized.
const MU_NORMALIZE_TOL: f64 = 1e-9;
/// Shares of a validated spec sum to one within this.
const MU_SUM_TOL: f64 = 1e-12;

/// Backoff levels and the level maps applied after a success or a collision.
///
/// Level `n` carries transmission probability `probability(n)`; probabilities
/// strictly decrease with the level index, so `success` moves toward level 0
/// and `collision` away from it.
#[derive(Debug, Clone, PartialEq)]
pub struct BackoffPolicy<T> {
    probabilities: Vec<T>,
    success_map: Vec<usize>,
    collision_map: Vec<usize>,
    exponential: bool,
}

impl<T: Real> BackoffPolicy<T> {
    /// Binary exponential backoff: `p_n = p0 2^-n`, success resets to level 0,
    /// collision halves the probability and saturates at `n_max`.
    pub fn exponential(p0: T, n_max: usize) -> Self {
        let half = T::lit(0.5);
        let mut probabilities = Vec::with_capacity(n_max + 1);
        let mut p = p0;
        for _ in 0..=n_max {
            probabilities.push(p);
            p = p * half;
        }
        BackoffPolicy {
            probabilities,
            success_map: vec![0; n_max + 1],
            collision_map: (0..=n_max).map(|n| (n + 1).min(n_max)).collect(),
            exponential: true,
        }
    }

    /// Arbitrary policy; checked by [`validate_spec`], not here.
    pub fn custom(probabilities: Vec<T>, success_map: Vec<usize>, collision_map: Vec<usize>) -> Self {
        BackoffPolicy {
            probabilities,
            success_map,
            collision_map,
            exponential: false,
        }
    }

    pub fn is_exponential(&self) -> bool {
        self.exponential
    }

    pub fn n_levels(&self) -> usize {
        self.probabilities.len()
    }

    pub fn probabilities(&self) -> &[T] {
        &self.probabilities
    }

    #[inline]
    pub fn probability(&self, level: usize) -> T {
        self.probabilities[level]
    }

    #[inline]
    pub fn success(&self, level: usize) -> usize {
        self.success_map[level]
    }

    #[inline]
    pub fn collision(&self, level: usize) -> usize {
        self.collision_map[level]
    }

    pub fn success_map(&self) -> &[usize] {
        &self.success_map
    }

    pub fn collision_map(&self) -> &[usize] {
        &self.collision_map
    }

    pub fn cast<U: Real>(&self) -> BackoffPolicy<U> {
        BackoffPolicy {
            probabilities: self.probabilities.iter().map(|p| U::lit(p.as_f64())).collect(),
            success_map: self.success_map.clone(),
            collision_map: self.collision_map.clone(),
            exponential: self.exponential,
        }
    }
}

/// A class-structured CSMA network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec<T> {
    pub classes: Vec<String>,
    /// Population share of each class.
    pub mu: Vec<T>,
    /// `adjacency[c][d]` is true when class-`d` links interfere with class `c`.
    pub adjacency: Vec<Vec<bool>>,
    pub p0: T,
    /// Mean successful transmission duration, in slots.
    pub l_success: T,
    /// Mean collision duration, in slots.
    pub l_collision: T,
    pub policy: BackoffPolicy<T>,
    pub n_max: usize,
}

impl<T: Real> NetworkSpec<T> {
    /// Builds an exponential-backoff spec and validates it.
    pub fn exponential(
        classes: Vec<String>,
        mu: Vec<T>,
        adjacency: Vec<Vec<bool>>,
        p0: T,
        l_success: T,
        l_collision: T,
        n_max: usize,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            classes,
            mu,
            adjacency,
            p0,
            l_success,
            l_collision,
            policy: BackoffPolicy::exponential(p0, n_max),
            n_max,
        };
        spec.validated()
    }

    /// One class, full interference.
    pub fn single_class(p0: T, l_success: T, l_collision: T, n_max: usize) -> Result<Self> {
        Self::exponential(
            vec!["1".into()],
            vec![T::one()],
            vec![vec![true]],
            p0,
            l_success,
            l_collision,
            n_max,
        )
    }

    /// The three-class chain 1 - 2 - 3: classes 1 and 3 do not interfere,
    /// class 2 interferes with everyone.
    pub fn chain3(mu: [T; 3], p0: T, l_success: T, l_collision: T, n_max: usize) -> Result<Self> {
        Self::exponential(
            vec!["1".into(), "2".into(), "3".into()],
            mu.to_vec(),
            vec![vec![true, true, false], vec![true, true, true], vec![false, true, true]],
            p0,
            l_success,
            l_collision,
            n_max,
        )
    }

    pub fn validated(self) -> Result<Self> {
        let violations = validate_spec(&self);
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidSpec(violations))
        }
    }

    #[inline]
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    #[inline]
    pub fn n_levels(&self) -> usize {
        self.policy.n_levels()
    }

    /// `V_c`: classes whose links interfere with class `c`, including `c`.
    pub fn interferers(&self, c: usize) -> Vec<usize> {
        (0..self.n_classes()).filter(|&d| self.adjacency[c][d]).collect()
    }

    pub fn is_full_interference(&self) -> bool {
        self.adjacency.iter().all(|row| row.iter().all(|&a| a))
    }

    /// Same network with new class shares.
    pub fn with_mu(&self, mu: Vec<T>) -> Result<Self> {
        NetworkSpec { mu, ..self.clone() }.validated()
    }

    /// Same network with new mean durations.
    pub fn with_durations(&self, l_success: T, l_collision: T) -> Result<Self> {
        NetworkSpec {
            l_success,
            l_collision,
            ..self.clone()
        }
        .validated()
    }

    /// Same network with a new maximal probability; custom levels are rescaled.
    pub fn with_p0(&self, p0: T) -> Result<Self> {
        let policy = if self.policy.is_exponential() {
            BackoffPolicy::exponential(p0, self.n_max)
        } else {
            let scale = p0 / self.p0;
            BackoffPolicy::custom(
                self.policy.probabilities().iter().map(|&p| p * scale).collect(),
                self.policy.success_map().to_vec(),
                self.policy.collision_map().to_vec(),
            )
        };
        NetworkSpec {
            p0,
            policy,
            ..self.clone()
        }
        .validated()
    }

    pub fn cast<U: Real>(&self) -> NetworkSpec<U> {
        NetworkSpec {
            classes: self.classes.clone(),
            mu: self.mu.iter().map(|m| U::lit(m.as_f64())).collect(),
            adjacency: self.adjacency.clone(),
            p0: U::lit(self.p0.as_f64()),
            l_success: U::lit(self.l_success.as_f64()),
            l_collision: U::lit(self.l_collision.as_f64()),
            policy: self.policy.cast(),
            n_max: self.n_max,
        }
    }

    /// Config document describing this spec; optional fields are written out.
    pub fn to_document(&self) -> SpecDocument {
        let policy = if self.policy.is_exponential() {
            PolicyDocument::Named("exponential".into())
        } else {
            PolicyDocument::Custom(CustomPolicyDocument {
                levels: self.policy.probabilities().iter().map(|p| p.as_f64()).collect(),
                success_map: self.policy.success_map().to_vec(),
                collision_map: self.policy.collision_map().to_vec(),
            })
        };
        SpecDocument {
            classes: self.classes.clone(),
            mu: self.mu.iter().map(|m| m.as_f64()).collect(),
            adjacency: self
                .adjacency
                .iter()
                .map(|row| row.iter().map(|&a| a as u8).collect())
                .collect(),
            p0: self.p0.as_f64(),
            l: self.l_success.as_f64(),
            lc: Some(self.l_collision.as_f64()),
            policy,
            n_max: Some(self.n_max),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }
}

/// On-disk config layout. Field names are fixed; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    pub classes: Vec<String>,
    pub mu: Vec<f64>,
    pub adjacency: Vec<Vec<u8>>,
    pub p0: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "Lc", default, skip_serializing_if = "Option::is_none")]
    pub lc: Option<f64>,
    pub policy: PolicyDocument,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyDocument {
    Named(String),
    Custom(CustomPolicyDocument),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomPolicyDocument {
    pub levels: Vec<f64>,
    pub success_map: Vec<usize>,
    pub collision_map: Vec<usize>,
}

impl SpecDocument {
    /// Converts to a spec, renormalizing shares that are within 1e-9 of one.
    pub fn into_spec(self) -> Result<NetworkSpec<f64>> {
        let mut violations = Vec::new();

        let mut mu = self.mu;
        let total: f64 = mu.iter().sum();
        let off = (total - 1.0).abs();
        if mu.iter().all(|m| m.is_finite() && *m >= 0.0) && off > MU_SUM_TOL && off <= MU_NORMALIZE_TOL {
            for m in mu.iter_mut() {
                *m /= total;
            }
        }

        if self.adjacency.iter().flatten().any(|&a| a > 1) {
            violations.push("adjacency: entries must be 0 or 1".to_string());
        }
        let adjacency: Vec<Vec<bool>> = self
            .adjacency
            .iter()
            .map(|row| row.iter().map(|&a| a == 1).collect())
            .collect();

        let lc = self.lc.unwrap_or(self.l);
        let (policy, n_max) = match self.policy {
            PolicyDocument::Named(name) if name == "exponential" => {
                let n_max = self.n_max.unwrap_or(DEFAULT_N_MAX);
                (BackoffPolicy::exponential(self.p0, n_max), n_max)
            }
            PolicyDocument::Named(name) => {
                return Err(Error::Parse(format!("unknown policy \"{}\"", name)));
            }
            PolicyDocument::Custom(custom) => {
                let implied = custom.levels.len().saturating_sub(1);
                if let Some(n) = self.n_max {
                    if n != implied {
                        violations.push(format!(
                            "n_max: custom policy has {} levels but n_max is {}",
                            custom.levels.len(),
                            n
                        ));
                    }
                }
                (
                    BackoffPolicy::custom(custom.levels, custom.success_map, custom.collision_map),
                    implied,
                )
            }
        };

        let spec = NetworkSpec {
            classes: self.classes,
            mu,
            adjacency,
            p0: self.p0,
            l_success: self.l,
            l_collision: lc,
            policy,
            n_max,
        };
        violations.extend(validate_spec(&spec));
        if violations.is_empty() {
            Ok(spec)
        } else {
            Err(Error::InvalidSpec(violations))
        }
    }
}

/// Parses a JSON config document into a validated spec.
pub fn load_spec(source: &str) -> Result<NetworkSpec<f64>> {
    let doc: SpecDocument = serde_json::from_str(source).map_err(|e| Error::Parse(e.to_string()))?;
    doc.into_spec()
}

pub fn load_spec_file(path: impl AsRef<std::path::Path>) -> Result<NetworkSpec<f64>> {
    let text = std::fs::read_to_string(path)?;
    load_spec(&text)
}

/// Lists every broken structural invariant; empty means the network is valid.
pub fn validate_spec<T: Real>(spec: &NetworkSpec<T>) -> Vec<String> {
    let mut v = Vec::new();
    let n = spec.classes.len();

    if n == 0 {
        v.push("classes: at least one class is required".to_string());
    }
    for (i, name) in spec.classes.iter().enumerate() {
        if spec.classes[..i].contains(name) {
            v.push(format!("classes: duplicate class \"{}\"", name));
        }
    }

    if spec.mu.len() != n {
        v.push(format!("mu: expected {} entries, got {}", n, spec.mu.len()));
    }
    if spec.mu.iter().any(|m| !m.is_finite() || *m < T::zero()) {
        v.push("mu: entries must be finite and >= 0".to_string());
    }
    let total: f64 = spec.mu.iter().map(|m| m.as_f64()).sum();
    if (total - 1.0).abs() > MU_SUM_TOL.max(4.0 * T::epsilon().as_f64()) {
        v.push(format!("mu: must sum to 1 (sum is {})", total));
    }

    if spec.adjacency.len() != n || spec.adjacency.iter().any(|row| row.len() != n) {
        v.push(format!("adjacency: must be a {n}x{n} matrix"));
    } else if (0..n).any(|c| !spec.adjacency[c][c]) {
        v.push("adjacency: A_cc must be 1".to_string());
    }

    if !(spec.p0 > T::zero() && spec.p0 <= T::one()) {
        v.push("p0: must lie in (0,1]".to_string());
    }
    if !(spec.l_success >= T::one()) {
        v.push("L: must be >= 1".to_string());
    }
    if !(spec.l_collision >= T::one()) {
        v.push("Lc: must be >= 1".to_string());
    }

    let policy = &spec.policy;
    let levels = policy.n_levels();
    if levels != spec.n_max + 1 {
        v.push(format!(
            "policy: expected n_max+1 = {} levels, got {}",
            spec.n_max + 1,
            levels
        ));
    }
    if levels == 0 {
        v.push("policy: at least one level is required".to_string());
        return v;
    }
    if policy.probability(0) != spec.p0 {
        v.push("policy: level 0 must carry probability p0".to_string());
    }
    let probs = policy.probabilities();
    if probs.iter().any(|&p| !(p > T::zero() && p <= spec.p0)) {
        v.push("policy: level probabilities must lie in (0, p0]".to_string());
    }
    if probs.windows(2).any(|w| w[1] >= w[0]) {
        v.push("policy: level probabilities must be strictly decreasing".to_string());
    }
    if policy.success_map().len() != levels || policy.collision_map().len() != levels {
        v.push("policy: success_map and collision_map need one entry per level".to_string());
    } else {
        if policy.success_map().iter().enumerate().any(|(n, &s)| s > n) {
            v.push("policy: success_map must not lower the transmission probability".to_string());
        }
        if policy
            .collision_map()
            .iter()
            .enumerate()
            .any(|(n, &c)| c < n || c >= levels)
        {
            v.push("policy: collision_map must not raise the transmission probability".to_string());
        }
    }
    v
}

/// Per-class attempt intensity `rho_c = sum_n p_n Q_c^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoVector<T>(pub Vec<T>);

impl<T> Deref for RhoVector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T: Real> RhoVector<T> {
    pub fn zeros(n_classes: usize) -> Self {
        RhoVector(vec![T::zero(); n_classes])
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.iter()
            .zip(other.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Mass of users per (class, backoff level).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMixture<T> {
    q: Vec<Vec<T>>,
}

impl<T: Real> ClassMixture<T> {
    pub fn new(q: Vec<Vec<T>>) -> Self {
        ClassMixture { q }
    }

    pub fn zeros(n_classes: usize, n_levels: usize) -> Self {
        ClassMixture {
            q: vec![vec![T::zero(); n_levels]; n_classes],
        }
    }

    /// Every user at level 0.
    pub fn at_level_zero(spec: &NetworkSpec<T>) -> Self {
        let mut mix = Self::zeros(spec.n_classes(), spec.n_levels());
        for (c, &m) in spec.mu.iter().enumerate() {
            mix.q[c][0] = m;
        }
        mix
    }

    pub fn n_classes(&self) -> usize {
        self.q.len()
    }

    pub fn n_levels(&self) -> usize {
        self.q.first().map_or(0, |r| r.len())
    }

    pub fn class(&self, c: usize) -> &[T] {
        &self.q[c]
    }

    pub fn class_mut(&mut self, c: usize) -> &mut [T] {
        &mut self.q[c]
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.q
    }

    pub fn into_rows(self) -> Vec<Vec<T>> {
        self.q
    }

    #[inline]
    pub fn get(&self, c: usize, n: usize) -> T {
        self.q[c][n]
    }

    pub fn class_mass(&self, c: usize) -> T {
        self.q[c].iter().copied().sum()
    }

    /// `a * self + b * other`, elementwise.
    pub fn axpby(&self, a: T, other: &Self, b: T) -> Self {
        ClassMixture {
            q: self
                .q
                .iter()
                .zip(&other.q)
                .map(|(x, y)| x.iter().zip(y).map(|(&x, &y)| a * x + b * y).collect())
                .collect(),
        }
    }

    /// Half the L1 distance, summed over all classes and levels.
    pub fn total_variation(&self, other: &Self) -> T {
        let s: T = self
            .q
            .iter()
            .zip(&other.q)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(&x, &y)| (x - y).abs()))
            .sum();
        s * T::lit(0.5)
    }

    fn check_shape(&self, spec: &NetworkSpec<T>) -> Result<()> {
        if self.n_classes() != spec.n_classes() || self.q.iter().any(|r| r.len() != spec.n_levels()) {
            return Err(Error::Dimension(format!(
                "mixture is {}x{}, spec needs {}x{}",
                self.n_classes(),
                self.n_levels(),
                spec.n_classes(),
                spec.n_levels()
            )));
        }
        Ok(())
    }

    /// Violations of nonnegativity and per-class mass `mu_c`, within `tol`.
    pub fn check(&self, spec: &NetworkSpec<T>, tol: T) -> Result<Vec<String>> {
        self.check_shape(spec)?;
        let mut v = Vec::new();
        for c in 0..self.n_classes() {
            if self.q[c].iter().any(|&x| !(x >= T::zero())) {
                v.push(format!("class {}: negative or NaN mass", spec.classes[c]));
            }
            let m = self.class_mass(c);
            if (m - spec.mu[c]).abs() > tol {
                v.push(format!(
                    "class {}: mass {} differs from mu {}",
                    spec.classes[c], m, spec.mu[c]
                ));
            }
        }
        Ok(v)
    }
}

/// `rho_c = sum_n p_n Q_c^n`.
pub fn rho_of<T: Real>(mix: &ClassMixture<T>, spec: &NetworkSpec<T>) -> Result<RhoVector<T>> {
    mix.check_shape(spec)?;
    let probs = spec.policy.probabilities();
    Ok(RhoVector(
        mix.rows()
            .iter()
            .map(|row| row.iter().zip(probs).map(|(&q, &p)| q * p).sum())
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CHAIN: &str = r#"{
        "classes": ["1", "2", "3"],
        "mu": [0.3333333333333333, 0.3333333333333333, 0.3333333333333334],
        "adjacency": [[1, 1, 0], [1, 1, 1], [0, 1, 1]],
        "p0": 0.0625,
        "L": 100,
        "Lc": 100,
        "policy": "exponential"
    }"#;

    #[test]
    fn loads_chain_config() {
        let spec = load_spec(CHAIN).unwrap();
        assert_eq!(spec.n_classes(), 3);
        assert!(!spec.adjacency[0][2] && !spec.adjacency[2][0]);
        assert!(spec.adjacency[1].iter().all(|&a| a));
        assert_eq!(spec.n_max, DEFAULT_N_MAX);
        assert_eq!(spec.l_collision, 100.0);
        assert_eq!(spec.interferers(0), vec![0, 1]);
        assert_eq!(spec.interferers(1), vec![0, 1, 2]);
        assert!(validate_spec(&spec).is_empty());
    }

    #[test]
    fn lc_defaults_to_l() {
        let spec = load_spec(
            r#"{"classes":["a"],"mu":[1],"adjacency":[[1]],"p0":0.5,"L":7,"policy":"exponential","n_max":3}"#,
        )
        .unwrap();
        assert_eq!(spec.l_collision, 7.0);
        assert_eq!(spec.n_levels(), 4);
        assert!(spec.is_full_interference());
    }

    #[test]
    fn rejects_bad_mu_sum() {
        let err = load_spec(
            r#"{"classes":["a","b"],"mu":[0.5,0.4],"adjacency":[[1,1],[1,1]],"p0":0.5,"L":2,"policy":"exponential"}"#,
        )
        .unwrap_err();
        match err {
            Error::InvalidSpec(v) => assert!(v.iter().any(|s| s.starts_with("mu:"))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn renormalizes_nearly_unit_mu() {
        let spec = load_spec(
            r#"{"classes":["a","b"],"mu":[0.5,0.5000000001],"adjacency":[[1,1],[1,1]],"p0":0.5,"L":2,"policy":"exponential"}"#,
        )
        .unwrap();
        assert!((spec.mu.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_unknown_keys_and_policies() {
        assert!(matches!(
            load_spec(
                r#"{"classes":["a"],"mu":[1],"adjacency":[[1]],"p0":0.5,"L":2,"policy":"exponential","extra":1}"#
            ),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            load_spec(r#"{"classes":["a"],"mu":[1],"adjacency":[[1]],"p0":0.5,"L":2,"policy":"linear"}"#),
            Err(Error::Parse(_))
        ));
        assert!(matches!(load_spec("{not json"), Err(Error::Parse(_))));
    }

    #[test]
    fn self_interference_required() {
        let mut spec = NetworkSpec::<f64>::single_class(0.5, 2.0, 2.0, 4).unwrap();
        spec.adjacency[0][0] = false;
        assert_eq!(validate_spec(&spec), vec!["adjacency: A_cc must be 1".to_string()]);
    }

    #[test]
    fn p0_range() {
        let mut spec = NetworkSpec::<f64>::single_class(0.5, 2.0, 2.0, 4).unwrap();
        spec.p0 = 0.0;
        spec.policy = BackoffPolicy::exponential(0.0, 4);
        let v = validate_spec(&spec);
        assert!(v.contains(&"p0: must lie in (0,1]".to_string()), "{v:?}");
    }

    #[test]
    fn custom_policy_checks() {
        let ok = load_spec(
            r#"{"classes":["a"],"mu":[1],"adjacency":[[1]],"p0":0.5,"L":2,
                "policy":{"levels":[0.5,0.25,0.1],"success_map":[0,0,1],"collision_map":[1,2,2]}}"#,
        )
        .unwrap();
        assert_eq!(ok.n_max, 2);
        assert!(!ok.policy.is_exponential());

        let bad = load_spec(
            r#"{"classes":["a"],"mu":[1],"adjacency":[[1]],"p0":0.5,"L":2,
                "policy":{"levels":[0.5,0.25,0.1],"success_map":[0,2,1],"collision_map":[0,2,2]}}"#,
        );
        match bad {
            Err(Error::InvalidSpec(v)) => {
                assert!(v.iter().any(|s| s.contains("success_map")));
                assert!(v.iter().any(|s| s.contains("collision_map")) || v.len() == 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exponential_policy_shape() {
        let pol = BackoffPolicy::<f64>::exponential(1.0 / 16.0, 7);
        assert_eq!(pol.n_levels(), 8);
        assert_eq!(pol.probability(3), 1.0 / 128.0);
        assert_eq!(pol.success(5), 0);
        assert_eq!(pol.collision(6), 7);
        assert_eq!(pol.collision(7), 7);
    }

    #[test]
    fn rho_of_point_mass_and_zero() {
        let spec = load_spec(CHAIN).unwrap();
        let rho = rho_of(&ClassMixture::at_level_zero(&spec), &spec).unwrap();
        for c in 0..3 {
            assert_eq!(rho[c], spec.p0 * spec.mu[c]);
        }
        let zero = rho_of(&ClassMixture::zeros(3, spec.n_levels()), &spec).unwrap();
        assert!(zero.iter().all(|&r| r == 0.0));
        assert!(matches!(
            rho_of(&ClassMixture::zeros(2, 3), &spec),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rho_of_geometric_matches_partial_sum() {
        // Q^n = mu (1 - g) g^n at p0 2^-n; untruncated rho = p0 mu (1-g)/(1-g/2).
        let n_max = 200;
        let spec = NetworkSpec::<f64>::single_class(0.0625, 10.0, 10.0, n_max).unwrap();
        let g: f64 = 0.5;
        let mut row: Vec<f64> = (0..=n_max).map(|n| (1.0 - g) * g.powi(n as i32)).collect();
        let tail: f64 = 1.0 - row.iter().sum::<f64>();
        row[n_max] += tail;
        let rho = rho_of(&ClassMixture::new(vec![row]), &spec).unwrap()[0];
        let mut oracle = 0.0;
        for n in 0..10_000 {
            oracle += 0.0625 * 0.5f64.powi(n) * (1.0 - g) * g.powi(n);
        }
        assert!((rho - oracle).abs() < 1e-15, "{rho} vs {oracle}");
        assert!((oracle - 0.0625 * (1.0 - g) / (1.0 - g / 2.0)).abs() < 1e-15);
    }

    fn arb_spec() -> impl Strategy<Value = NetworkSpec<f64>> {
        (
            1usize..4,
            0.01f64..1.0,
            1.0f64..200.0,
            1.0f64..200.0,
            0usize..12,
            any::<u64>(),
        )
            .prop_map(|(n, p0, l, lc, n_max, bits)| {
                let mut raw: Vec<f64> = (0..n).map(|i| 1.0 + ((bits >> (i * 8)) & 0xff) as f64).collect();
                let s: f64 = raw.iter().sum();
                raw.iter_mut().for_each(|m| *m /= s);
                let adjacency = (0..n)
                    .map(|c| (0..n).map(|d| c == d || (bits >> (40 + c * 4 + d)) & 1 == 1).collect())
                    .collect();
                NetworkSpec {
                    classes: (0..n).map(|i| format!("c{i}")).collect(),
                    mu: raw,
                    adjacency,
                    p0,
                    l_success: l,
                    l_collision: lc,
                    policy: BackoffPolicy::exponential(p0, n_max),
                    n_max,
                }
            })
    }

    proptest! {
        #[test]
        fn document_round_trip(spec in arb_spec()) {
            prop_assume!(validate_spec(&spec).is_empty());
            let back = load_spec(&spec.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, spec);
        }

        #[test]
        fn rho_within_bounds(spec in arb_spec(), weights in proptest::collection::vec(0.0f64..1.0, 13)) {
            prop_assume!(validate_spec(&spec).is_empty());
            let levels = spec.n_levels();
            let rows = spec.mu.iter().map(|&m| {
                let w: Vec<f64> = (0..levels).map(|n| weights[n % weights.len()] + 1e-3).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|x| m * x / s).collect()
            }).collect();
            let rho = rho_of(&ClassMixture::new(rows), &spec).unwrap();
            for c in 0..spec.n_classes() {
                prop_assert!(rho[c] >= 0.0);
                prop_assert!(rho[c] <= spec.p0 * spec.mu[c] * (1.0 + 1e-12));
            }
        }
    }
}
