//! Dirichlet and categorical evidence math.
//!
//! Evidence vectors are sparse: only hypotheses with strictly positive mass
//! are stored, and every probability or entropy is computed over that
//! support. Absent hypotheses have probability zero. No prior pseudo-counts
//! are added.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvidenceError {
    #[error("no evidence")]
    NoEvidence,
    #[error("digamma domain error: {0} is not a positive finite number")]
    Domain(f64),
    #[error("invalid evidence mass {0}: must be positive and finite")]
    InvalidMass(f64),
}

/// Below this argument the recurrence is applied before the asymptotic series.
const ASYMPTOTIC_THRESHOLD: f64 = 10.0;

/// B_{2k} / (2k) for k = 1..=8.
const ASYMPTOTIC_COEFFS: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
    -3617.0 / 8160.0,
];

/// Digamma function ψ(x) for positive finite `x`.
///
/// Shifts `x` above 10 with ψ(x) = ψ(x+1) − 1/x and then sums the asymptotic
/// expansion ψ(x) ≈ ln x − 1/(2x) − Σ B_{2k}/(2k x^{2k}).
pub fn digamma(x: f64) -> Result<f64, EvidenceError> {
    if !(x.is_finite() && x > 0.0) {
        return Err(EvidenceError::Domain(x));
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // Horner over 1/x^2, highest order first.
    let mut series = 0.0;
    for c in ASYMPTOTIC_COEFFS.iter().rev() {
        series = series * inv2 + c;
    }
    series *= inv2;
    Ok(shift + x.ln() - 0.5 / x - series)
}

/// Sparse evidence over hypotheses keyed by `K`, kept sorted by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceVector<K: Ord + Copy> {
    entries: Vec<(K, f64)>,
}

impl<K: Ord + Copy> Default for EvidenceVector<K> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
        }
    }
}

impl<K: Ord + Copy> EvidenceVector<K> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a vector by accumulating `(key, mass)` pairs. Repeated keys sum.
    pub fn try_from_pairs<I>(pairs: I) -> Result<Self, EvidenceError>
    where
        I: IntoIterator<Item = (K, f64)>,
    {
        let mut ev = Self::new();
        for (k, m) in pairs {
            ev.add(k, m)?;
        }
        Ok(ev)
    }

    /// Adds `mass` to hypothesis `key`, inserting it into the support if new.
    pub fn add(&mut self, key: K, mass: f64) -> Result<(), EvidenceError> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(EvidenceError::InvalidMass(mass));
        }
        match self.entries.binary_search_by(|(k, _)| k.cmp(&key)) {
            Ok(pos) => self.entries[pos].1 += mass,
            Err(pos) => self.entries.insert(pos, (key, mass)),
        }
        Ok(())
    }

    pub fn get(&self, key: K) -> f64 {
        self.entries
            .binary_search_by(|(k, _)| k.cmp(&key))
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    /// Removes a hypothesis, returning its mass.
    pub fn remove(&mut self, key: K) -> Option<f64> {
        self.entries
            .binary_search_by(|(k, _)| k.cmp(&key))
            .ok()
            .map(|pos| self.entries.remove(pos).1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> f64 {
        sorted_sum(self.entries.iter().map(|e| e.1))
    }

    pub fn iter(&self) -> impl Iterator<Item = (K, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = K> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    /// Normalized probabilities over the support.
    pub fn probabilities(&self) -> Result<CategoricalDistribution<K>, EvidenceError> {
        if self.entries.is_empty() {
            return Err(EvidenceError::NoEvidence);
        }
        let total = self.total();
        Ok(CategoricalDistribution {
            entries: self.entries.iter().map(|&(k, m)| (k, m / total)).collect(),
        })
    }

    /// Expected entropy of the Dirichlet parameterized by this vector.
    pub fn expected_entropy(&self) -> Result<f64, EvidenceError> {
        expected_entropy(self.entries.iter().map(|e| e.1))
    }
}

/// Longest gap S − α summed term by term instead of through digamma.
const RECIPROCAL_SUM_LIMIT: f64 = 64.0;

/// ψ(s) − ψ(a) for 0 < a ≤ s. When the gap is a small integer this is the
/// finite sum Σ 1/(a+k), which avoids cancellation and is exact for unit
/// gaps.
fn digamma_gap(s: f64, a: f64) -> Result<f64, EvidenceError> {
    let gap = s - a;
    if gap.fract() == 0.0 && gap <= RECIPROCAL_SUM_LIMIT {
        let n = gap as u32;
        Ok((0..n).rev().map(|k| 1.0 / (a + k as f64)).sum())
    } else {
        Ok(digamma(s)? - digamma(a)?)
    }
}

/// ψ(Σα) − (1/Σα) Σ α ψ(α) over strictly positive masses, evaluated as
/// Σ (α/Σα)(ψ(Σα) − ψ(α)).
///
/// Masses are sorted by value before summation so the result does not depend
/// on the order or the labels of the hypotheses.
pub fn expected_entropy<I>(masses: I) -> Result<f64, EvidenceError>
where
    I: IntoIterator<Item = f64>,
{
    let mut masses: SmallVec<[f64; 8]> = masses.into_iter().collect();
    if masses.is_empty() {
        return Err(EvidenceError::NoEvidence);
    }
    if let Some(&bad) = masses.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
        return Err(EvidenceError::InvalidMass(bad));
    }
    if masses.len() == 1 {
        return Ok(0.0);
    }
    masses.sort_by(f64::total_cmp);
    let total: f64 = masses.iter().sum();
    let mut h = 0.0;
    for &m in &masses {
        h += m / total * digamma_gap(total, m)?;
    }
    Ok(h)
}

fn sorted_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut v: SmallVec<[f64; 8]> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// A discrete distribution over hypotheses keyed by `K`, sorted by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDistribution<K: Ord + Copy> {
    entries: Vec<(K, f64)>,
}

impl<K: Ord + Copy> CategoricalDistribution<K> {
    /// Builds a distribution from probabilities. Repeated keys sum; entries
    /// must be non-negative and add up to one within 1e-9.
    pub fn from_pairs<I>(pairs: I) -> Result<Self, EvidenceError>
    where
        I: IntoIterator<Item = (K, f64)>,
    {
        let mut entries: Vec<(K, f64)> = Vec::new();
        for (k, p) in pairs {
            if !(p.is_finite() && p >= 0.0) {
                return Err(EvidenceError::InvalidMass(p));
            }
            match entries.binary_search_by(|(e, _)| e.cmp(&k)) {
                Ok(pos) => entries[pos].1 += p,
                Err(pos) => entries.insert(pos, (k, p)),
            }
        }
        if entries.is_empty() {
            return Err(EvidenceError::NoEvidence);
        }
        let total = sorted_sum(entries.iter().map(|e| e.1));
        if (total - 1.0).abs() > 1e-9 {
            return Err(EvidenceError::InvalidMass(total));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: K) -> f64 {
        self.entries
            .binary_search_by(|(k, _)| k.cmp(&key))
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (K, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> f64 {
        sorted_sum(self.entries.iter().map(|e| e.1))
    }

    /// Number of hypotheses with non-zero probability.
    pub fn support_size(&self) -> usize {
        self.entries.iter().filter(|e| e.1 > 0.0).count()
    }

    /// Most probable hypothesis; ties go to the smallest key.
    pub fn argmax(&self) -> Option<(K, f64)> {
        let mut best: Option<(K, f64)> = None;
        for &(k, p) in &self.entries {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((k, p));
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn shannon_entropy(&self) -> f64 {
        shannon_entropy(self.entries.iter().map(|e| e.1))
    }

    /// Maps keys through `f`, summing probabilities of keys that collide.
    pub fn map_keys<J: Ord + Copy>(&self, mut f: impl FnMut(K) -> J) -> CategoricalDistribution<J> {
        let mut entries: Vec<(J, f64)> = Vec::with_capacity(self.entries.len());
        for &(k, p) in &self.entries {
            let j = f(k);
            match entries.binary_search_by(|(e, _)| e.cmp(&j)) {
                Ok(pos) => entries[pos].1 += p,
                Err(pos) => entries.insert(pos, (j, p)),
            }
        }
        CategoricalDistribution { entries }
    }
}

/// −Σ p ln p with 0·ln 0 = 0, summed in ascending order of p.
pub fn shannon_entropy<I: IntoIterator<Item = f64>>(probabilities: I) -> f64 {
    let mut ps: SmallVec<[f64; 8]> = probabilities.into_iter().filter(|p| *p > 0.0).collect();
    ps.sort_by(f64::total_cmp);
    let h: f64 = ps.iter().map(|&p| -p * p.ln()).sum();
    // A single certain hypothesis yields -0.0 from -1 * ln 1.
    h.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

    /// Gauss series ψ(x) = −γ + Σ_{n≥0} (x−1)/((n+1)(n+x)), summed exactly for
    /// the first N terms with Kahan compensation and closed with an
    /// Euler–Maclaurin tail.
    fn digamma_series_oracle(x: f64) -> f64 {
        const N: usize = 2000;
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        for n in 0..N {
            let n = n as f64;
            let term = (x - 1.0) / ((n + 1.0) * (n + x));
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        let n = N as f64;
        let a = n + 1.0;
        let b = n + x;
        let integral = ((x - 1.0) / a).ln_1p();
        let g = 1.0 / a - 1.0 / b;
        let g1 = -1.0 / (a * a) + 1.0 / (b * b);
        let g3 = -6.0 / a.powi(4) + 6.0 / b.powi(4);
        let tail = integral + g / 2.0 - g1 / 12.0 + g3 / 720.0;
        -EULER_GAMMA + sum + tail
    }

    #[test]
    fn digamma_known_values() {
        assert_abs_diff_eq!(digamma(1.0).unwrap(), -0.577_215_664_9, epsilon = 1e-10);
        assert_abs_diff_eq!(digamma(1.0).unwrap(), -EULER_GAMMA, epsilon = 1e-12);
        assert_abs_diff_eq!(digamma(2.0).unwrap(), 0.422_784_335_1, epsilon = 1e-10);
        assert_abs_diff_eq!(digamma(2.0).unwrap(), 1.0 - EULER_GAMMA, epsilon = 1e-12);
        assert_abs_diff_eq!(
            digamma(0.5).unwrap(),
            -EULER_GAMMA - 2.0 * std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(digamma(0.5).unwrap(), -1.963_510_026_0, epsilon = 1e-10);
    }

    #[test]
    fn digamma_matches_series_oracle() {
        for &x in &[0.01, 0.1, 0.5, 1.0, 1.5, 3.7, 9.99, 10.0, 42.0, 1234.5] {
            let got = digamma(x).unwrap();
            let want = digamma_series_oracle(x);
            assert!((got - want).abs() < 1e-11, "x={x} got={got} want={want}");
        }
        // The oracle itself against the half-integer identity.
        assert_abs_diff_eq!(
            digamma_series_oracle(0.5),
            -EULER_GAMMA - 2.0 * std::f64::consts::LN_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn digamma_large_argument() {
        // ψ(x) ≈ ln x − 1/(2x) for large x.
        let x = 1e6;
        assert_abs_diff_eq!(digamma(x).unwrap(), x.ln() - 0.5 / x - 1.0 / (12.0 * x * x), epsilon = 1e-15);
    }

    #[test]
    fn digamma_rejects_bad_domain() {
        for x in [0.0, -1.0, -0.5, f64::NAN, f64::INFINITY] {
            assert!(matches!(digamma(x), Err(EvidenceError::Domain(_))), "{x}");
        }
    }

    #[test]
    fn probabilities_examples() {
        let ev = EvidenceVector::try_from_pairs([('a', 3.0), ('b', 1.0)]).unwrap();
        let p = ev.probabilities().unwrap();
        assert_eq!(p.get('a'), 0.75);
        assert_eq!(p.get('b'), 0.25);

        let ev = EvidenceVector::try_from_pairs([('a', 5.0)]).unwrap();
        assert_eq!(ev.probabilities().unwrap().get('a'), 1.0);

        let ev = EvidenceVector::try_from_pairs([('a', 2.0), ('b', 2.0), ('c', 4.0)]).unwrap();
        let p = ev.probabilities().unwrap();
        assert_eq!((p.get('a'), p.get('b'), p.get('c')), (0.25, 0.25, 0.5));
        assert_eq!(p.get('z'), 0.0);

        assert_eq!(
            EvidenceVector::<char>::new().probabilities(),
            Err(EvidenceError::NoEvidence)
        );
    }

    #[test]
    fn add_rejects_non_positive_mass() {
        let mut ev = EvidenceVector::new();
        assert!(ev.add(1u32, 0.0).is_err());
        assert!(ev.add(1u32, -2.0).is_err());
        assert!(ev.add(1u32, f64::NAN).is_err());
        assert!(ev.is_empty());
    }

    #[test]
    fn expected_entropy_examples() {
        let ev = EvidenceVector::try_from_pairs([('a', 1.0), ('b', 1.0)]).unwrap();
        assert_abs_diff_eq!(ev.expected_entropy().unwrap(), 1.0, epsilon = 1e-12);

        // Reference value evaluated with a 30-digit digamma.
        let ev = EvidenceVector::try_from_pairs([('a', 100.0), ('b', 1.0)]).unwrap();
        assert_abs_diff_eq!(ev.expected_entropy().unwrap(), 0.061_261_163_540_986_34, epsilon = 1e-12);

        let ev = EvidenceVector::try_from_pairs([('a', 7.0)]).unwrap();
        assert_eq!(ev.expected_entropy().unwrap(), 0.0);

        assert_eq!(EvidenceVector::<u8>::new().expected_entropy(), Err(EvidenceError::NoEvidence));
    }

    #[test]
    fn expected_entropy_uniform_limit() {
        for m in [2usize, 3, 5] {
            let h = expected_entropy(std::iter::repeat_n(10_000.0, m)).unwrap();
            assert!((h - (m as f64).ln()).abs() < 0.01, "m={m} h={h}");
        }
    }

    #[test]
    fn expected_entropy_decreases_with_concentration() {
        let mut prev = f64::INFINITY;
        for n in 1..=100 {
            let h = expected_entropy([n as f64, 1.0]).unwrap();
            assert!(h < prev, "n={n}");
            prev = h;
        }
    }

    #[test]
    fn shannon_examples() {
        let p = CategoricalDistribution::from_pairs([('a', 0.5), ('b', 0.5)]).unwrap();
        assert_abs_diff_eq!(p.shannon_entropy(), std::f64::consts::LN_2, epsilon = 1e-10);
        let p = CategoricalDistribution::from_pairs([('a', 1.0)]).unwrap();
        assert_eq!(p.shannon_entropy(), 0.0);
        let p = CategoricalDistribution::from_pairs([('a', 0.25), ('b', 0.75)]).unwrap();
        let hand = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert_abs_diff_eq!(p.shannon_entropy(), hand, epsilon = 1e-15);
        assert_abs_diff_eq!(p.shannon_entropy(), 0.562_335_144_6, epsilon = 1e-10);
    }

    #[test]
    fn distribution_rejects_unnormalized() {
        assert!(CategoricalDistribution::from_pairs([('a', 0.5)]).is_err());
        assert!(CategoricalDistribution::from_pairs([('a', 1.5), ('b', -0.5)]).is_err());
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(masses in prop::collection::vec(1e-3f64..1e4, 1..20)) {
            let ev = EvidenceVector::try_from_pairs(masses.iter().copied().enumerate()).unwrap();
            let p = ev.probabilities().unwrap();
            prop_assert!((p.total() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn expected_entropy_relabel_invariant(
            masses in prop::collection::vec(1e-2f64..1e3, 1..12),
            seed in any::<u64>(),
        ) {
            let ev = EvidenceVector::try_from_pairs(masses.iter().copied().enumerate()).unwrap();
            // Relabel with a keyed permutation and insert in reverse order.
            let relabeled = EvidenceVector::try_from_pairs(
                masses.iter().copied().enumerate().rev()
                    .map(|(i, m)| ((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed, m)),
            ).unwrap();
            prop_assert_eq!(ev.expected_entropy().unwrap(), relabeled.expected_entropy().unwrap());
        }

        #[test]
        fn shannon_bounded_by_log_support(weights in prop::collection::vec(0.0f64..10.0, 1..16)) {
            let total: f64 = weights.iter().sum();
            prop_assume!(total > 1e-6);
            let p = CategoricalDistribution::from_pairs(
                weights.iter().enumerate().map(|(i, w)| (i, w / total)),
            ).unwrap();
            let h = p.shannon_entropy();
            let bound = (p.support_size() as f64).ln();
            prop_assert!(h >= 0.0 && h <= bound + 1e-12);
        }

        #[test]
        fn digamma_recurrence(x in 0.1f64..100.0) {
            let lhs = digamma(x + 1.0).unwrap();
            let rhs = digamma(x).unwrap() + 1.0 / x;
            prop_assert!((lhs - rhs).abs() < 1e-11);
        }
    }
}
