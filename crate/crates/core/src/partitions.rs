//! Block-count configurations, allele frequency spectra, and integer
//! partitions in multiplicity form.

use crate::error::{Error, Result};
use crate::special::ln_gamma;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Block sizes `(n_1, …, n_k)` in order of appearance. Every entry is ≥ 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct Configuration {
    counts: Vec<u32>,
}

impl Configuration {
    pub fn new(counts: Vec<u32>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidParameter("configuration needs at least one block".into()));
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::InvalidParameter(format!(
                "block counts must be positive, got {counts:?}"
            )));
        }
        Ok(Self { counts })
    }

    /// The single-block configuration `(1)`.
    pub fn singleton() -> Self {
        Self { counts: vec![1] }
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Number of blocks `k`.
    pub fn k(&self) -> usize {
        self.counts.len()
    }

    /// Total count `n = Σ n_i`.
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn singletons(&self) -> usize {
        self.counts.iter().filter(|&&c| c == 1).count()
    }

    /// `n - e_i`; a block that empties is removed. `None` when nothing is left.
    pub fn remove_one(&self, i: usize) -> Option<Self> {
        let mut counts = self.counts.clone();
        if counts[i] == 1 {
            counts.remove(i);
        } else {
            counts[i] -= 1;
        }
        (!counts.is_empty()).then_some(Self { counts })
    }

    /// `n + e_i`.
    pub fn add_to_block(&self, i: usize) -> Self {
        let mut counts = self.counts.clone();
        counts[i] += 1;
        Self { counts }
    }

    /// Appends a new block of size one.
    pub fn add_new_block(&self) -> Self {
        let mut counts = self.counts.clone();
        counts.push(1);
        Self { counts }
    }

    /// Counts sorted in decreasing order; the EPPF depends only on this.
    pub fn canonical(&self) -> Self {
        let mut counts = self.counts.clone();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        Self { counts }
    }

    pub fn afs(&self) -> AfsVector {
        afs(self)
    }
}

impl TryFrom<Vec<u32>> for Configuration {
    type Error = Error;
    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Configuration> for Vec<u32> {
    fn from(c: Configuration) -> Self {
        c.counts
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.counts.iter().map(u32::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for Configuration {
    type Err = Error;

    /// Comma-separated positive integers, e.g. `3,2,1`.
    fn from_str(s: &str) -> Result<Self> {
        let counts = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<u32>()
                    .map_err(|e| Error::Parse(format!("bad count {p:?} in {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(counts)
    }
}

/// Multiplicities `m_j = #{i : n_i = j}` for `j = 1..=n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AfsVector {
    m: Vec<u32>,
}

impl AfsVector {
    /// Checks `m.len() ≥ 1` and `Σ j m_j = m.len()`.
    pub fn new(m: Vec<u32>) -> Result<Self> {
        let n: u64 = m.iter().enumerate().map(|(j, &mj)| (j as u64 + 1) * mj as u64).sum();
        if m.is_empty() || n != m.len() as u64 {
            return Err(Error::InvalidParameter(format!(
                "allele frequency spectrum {m:?} does not sum to its length"
            )));
        }
        Ok(Self { m })
    }

    pub fn m(&self) -> &[u32] {
        &self.m
    }

    pub fn n(&self) -> u32 {
        self.m.len() as u32
    }

    pub fn k(&self) -> u32 {
        self.m.iter().sum()
    }

    /// The configuration with blocks in decreasing size.
    pub fn to_configuration(&self) -> Configuration {
        let mut counts = Vec::with_capacity(self.k() as usize);
        for (j, &mj) in self.m.iter().enumerate().rev() {
            counts.extend(std::iter::repeat_n(j as u32 + 1, mj as usize));
        }
        Configuration { counts }
    }
}

pub fn afs(config: &Configuration) -> AfsVector {
    let n = config.total() as usize;
    let mut m = vec![0u32; n];
    for &c in config.counts() {
        m[c as usize - 1] += 1;
    }
    AfsVector { m }
}

/// Largest `n` for which [`enumerate_afs`] builds the full list.
pub const MAX_ENUMERATION_N: u32 = 40;

/// Integer partitions of `n` as decreasing block-size vectors, in reverse
/// lexicographic order (`(n)` first, `(1,…,1)` last).
#[derive(Debug, Clone)]
pub struct IntegerPartitions {
    current: Option<Vec<u32>>,
}

impl IntegerPartitions {
    pub fn new(n: u32) -> Self {
        Self {
            current: (n > 0).then(|| vec![n]),
        }
    }
}

impl Iterator for IntegerPartitions {
    type Item = Vec<u32>;

    fn next(&mut self) -> Option<Vec<u32>> {
        let out = self.current.take()?;
        // next in reverse lexicographic order: find the rightmost part > 1,
        // decrement it and redistribute the remainder greedily
        let mut p = out.clone();
        let mut rem = 0u32;
        while let Some(&last) = p.last() {
            if last == 1 {
                rem += 1;
                p.pop();
            } else {
                break;
            }
        }
        if let Some(last) = p.last_mut() {
            *last -= 1;
            let cap = *last;
            rem += 1;
            while rem > 0 {
                let part = rem.min(cap);
                p.push(part);
                rem -= part;
            }
            self.current = Some(p);
        }
        Some(out)
    }
}

/// All integer partitions of `n` in multiplicity form, reverse lexicographic.
pub fn enumerate_afs(n: u32) -> Result<Vec<AfsVector>> {
    if n == 0 {
        return Err(Error::Domain("n must be >= 1".into()));
    }
    if n > MAX_ENUMERATION_N {
        return Err(Error::TooLarge(format!(
            "n = {n} exceeds {MAX_ENUMERATION_N}; iterate IntegerPartitions instead of collecting"
        )));
    }
    Ok(IntegerPartitions::new(n)
        .map(|p| afs(&Configuration { counts: p }))
        .collect())
}

/// [`enumerate_afs`] grouped by number of blocks; index `k - 1` holds `A_{n,k}`.
pub fn enumerate_afs_by_k(n: u32) -> Result<Vec<Vec<AfsVector>>> {
    let all = enumerate_afs(n)?;
    let mut groups = vec![Vec::new(); n as usize];
    for m in all {
        groups[m.k() as usize - 1].push(m);
    }
    Ok(groups)
}

/// `ln( n! / Π_j (j!)^{m_j} m_j! )`: the number of set partitions of `[n]`
/// with block-size multiset `m`.
pub fn log_partition_coefficient(m: &AfsVector) -> f64 {
    let ln_fact = |x: f64| ln_gamma(x + 1.0);
    let mut out = ln_fact(m.n() as f64);
    for (j, &mj) in m.m().iter().enumerate() {
        if mj > 0 {
            out -= mj as f64 * ln_fact(j as f64 + 1.0) + ln_fact(mj as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn cfg(c: &[u32]) -> Configuration {
        Configuration::new(c.to_vec()).unwrap()
    }

    #[test]
    fn afs_examples() {
        assert_eq!(afs(&cfg(&[2, 1, 1])).m(), &[2, 1, 0, 0]);
        assert_eq!(afs(&cfg(&[4])).m(), &[0, 0, 0, 1]);
        assert_eq!(afs(&cfg(&[3, 2, 1])).m(), &[1, 1, 1, 0, 0, 0]);
    }

    #[test]
    fn enumerate_small() {
        let all = enumerate_afs(4).unwrap();
        assert_eq!(all.len(), 5);
        let by_k = enumerate_afs_by_k(4).unwrap();
        let sizes: Vec<usize> = by_k.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![1, 2, 1, 1]);
        let order: Vec<Vec<u32>> = all.iter().map(|m| m.to_configuration().counts().to_vec()).collect();
        assert_eq!(order, vec![vec![4], vec![3, 1], vec![2, 2], vec![2, 1, 1], vec![1, 1, 1, 1]]);
        assert_eq!(enumerate_afs(1).unwrap(), vec![AfsVector::new(vec![1]).unwrap()]);
    }

    /// p(n) by the standard recursion over the largest part, independent of the iterator.
    fn partition_count(n: u32, max: u32) -> u64 {
        if n == 0 {
            return 1;
        }
        (1..=max.min(n)).map(|p| partition_count(n - p, p)).sum()
    }

    #[test]
    fn enumeration_counts_match_recursive_counter() {
        assert_eq!(enumerate_afs(7).unwrap().len(), 15);
        for n in 1..=20 {
            let all = enumerate_afs(n).unwrap();
            assert_eq!(all.len() as u64, partition_count(n, n), "n={n}");
            let mut seen = std::collections::HashSet::new();
            for m in &all {
                assert!(seen.insert(m.clone()), "duplicate at n={n}");
                assert_eq!(m.n(), n);
            }
        }
    }

    #[test]
    fn enumeration_limit() {
        assert!(matches!(enumerate_afs(41), Err(Error::TooLarge(_))));
        assert!(enumerate_afs(0).is_err());
        assert_eq!(IntegerPartitions::new(50).count(), 204_226);
    }

    #[test]
    fn partition_coefficient_examples() {
        let m = AfsVector::new(vec![2, 1, 0, 0]).unwrap();
        assert_relative_eq!(log_partition_coefficient(&m), 6f64.ln(), max_relative = 1e-14);
        assert_eq!(log_partition_coefficient(&AfsVector::new(vec![1]).unwrap()), 0.0);
        assert!(log_partition_coefficient(&AfsVector::new(vec![0, 0, 1]).unwrap()).abs() < 1e-14);
    }

    /// Set partitions of [n] via restricted growth strings, grouped by block-size multiset.
    fn set_partition_counts(n: usize) -> HashMap<Vec<u32>, u64> {
        fn rec(i: usize, n: usize, labels: &mut Vec<usize>, out: &mut HashMap<Vec<u32>, u64>) {
            if i == n {
                let k = labels.iter().max().unwrap() + 1;
                let mut sizes = vec![0u32; k];
                for &l in labels.iter() {
                    sizes[l] += 1;
                }
                sizes.sort_unstable_by(|a, b| b.cmp(a));
                *out.entry(sizes).or_default() += 1;
                return;
            }
            let k = labels.iter().max().map_or(0, |m| m + 1);
            for l in 0..=k {
                labels.push(l);
                rec(i + 1, n, labels, out);
                labels.pop();
            }
        }
        let mut out = HashMap::new();
        rec(0, n, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn coefficients_count_set_partitions() {
        for n in 1..=6u32 {
            let brute = set_partition_counts(n as usize);
            let all = enumerate_afs(n).unwrap();
            assert_eq!(brute.len(), all.len());
            for m in all {
                let key = m.to_configuration().counts().to_vec();
                let coef = log_partition_coefficient(&m).exp().round() as u64;
                assert_eq!(brute[&key], coef, "n={n} m={:?}", m.m());
            }
        }
    }

    #[test]
    fn parse_and_display() {
        let c: Configuration = "3, 2,1".parse().unwrap();
        assert_eq!(c.counts(), &[3, 2, 1]);
        assert_eq!(c.to_string(), "3,2,1");
        assert!("3,0".parse::<Configuration>().is_err());
        assert!("".parse::<Configuration>().is_err());
        assert!("a,b".parse::<Configuration>().is_err());
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(json, "[3,2,1]");
        assert!(serde_json::from_str::<Configuration>("[0]").is_err());
    }

    #[test]
    fn remove_and_add() {
        let c = cfg(&[2, 1, 3]);
        assert_eq!(c.remove_one(0).unwrap().counts(), &[1, 1, 3]);
        assert_eq!(c.remove_one(1).unwrap().counts(), &[2, 3]);
        assert!(cfg(&[1]).remove_one(0).is_none());
        assert_eq!(c.add_new_block().counts(), &[2, 1, 3, 1]);
        assert_eq!(c.add_to_block(1).counts(), &[2, 2, 3]);
        assert_eq!(c.canonical().counts(), &[3, 2, 1]);
    }

    proptest! {
        #[test]
        fn afs_satisfies_constraints(counts in proptest::collection::vec(1u32..8, 1..10)) {
            let c = Configuration::new(counts).unwrap();
            let m = afs(&c);
            let n: u32 = m.m().iter().enumerate().map(|(j, &x)| (j as u32 + 1) * x).sum();
            prop_assert_eq!(n, c.total());
            prop_assert_eq!(m.k() as usize, c.k());
            prop_assert_eq!(m.to_configuration(), c.canonical());
        }
    }
}
