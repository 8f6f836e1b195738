//! Trajectory alignment: every rollout contributes exactly `d` sub entries.
//!
//! * `d_k < d`: all originals once, then `d - d_k` copies of originals drawn
//!   uniformly with replacement.
//! * `d_k > d`: a uniform `d`-subset of the originals, kept in order.
//! * `d_k = d`: unchanged.
//! * `d_k = 0`: `d` inert placeholders (there is nothing to copy).

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::trajectory::{Rollout, RolloutGroup, Trajectory};

/// Where an aligned sub entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubSource {
    Original(usize),
    DuplicateOf(usize),
    Placeholder,
}

impl SubSource {
    /// Index of the sub-trajectory this entry replays.
    pub fn origin(self) -> Option<usize> {
        match self {
            SubSource::Original(i) | SubSource::DuplicateOf(i) => Some(i),
            SubSource::Placeholder => None,
        }
    }
}

/// Smallest `d >= 1` such that at least `quantile` of the observed
/// invocation counts are `<= d`.
pub fn estimate_d(counts: &[usize], quantile: f64) -> Result<usize> {
    if counts.is_empty() {
        return Err(Error::contract(
            "estimate_d needs at least one invocation count",
        ));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::contract(format!(
            "quantile {quantile} outside (0, 1)"
        )));
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    // first position where the empirical CDF reaches the quantile
    let need = (quantile * n as f64).ceil() as usize;
    let d = sorted[need.clamp(1, n) - 1];
    Ok(d.max(1))
}

/// Alignment plan for one rollout with `d_k` sub-trajectories.
pub fn align_indices(d_k: usize, d: usize, rng: &mut impl Rng) -> Result<Vec<SubSource>> {
    if d == 0 {
        return Err(Error::contract("alignment target d must be >= 1"));
    }
    Ok(if d_k == 0 {
        vec![SubSource::Placeholder; d]
    } else if d_k <= d {
        let mut out: Vec<SubSource> = (0..d_k).map(SubSource::Original).collect();
        out.extend((d_k..d).map(|_| SubSource::DuplicateOf(rng.gen_range(0..d_k))));
        out
    } else {
        let mut keep = sample(rng, d_k, d).into_vec();
        keep.sort_unstable();
        keep.into_iter().map(SubSource::Original).collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSub {
    pub rollout: usize,
    pub source: SubSource,
    pub trajectory: Option<Trajectory>,
}

/// Fixed-shape training unit: K main trajectories and K x d sub entries,
/// stored rollout-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBatch {
    pub mains: Vec<Trajectory>,
    pub subs: Vec<AlignedSub>,
    pub d: usize,
}

/// Aligns one rollout's sub-trajectories to exactly `d` entries.
pub fn align(r: &Rollout, rollout: usize, d: usize, rng: &mut impl Rng) -> Result<Vec<AlignedSub>> {
    Ok(align_indices(r.subs.len(), d, rng)?
        .into_iter()
        .map(|source| AlignedSub {
            rollout,
            source,
            trajectory: source.origin().map(|i| r.subs[i].clone()),
        })
        .collect())
}

impl AlignedBatch {
    /// Aligns every rollout of a group; `rng_for(k)` supplies rollout k's
    /// generator so alignment is reproducible per rollout.
    pub fn from_group<R: Rng>(
        group: &RolloutGroup,
        d: usize,
        mut rng_for: impl FnMut(usize) -> R,
    ) -> Result<Self> {
        let mut subs = Vec::with_capacity(group.k() * d);
        for (k, r) in group.rollouts.iter().enumerate() {
            subs.extend(align(r, k, d, &mut rng_for(k))?);
        }
        let batch = AlignedBatch {
            mains: group.rollouts.iter().map(|r| r.main.clone()).collect(),
            subs,
            d,
        };
        batch.check(&group.invocation_counts())?;
        Ok(batch)
    }

    pub fn k(&self) -> usize {
        self.mains.len()
    }

    /// Entries of rollout `k`.
    pub fn row(&self, k: usize) -> &[AlignedSub] {
        &self.subs[k * self.d..(k + 1) * self.d]
    }

    /// Verifies shape and multiset laws against the original counts.
    pub fn check(&self, counts: &[usize]) -> Result<()> {
        let d = self.d;
        if counts.len() != self.k() || self.subs.len() != self.k() * d {
            return Err(Error::DataIntegrity(format!(
                "aligned batch holds {} sub entries for K = {}, d = {d}",
                self.subs.len(),
                self.k()
            )));
        }
        for (k, &d_k) in counts.iter().enumerate() {
            let row = self.row(k);
            if row.iter().any(|e| e.rollout != k) {
                return Err(Error::DataIntegrity(format!(
                    "row {k} holds foreign entries"
                )));
            }
            let mut seen = vec![0usize; d_k];
            for e in row {
                match e.source {
                    SubSource::Original(i) if i < d_k => seen[i] += 1,
                    SubSource::DuplicateOf(i) if i < d_k && d_k < d => seen[i] += 1,
                    SubSource::Placeholder if d_k == 0 => {}
                    other => {
                        return Err(Error::DataIntegrity(format!(
                            "row {k} (d_k = {d_k}) holds invalid entry {other:?}"
                        )))
                    }
                }
            }
            let ok = if d_k <= d {
                seen.iter().all(|&c| c >= 1)
            } else {
                seen.iter().all(|&c| c <= 1)
            };
            if !ok {
                return Err(Error::DataIntegrity(format!(
                    "row {k} breaks the multiset law"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn estimate_d_examples() {
        assert_eq!(estimate_d(&[3, 3, 3], 0.99).unwrap(), 3);
        let counts: Vec<usize> = (1..=8)
            .flat_map(|v| std::iter::repeat(v).take(100))
            .collect();
        assert_eq!(estimate_d(&counts, 0.99).unwrap(), 8);
        assert_eq!(estimate_d(&counts, 0.5).unwrap(), 4);
        assert_eq!(estimate_d(&[0, 0, 0], 0.99).unwrap(), 1);
        assert!(estimate_d(&[], 0.99).is_err());
        assert!(estimate_d(&[1], 1.0).is_err());
    }

    /// Brute-force empirical CDF scan.
    fn estimate_by_scan(counts: &[usize], q: f64) -> usize {
        let n = counts.len() as f64;
        (1..)
            .find(|&d| counts.iter().filter(|&&c| c <= d).count() as f64 / n >= q)
            .unwrap()
    }

    proptest! {
        #[test]
        fn estimate_matches_scan(counts in prop::collection::vec(0usize..30, 1..200), q in 0.01f64..0.99) {
            prop_assert_eq!(estimate_d(&counts, q).unwrap(), estimate_by_scan(&counts, q));
        }
    }

    #[test]
    fn identity_when_counts_match() {
        let plan = align_indices(8, 8, &mut rng(0)).unwrap();
        assert_eq!(plan, (0..8).map(SubSource::Original).collect::<Vec<_>>());
    }

    #[test]
    fn short_rollouts_are_padded_with_duplicates() {
        let plan = align_indices(3, 8, &mut rng(1)).unwrap();
        assert_eq!(plan.len(), 8);
        assert_eq!(
            &plan[..3],
            &[
                SubSource::Original(0),
                SubSource::Original(1),
                SubSource::Original(2)
            ]
        );
        assert!(plan[3..]
            .iter()
            .all(|s| matches!(s, SubSource::DuplicateOf(j) if *j < 3)));
    }

    #[test]
    fn empty_rollouts_get_placeholders() {
        assert_eq!(
            align_indices(0, 4, &mut rng(2)).unwrap(),
            vec![SubSource::Placeholder; 4]
        );
        assert!(align_indices(2, 0, &mut rng(2)).is_err());
    }

    #[test]
    fn drop_retention_is_uniform() {
        // each original survives with probability d / d_k = 0.8
        let trials = 100_000;
        let mut kept = [0usize; 10];
        let mut r = rng(3);
        for _ in 0..trials {
            for s in align_indices(10, 8, &mut r).unwrap() {
                kept[s.origin().unwrap()] += 1;
            }
        }
        for c in kept {
            assert!((c as f64 / trials as f64 - 0.8).abs() < 0.01, "{kept:?}");
        }
    }

    proptest! {
        #[test]
        fn shape_and_multiset_laws(d_k in 0usize..=20, d in 1usize..=12, seed in any::<u64>()) {
            let plan = align_indices(d_k, d, &mut rng(seed)).unwrap();
            prop_assert_eq!(plan.len(), d);
            let mut seen = vec![0usize; d_k];
            for s in &plan {
                if let Some(i) = s.origin() { seen[i] += 1; }
            }
            if d_k <= d {
                prop_assert!(seen.iter().all(|&c| c >= 1));
            } else {
                prop_assert!(seen.iter().all(|&c| c <= 1));
                prop_assert!(plan.iter().all(|s| matches!(s, SubSource::Original(_))));
            }
        }
    }
}
