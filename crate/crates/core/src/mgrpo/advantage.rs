use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Population mean and standard deviation of one reward group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl GroupStats {
    /// Divide-by-n statistics, summed in input order. A group whose values
    /// are all identical has `std == 0` exactly.
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return GroupStats {
                mean: 0.0,
                std: 0.0,
                count,
            };
        }
        if values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
            return GroupStats {
                mean: values[0],
                std: 0.0,
                count,
            };
        }
        let n = count as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        GroupStats {
            mean,
            std: var.sqrt(),
            count,
        }
    }

    /// `(x - mean) / std`, or 0 for a degenerate group.
    pub fn normalize(&self, x: f64) -> f64 {
        if self.std > 0.0 {
            (x - self.mean) / self.std
        } else {
            0.0
        }
    }
}

fn check_finite(values: impl IntoIterator<Item = f64>) -> Result<()> {
    match values.into_iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::Numeric(format!("reward {v} is not finite"))),
        None => Ok(()),
    }
}

/// Group-relative advantages of the K main-agent rewards for one query.
pub fn main_advantages(rewards: &[f64]) -> Result<(GroupStats, Vec<f64>)> {
    if rewards.len() < 2 {
        return Err(Error::contract(format!(
            "group-relative advantages need K >= 2 rewards, got {}",
            rewards.len()
        )));
    }
    check_finite(rewards.iter().copied())?;
    let stats = GroupStats::of(rewards);
    Ok((stats, rewards.iter().map(|&r| stats.normalize(r)).collect()))
}

/// Advantages pooled over a K x d table of aligned sub-agent rewards.
/// Duplicated entries count at face value.
pub fn sub_advantages(rewards: &[Vec<f64>]) -> Result<(GroupStats, Vec<Vec<f64>>)> {
    let masked: Vec<Vec<Option<f64>>> = rewards
        .iter()
        .map(|row| row.iter().copied().map(Some).collect())
        .collect();
    let (stats, adv) = sub_advantages_masked(&masked)?;
    Ok((stats, adv))
}

/// As [`sub_advantages`], with `None` marking placeholder entries that are
/// excluded from the pooled statistics and receive zero advantage.
pub fn sub_advantages_masked(rewards: &[Vec<Option<f64>>]) -> Result<(GroupStats, Vec<Vec<f64>>)> {
    if rewards.len() < 2 {
        return Err(Error::contract(format!(
            "sub advantages need K >= 2 rollouts, got {}",
            rewards.len()
        )));
    }
    let d = rewards[0].len();
    if d == 0 || rewards.iter().any(|row| row.len() != d) {
        return Err(Error::contract(
            "sub reward table must be K x d with d >= 1",
        ));
    }
    let pooled: Vec<f64> = rewards.iter().flatten().flatten().copied().collect();
    check_finite(pooled.iter().copied())?;
    let stats = GroupStats::of(&pooled);
    let adv = rewards
        .iter()
        .map(|row| {
            row.iter()
                .map(|r| r.map_or(0.0, |x| stats.normalize(x)))
                .collect()
        })
        .collect();
    Ok((stats, adv))
}

/// Normalizes each rollout's sub rewards on their own, with no alignment.
/// Used only by the unsynchronized ablation.
pub fn per_rollout_advantages(rewards: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rewards
        .iter()
        .map(|row| {
            check_finite(row.iter().copied())?;
            let stats = GroupStats::of(row);
            Ok(row.iter().map(|&r| stats.normalize(r)).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn alternating_rewards() {
        let (s, a) = main_advantages(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!((s.mean, s.std, s.count), (0.5, 0.5, 4));
        assert_eq!(a, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn equal_rewards_give_zero_advantage() {
        let (s, a) = main_advantages(&[0.1, 0.1, 0.1]).unwrap();
        assert_eq!(s.std, 0.0);
        assert!(a.iter().all(|&x| x == 0.0));
        let (_, a) = sub_advantages(&[vec![0.6, 0.6], vec![0.6, 0.6]]).unwrap();
        assert!(a.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn too_small_groups_are_rejected() {
        assert!(main_advantages(&[1.0]).is_err());
        assert!(sub_advantages(&[vec![1.0]]).is_err());
        assert!(sub_advantages(&[vec![], vec![]]).is_err());
        assert!(sub_advantages(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(main_advantages(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn pooled_two_by_two() {
        let (s, a) = sub_advantages(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!((s.mean, s.std, s.count), (0.5, 0.5, 4));
        assert_eq!(a, vec![vec![1.0, 1.0], vec![-1.0, -1.0]]);
    }

    #[test]
    fn placeholders_are_excluded_from_pool() {
        let (s, a) =
            sub_advantages_masked(&[vec![Some(1.0), Some(0.0)], vec![None, None]]).unwrap();
        assert_eq!((s.mean, s.std, s.count), (0.5, 0.5, 2));
        assert_eq!(a, vec![vec![1.0, -1.0], vec![0.0, 0.0]]);
        let (s, a) = sub_advantages_masked(&[vec![None], vec![None]]).unwrap();
        assert_eq!(s.count, 0);
        assert_eq!(a, vec![vec![0.0], vec![0.0]]);
    }

    #[test]
    fn duplicate_matches_its_source() {
        let (_, a) = sub_advantages(&[vec![0.3, 0.9, 0.3], vec![0.1, 0.5, 0.5]]).unwrap();
        assert_eq!(a[0][0], a[0][2]);
        assert_eq!(a[1][1], a[1][2]);
    }

    #[test]
    fn per_rollout_normalization() {
        let a = per_rollout_advantages(&[vec![1.0, 0.0], vec![0.4], vec![]]).unwrap();
        assert_eq!(a, vec![vec![1.0, -1.0], vec![0.0], vec![]]);
    }

    proptest! {
        #[test]
        fn normalized_moments(rewards in prop::collection::vec(-5.0f64..5.0, 2..17)) {
            let (s, a) = main_advantages(&rewards).unwrap();
            if s.std > 0.0 {
                let n = a.len() as f64;
                let mean = a.iter().sum::<f64>() / n;
                let var = a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-12);
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(a.iter().all(|&x| x == 0.0));
            }
        }
    }
}
