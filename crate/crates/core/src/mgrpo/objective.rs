//! Clipped surrogate objectives over sequence-level likelihood ratios and
//! their gradients with respect to the new policy.

use serde::{Deserialize, Serialize};

use super::align::AlignedBatch;
use crate::error::{Error, Result};
use crate::policy::SoftmaxLinearPolicy;
use crate::trajectory::{PolicyParams, Role, Trajectory};

/// Tolerance between a stored behavior log-probability and its recomputation.
pub const BEHAVIOR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub epsilon: f64,
}

impl ClipConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if epsilon > 0.0 && epsilon < 1.0 {
            Ok(ClipConfig { epsilon })
        } else {
            Err(Error::Config(vec![format!(
                "ClipConfig.epsilon = {epsilon} must lie in (0, 1)"
            )]))
        }
    }

    pub fn clip(&self, ratio: f64) -> f64 {
        ratio.clamp(1.0 - self.epsilon, 1.0 + self.epsilon)
    }

    /// `min(ratio * adv, clip(ratio) * adv)`.
    pub fn term(&self, ratio: f64, adv: f64) -> f64 {
        (ratio * adv).min(self.clip(ratio) * adv)
    }

    /// Whether the unclipped branch is the one selected by the minimum, so
    /// the term depends on the new policy.
    pub fn unclipped_active(&self, ratio: f64, adv: f64) -> bool {
        ratio * adv <= self.clip(ratio) * adv
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig { epsilon: 0.2 }
    }
}

/// One trajectory's share of a surrogate. `None` is an inert placeholder.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateEntry<'a> {
    pub trajectory: Option<&'a Trajectory>,
    pub advantage: f64,
}

/// Recomputes the old policy's log-likelihood step by step and checks it
/// against what was recorded at sampling time.
pub fn check_behavior(t: &Trajectory, pi_old: &SoftmaxLinearPolicy) -> Result<f64> {
    if t.role != pi_old.role() {
        return Err(Error::contract(format!(
            "{} trajectory scored by {} policy",
            t.role,
            pi_old.role()
        )));
    }
    let mut total = 0.0;
    for (i, step) in t.steps.iter().enumerate() {
        let lps = pi_old.action_logprobs(&step.state)?;
        let lp = *lps
            .get(step.action as usize)
            .ok_or_else(|| Error::contract(format!("action {} outside vocabulary", step.action)))?;
        if (lp - step.behavior_logprob).abs() > BEHAVIOR_TOLERANCE {
            return Err(Error::DataIntegrity(format!(
                "step {i}: stored behavior logprob {} but old policy gives {lp}",
                step.behavior_logprob
            )));
        }
        total += lp;
    }
    Ok(total)
}

/// Value and gradient of `(1/norm) * sum_e min(rho_e A_e, clip(rho_e) A_e)`.
pub fn surrogate_with_grad(
    entries: &[SurrogateEntry<'_>],
    norm: usize,
    pi_new: &SoftmaxLinearPolicy,
    pi_old: &SoftmaxLinearPolicy,
    cfg: &ClipConfig,
) -> Result<(f64, Vec<f64>)> {
    if norm == 0 {
        return Err(Error::contract("surrogate normalizer must be positive"));
    }
    if pi_new.role() != pi_old.role()
        || pi_new.feature_dim != pi_old.feature_dim
        || pi_new.vocab_size != pi_old.vocab_size
    {
        return Err(Error::contract(
            "new and old policies have different shapes",
        ));
    }
    let scale = 1.0 / norm as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; pi_new.params.theta.len()];
    let mut scratch = vec![0.0; grad.len()];
    for e in entries {
        let Some(t) = e.trajectory else { continue };
        let old = check_behavior(t, pi_old)?;
        let new = pi_new.sequence_logprob(t)?;
        let ratio = (new - old).exp();
        value += cfg.term(ratio, e.advantage);
        if e.advantage != 0.0 && cfg.unclipped_active(ratio, e.advantage) {
            scratch.iter_mut().for_each(|x| *x = 0.0);
            pi_new.accumulate_grad(t, 1.0, &mut scratch)?;
            let c = ratio * e.advantage * scale;
            for (g, s) in grad.iter_mut().zip(&scratch) {
                *g += c * s;
            }
        }
    }
    Ok((value / norm as f64, grad))
}

fn main_entries<'a>(mains: &'a [Trajectory], adv: &[f64]) -> Result<Vec<SurrogateEntry<'a>>> {
    if mains.len() != adv.len() {
        return Err(Error::contract(format!(
            "{} main trajectories but {} advantages",
            mains.len(),
            adv.len()
        )));
    }
    Ok(mains
        .iter()
        .zip(adv)
        .map(|(t, &a)| SurrogateEntry {
            trajectory: Some(t),
            advantage: a,
        })
        .collect())
}

fn sub_entries<'a>(batch: &'a AlignedBatch, adv: &[Vec<f64>]) -> Result<Vec<SurrogateEntry<'a>>> {
    if adv.len() != batch.k() || adv.iter().any(|row| row.len() != batch.d) {
        return Err(Error::contract("sub advantages must be K x d"));
    }
    Ok(batch
        .subs
        .iter()
        .zip(adv.iter().flatten())
        .map(|(s, &a)| SurrogateEntry {
            trajectory: s.trajectory.as_ref(),
            advantage: a,
        })
        .collect())
}

/// Main-agent surrogate, averaged over the K rollouts.
pub fn surrogate_main(
    mains: &[Trajectory],
    pi_new: &SoftmaxLinearPolicy,
    pi_old: &SoftmaxLinearPolicy,
    adv: &[f64],
    cfg: &ClipConfig,
) -> Result<f64> {
    let entries = main_entries(mains, adv)?;
    Ok(surrogate_with_grad(&entries, mains.len().max(1), pi_new, pi_old, cfg)?.0)
}

/// Sub-agent surrogate, averaged over all d x K aligned entries.
pub fn surrogate_sub(
    batch: &AlignedBatch,
    pi_new: &SoftmaxLinearPolicy,
    pi_old: &SoftmaxLinearPolicy,
    adv: &[Vec<f64>],
    cfg: &ClipConfig,
) -> Result<f64> {
    let entries = sub_entries(batch, adv)?;
    Ok(surrogate_with_grad(&entries, batch.d * batch.k(), pi_new, pi_old, cfg)?.0)
}

/// Advantages for [`surrogate_grad`], shaped by role.
#[derive(Debug, Clone, Copy)]
pub enum RoleBatch<'a> {
    Main {
        mains: &'a [Trajectory],
        adv: &'a [f64],
    },
    Sub {
        batch: &'a AlignedBatch,
        adv: &'a [Vec<f64>],
    },
}

/// Gradient of the role's surrogate with respect to the new parameters.
pub fn surrogate_grad(
    role: Role,
    batch: RoleBatch<'_>,
    pi_new: &SoftmaxLinearPolicy,
    pi_old: &SoftmaxLinearPolicy,
    cfg: &ClipConfig,
) -> Result<Vec<f64>> {
    let (entries, norm) = match (role, batch) {
        (Role::Main, RoleBatch::Main { mains, adv }) => (main_entries(mains, adv)?, mains.len()),
        (Role::Sub, RoleBatch::Sub { batch, adv }) => {
            (sub_entries(batch, adv)?, batch.d * batch.k())
        }
        _ => return Err(Error::contract("batch shape does not match role")),
    };
    Ok(surrogate_with_grad(&entries, norm.max(1), pi_new, pi_old, cfg)?.1)
}

/// One plain gradient-ascent step.
pub fn update(params: &PolicyParams, grad: &[f64], lr: f64) -> Result<PolicyParams> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::contract(format!(
            "learning rate {lr} must be positive"
        )));
    }
    if grad.len() != params.theta.len() {
        return Err(Error::contract(format!(
            "gradient has {} entries, parameters {}",
            grad.len(),
            params.theta.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("gradient entry {i} is {}", grad[i])));
    }
    let theta = params
        .theta
        .iter()
        .zip(grad)
        .map(|(t, g)| t + lr * g)
        .collect();
    let next = PolicyParams {
        role: params.role,
        theta,
        version: params.version + 1,
    };
    next.validate()?;
    Ok(next)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mgrpo::align::{AlignedSub, SubSource};
    use crate::trajectory::Step;

    fn policy(
        rng: &mut ChaCha8Rng,
        role: Role,
        fd: usize,
        v: usize,
        scale: f64,
    ) -> SoftmaxLinearPolicy {
        let theta = (0..fd * v).map(|_| rng.gen_range(-scale..scale)).collect();
        SoftmaxLinearPolicy::new(
            PolicyParams {
                role,
                theta,
                version: 0,
            },
            fd,
            v,
        )
        .unwrap()
    }

    fn sample(rng: &mut ChaCha8Rng, pi: &SoftmaxLinearPolicy, len: usize) -> Trajectory {
        let mut t = Trajectory::new(pi.role());
        for _ in 0..len {
            let state: Vec<f64> = (0..pi.feature_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let (a, lp) = pi.sample_action(&state, rng).unwrap();
            t.steps.push(Step {
                state,
                action: a as u32,
                behavior_logprob: lp,
                reward: 0.0,
            });
        }
        t
    }

    fn perturbed(
        pi: &SoftmaxLinearPolicy,
        rng: &mut ChaCha8Rng,
        scale: f64,
    ) -> SoftmaxLinearPolicy {
        let mut p = pi.params.clone();
        p.theta
            .iter_mut()
            .for_each(|x| *x += rng.gen_range(-scale..scale));
        pi.with_params(p).unwrap()
    }

    #[test]
    fn clip_examples() {
        let c = ClipConfig::default();
        assert!((c.term(1.5, 1.0) - 1.2).abs() < 1e-15);
        assert!((c.term(0.5, -1.0) + 0.8).abs() < 1e-15);
        assert!((c.term(1.5, -1.0) + 1.5).abs() < 1e-15);
        assert!((c.term(0.5, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(c.term(1.0, 0.7), 0.7);
        assert!(c.unclipped_active(1.5, -1.0));
        assert!(!c.unclipped_active(1.5, 1.0));
        assert!(ClipConfig::new(0.0).is_err());
        assert!(ClipConfig::new(1.0).is_err());
        assert!(ClipConfig::new(0.3).is_ok());
    }

    proptest! {
        #[test]
        fn term_is_bounded_above(ratio in 0.0f64..10.0, adv in -5.0f64..5.0, eps in 0.01f64..0.99) {
            let c = ClipConfig::new(eps).unwrap();
            let v = c.term(ratio, adv);
            prop_assert!(v <= (1.0 + eps) * adv.abs() + 1e-12);
            prop_assert!(v <= ratio * adv + 1e-12);
        }
    }

    #[test]
    fn at_the_old_policy_the_surrogate_is_the_mean_advantage() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pi = policy(&mut rng, Role::Main, 4, 5, 1.0);
        let mains: Vec<_> = (0..4).map(|_| sample(&mut rng, &pi, 3)).collect();
        let adv = [1.0, -1.0, 0.5, -0.5];
        let j = surrogate_main(&mains, &pi, &pi, &adv, &ClipConfig::default()).unwrap();
        assert!(j.abs() < 1e-15);
        let adv = [1.0, 1.0, 1.0, -2.0];
        let j = surrogate_main(&mains, &pi, &pi, &adv, &ClipConfig::default()).unwrap();
        assert!((j - 0.25).abs() < 1e-12);
    }

    #[test]
    fn on_policy_gradient_is_reinforce_with_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pi = policy(&mut rng, Role::Main, 5, 4, 1.0);
        let mains: Vec<_> = (0..6).map(|_| sample(&mut rng, &pi, 4)).collect();
        let adv: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = surrogate_grad(
            Role::Main,
            RoleBatch::Main {
                mains: &mains,
                adv: &adv,
            },
            &pi,
            &pi,
            &ClipConfig::default(),
        )
        .unwrap();
        let mut want = vec![0.0; g.len()];
        for (t, a) in mains.iter().zip(&adv) {
            for (w, x) in want.iter_mut().zip(pi.grad_sequence_logprob(t).unwrap()) {
                *w += a * x / 6.0;
            }
        }
        for (x, y) in g.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-6;
        let cfg = ClipConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        for _ in 0..40 {
            let old = policy(&mut rng, Role::Main, 3, 4, 1.0);
            let new = perturbed(&old, &mut rng, 0.15);
            let mains: Vec<_> = (0..4).map(|_| sample(&mut rng, &old, 2)).collect();
            let adv: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            // skip instances sitting near a clip kink
            let near_kink = mains.iter().any(|t| {
                let r = (new.sequence_logprob(t).unwrap() - old.sequence_logprob(t).unwrap()).exp();
                (r - 1.2).abs() < 1e-3 || (r - 0.8).abs() < 1e-3
            });
            if near_kink {
                continue;
            }
            let g = surrogate_grad(
                Role::Main,
                RoleBatch::Main {
                    mains: &mains,
                    adv: &adv,
                },
                &new,
                &old,
                &cfg,
            )
            .unwrap();
            for i in 0..g.len() {
                let shifted = |d: f64| {
                    let mut p = new.params.clone();
                    p.theta[i] += d;
                    surrogate_main(&mains, &new.with_params(p).unwrap(), &old, &adv, &cfg).unwrap()
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                    "{fd} vs {}",
                    g[i]
                );
            }
            checked += 1;
        }
        assert!(checked > 30);
    }

    #[test]
    fn sub_surrogate_skips_placeholders_but_keeps_the_normalizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let old = policy(&mut rng, Role::Sub, 3, 4, 1.0);
        let new = perturbed(&old, &mut rng, 0.1);
        let t = sample(&mut rng, &old, 3);
        let main = Trajectory::new(Role::Main);
        let batch = AlignedBatch {
            mains: vec![main.clone(), main],
            subs: vec![
                AlignedSub {
                    rollout: 0,
                    source: SubSource::Original(0),
                    trajectory: Some(t.clone()),
                },
                AlignedSub {
                    rollout: 0,
                    source: SubSource::DuplicateOf(0),
                    trajectory: Some(t.clone()),
                },
                AlignedSub {
                    rollout: 1,
                    source: SubSource::Placeholder,
                    trajectory: None,
                },
                AlignedSub {
                    rollout: 1,
                    source: SubSource::Placeholder,
                    trajectory: None,
                },
            ],
            d: 2,
        };
        let adv = vec![vec![0.5, 0.5], vec![0.0, 0.0]];
        let cfg = ClipConfig::default();
        let j = surrogate_sub(&batch, &new, &old, &adv, &cfg).unwrap();
        let r = (new.sequence_logprob(&t).unwrap() - old.sequence_logprob(&t).unwrap()).exp();
        assert!((j - 2.0 * cfg.term(r, 0.5) / 4.0).abs() < 1e-14);
        assert!(surrogate_sub(&batch, &new, &old, &[vec![0.5, 0.5]], &cfg).is_err());
        let g = surrogate_grad(
            Role::Sub,
            RoleBatch::Sub {
                batch: &batch,
                adv: &adv,
            },
            &new,
            &old,
            &cfg,
        )
        .unwrap();
        assert!(g.iter().all(|x| x.is_finite()));
        assert!(surrogate_grad(
            Role::Main,
            RoleBatch::Sub {
                batch: &batch,
                adv: &adv
            },
            &new,
            &old,
            &cfg
        )
        .is_err());
    }

    #[test]
    fn stale_behavior_logprob_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pi = policy(&mut rng, Role::Main, 3, 4, 1.0);
        let mut mains: Vec<_> = (0..2).map(|_| sample(&mut rng, &pi, 2)).collect();
        mains[1].steps[1].behavior_logprob += 1e-6;
        let err =
            surrogate_main(&mains, &pi, &pi, &[1.0, -1.0], &ClipConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DataIntegrity(_)), "{err}");
        let sub = policy(&mut rng, Role::Sub, 3, 4, 1.0);
        assert!(check_behavior(&mains[0], &sub).is_err());
    }

    #[test]
    fn update_steps_along_the_gradient() {
        let p = PolicyParams {
            role: Role::Sub,
            theta: vec![1.0, 2.0],
            version: 4,
        };
        let q = update(&p, &[0.5, -1.0], 0.1).unwrap();
        assert_eq!(q.theta, vec![1.05, 1.9]);
        assert_eq!((q.version, q.role), (5, Role::Sub));
        assert!(matches!(
            update(&p, &[f64::NAN, 0.0], 0.1),
            Err(Error::Numeric(_))
        ));
        assert!(update(&p, &[0.0], 0.1).is_err());
        assert!(update(&p, &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn bandit_reward_improves() {
        // one-step episodes, action 2 pays 1
        let cfg = ClipConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut pi = SoftmaxLinearPolicy::zeros(Role::Main, 1, 4);
        let expected = |pi: &SoftmaxLinearPolicy| pi.action_logprobs(&[1.0]).unwrap()[2].exp();
        let start = expected(&pi);
        for _ in 0..50 {
            let mains: Vec<Trajectory> = (0..8)
                .map(|_| {
                    let (a, lp) = pi.sample_action(&[1.0], &mut rng).unwrap();
                    let mut t = Trajectory::new(Role::Main);
                    t.steps.push(Step {
                        state: vec![1.0],
                        action: a as u32,
                        behavior_logprob: lp,
                        reward: 0.0,
                    });
                    t
                })
                .collect();
            let rewards: Vec<f64> = mains
                .iter()
                .map(|t| f64::from(t.steps[0].action == 2))
                .collect();
            let (_, adv) = crate::mgrpo::main_advantages(&rewards).unwrap();
            let g = surrogate_grad(
                Role::Main,
                RoleBatch::Main {
                    mains: &mains,
                    adv: &adv,
                },
                &pi,
                &pi,
                &cfg,
            )
            .unwrap();
            pi = pi
                .with_params(update(&pi.params, &g, 0.5).unwrap())
                .unwrap();
        }
        assert!(expected(&pi) > start + 0.3, "{start} -> {}", expected(&pi));
    }
}
