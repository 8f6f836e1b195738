//! One training step, split the way the two workers split it.
//!
//! [`main_update`] and [`sub_update`] hold all of the arithmetic. The
//! reference trainer calls them back to back; the workers call them on
//! either side of the store. Reductions run in query order, so both paths
//! produce bit-identical parameters.

use std::time::Duration;

use rand::Rng;
use rayon::prelude::*;

use super::store::{
    decode_query_ids, encode_query_ids, MainRewardRecord, RecordKind, Store, StoreKey, SubStats,
};
use crate::config::{Mode, RunConfig};
use crate::env::{
    derive_rng, generate_query, parse_query_id, run_rollout, run_solo_rollout, ActionVocab,
    AgentKind, MainState, SampleActor, SoloState, SubState, TaskSpec,
};
use crate::error::{Error, Result};
use crate::metrics::ObjectiveRow;
use crate::mgrpo::{
    align_indices, l2_norm, main_advantages, per_rollout_advantages, sub_advantages_masked,
    surrogate_with_grad, update, GroupStats, SurrogateEntry,
};
use crate::policy::SoftmaxLinearPolicy;
use crate::record::{deserialize_trajectories, serialize_trajectories};
use crate::rewards::{expert_score, main_reward, sub_reward};
use crate::trajectory::{Query, RewardWeights, Role, Rollout, RolloutGroup, Stage, Trajectory};

const QUERIES: u64 = 1;
const ROLLOUTS: u64 = 2;
const ALIGNMENT: u64 = 3;

/// What one global step does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPlan {
    pub step: u64,
    pub stage: Stage,
    pub train_sub: bool,
    pub align: bool,
}

impl StepPlan {
    pub fn new(cfg: &RunConfig, step: u64) -> Self {
        let stage2 = step >= cfg.stage1_steps;
        StepPlan {
            step,
            stage: if stage2 { Stage::Stage2 } else { Stage::Stage1 },
            train_sub: !(stage2 && cfg.mode == Mode::MainOnly),
            align: !(stage2 && cfg.mode == Mode::NoSync),
        }
    }

    /// Step index within its stage.
    pub fn local_step(&self, cfg: &RunConfig) -> u64 {
        match self.stage {
            Stage::Stage1 => self.step,
            Stage::Stage2 => self.step - cfg.stage1_steps,
        }
    }

    /// Evaluate after this step: on the stage's cadence, and after the last.
    pub fn eval_due(&self, cfg: &RunConfig) -> bool {
        (self.local_step(cfg) + 1) % cfg.eval_every == 0 || self.step + 1 == cfg.total_steps()
    }
}

fn policy_for(kind: AgentKind, cfg: &RunConfig) -> SoftmaxLinearPolicy {
    let env = cfg.env();
    let (role, fd) = match kind {
        AgentKind::Main => (Role::Main, MainState::feature_dim(&env)),
        AgentKind::Sub => (Role::Sub, SubState::feature_dim(&env)),
        AgentKind::Solo => (Role::Main, SoloState::feature_dim(&env)),
    };
    SoftmaxLinearPolicy::zeros(role, fd, ActionVocab::new(kind, &env).len())
}

/// Zero-initialized (uniform) main and sub policies.
pub fn initial_policies(cfg: &RunConfig) -> (SoftmaxLinearPolicy, SoftmaxLinearPolicy) {
    (
        policy_for(AgentKind::Main, cfg),
        policy_for(AgentKind::Sub, cfg),
    )
}

pub fn initial_solo_policy(cfg: &RunConfig) -> SoftmaxLinearPolicy {
    policy_for(AgentKind::Solo, cfg)
}

/// The step's training queries, drawn from the run seed.
pub fn step_queries(cfg: &RunConfig, plan: &StepPlan) -> Vec<(Query, TaskSpec)> {
    let env = cfg.env();
    let mut rng = derive_rng(cfg.seed, &[QUERIES, plan.step]);
    (0..cfg.queries_per_step)
        .map(|_| generate_query(plan.stage, rng.gen(), &env))
        .collect()
}

/// K rollouts per query, sampled in parallel from per-rollout streams.
pub fn generate_groups(
    cfg: &RunConfig,
    plan: &StepPlan,
    queries: &[(Query, TaskSpec)],
    main: &SoftmaxLinearPolicy,
    sub: Option<&SoftmaxLinearPolicy>,
) -> Result<Vec<RolloutGroup>> {
    let env = cfg.env();
    let k = cfg.k;
    let rollouts: Vec<Rollout> = (0..queries.len() * k)
        .into_par_iter()
        .map(|i| {
            let (j, kk) = (i / k, i % k);
            let (query, spec) = &queries[j];
            let mut rng = derive_rng(cfg.seed, &[ROLLOUTS, plan.step, j as u64, kk as u64]);
            match sub {
                Some(sub) => run_rollout(
                    query,
                    spec,
                    &env,
                    &mut SampleActor(main),
                    &mut SampleActor(sub),
                    &mut rng,
                ),
                None => run_solo_rollout(query, spec, &env, &mut SampleActor(main), &mut rng),
            }
        })
        .collect::<Result<_>>()?;
    let mut rollouts = rollouts.into_iter();
    queries
        .iter()
        .map(|(q, _)| RolloutGroup::new(q.clone(), rollouts.by_ref().take(k).collect()))
        .collect()
}

/// Per-query surrogate values and gradients, reduced in query order.
struct Reduced {
    grad: Vec<f64>,
    objectives: Vec<ObjectiveRow>,
}

fn reduce(
    step: u64,
    role: Role,
    parts: Vec<(String, GroupStats, f64, Vec<f64>)>,
    len: usize,
) -> Reduced {
    let mut grad = vec![0.0; len];
    let mut objectives = Vec::with_capacity(parts.len());
    let scale = 1.0 / parts.len().max(1) as f64;
    for (query_id, stats, objective, g) in parts {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += scale * b;
        }
        objectives.push(ObjectiveRow {
            step,
            role: role.to_string(),
            query_id,
            mean: stats.mean,
            std: stats.std,
            objective,
            grad_norm: l2_norm(&g),
        });
    }
    Reduced { grad, objectives }
}

#[derive(Debug, Clone)]
pub struct MainUpdate {
    pub policy: SoftmaxLinearPolicy,
    /// `records[j][k]`: reward of rollout k of query j.
    pub records: Vec<Vec<MainRewardRecord>>,
    pub mean_reward: f64,
    pub grad_norm: f64,
    pub objectives: Vec<ObjectiveRow>,
}

/// Scores the main trajectories and takes one ascent step on the main
/// surrogate, averaged over queries.
pub fn main_update(
    cfg: &RunConfig,
    plan: &StepPlan,
    groups: &[RolloutGroup],
    pi: &SoftmaxLinearPolicy,
) -> Result<MainUpdate> {
    let w = cfg.weights();
    let clip = cfg.clip_main();
    let per_query = groups
        .par_iter()
        .map(|g| {
            let records: Vec<MainRewardRecord> = g
                .rollouts
                .iter()
                .map(|r| {
                    let b = main_reward(&r.main.output, &g.query.ground_truth, &w);
                    MainRewardRecord {
                        r_correct_main: b.correct,
                        main_format_ok: b.format_ok,
                        main_total: b.total,
                    }
                })
                .collect();
            let totals: Vec<f64> = records.iter().map(|r| r.main_total).collect();
            let (stats, adv) = main_advantages(&totals)?;
            let entries: Vec<SurrogateEntry<'_>> = g
                .rollouts
                .iter()
                .zip(&adv)
                .map(|(r, &a)| SurrogateEntry {
                    trajectory: Some(&r.main),
                    advantage: a,
                })
                .collect();
            let (objective, grad) = surrogate_with_grad(&entries, g.k(), pi, pi, &clip)?;
            Ok((records, (g.query.id.clone(), stats, objective, grad)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (records, parts): (Vec<_>, Vec<_>) = per_query.into_iter().unzip();
    let n: usize = records.iter().map(Vec::len).sum();
    let mean_reward = records.iter().flatten().map(|r| r.main_total).sum::<f64>() / n.max(1) as f64;
    let reduced = reduce(plan.step, Role::Main, parts, pi.params.theta.len());
    let policy = pi.with_params(update(&pi.params, &reduced.grad, cfg.lr_main)?)?;
    Ok(MainUpdate {
        policy,
        records,
        mean_reward,
        grad_norm: l2_norm(&reduced.grad),
        objectives: reduced.objectives,
    })
}

/// Everything the sub worker needs about one query.
#[derive(Debug, Clone)]
pub struct SubGroup {
    pub query_id: String,
    pub spec: TaskSpec,
    pub records: Vec<MainRewardRecord>,
    /// `subs[k]`: sub-trajectories of rollout k, in invocation order.
    pub subs: Vec<Vec<Trajectory>>,
}

#[derive(Debug, Clone)]
pub struct SubUpdate {
    pub policy: SoftmaxLinearPolicy,
    pub mean_reward: Option<f64>,
    pub grad_norm: Option<f64>,
    pub objectives: Vec<ObjectiveRow>,
}

/// Recomputes what a replicated main reward must look like.
pub fn check_record(r: &MainRewardRecord, w: &RewardWeights) -> Result<()> {
    let expected = if !r.main_format_ok {
        (0.0, 0.0)
    } else if r.r_correct_main == 0.0 || r.r_correct_main == 1.0 {
        (r.r_correct_main, w.alpha1 + w.alpha2 * r.r_correct_main)
    } else {
        return Err(Error::DataIntegrity(format!(
            "main correctness {} is not 0 or 1",
            r.r_correct_main
        )));
    };
    if (r.r_correct_main, r.main_total) != expected {
        return Err(Error::DataIntegrity(format!(
            "main reward record {r:?} disagrees with recomputed (correct, total) = {expected:?}"
        )));
    }
    Ok(())
}

/// Scores sub-trajectories, aligns them (unless the plan says not to),
/// pools their advantages and takes one ascent step on the sub surrogate.
pub fn sub_update(
    cfg: &RunConfig,
    plan: &StepPlan,
    groups: &[SubGroup],
    pi: &SoftmaxLinearPolicy,
) -> Result<SubUpdate> {
    let w = cfg.weights();
    let clip = cfg.clip_sub();
    let vocab = ActionVocab::new(AgentKind::Sub, &cfg.env());
    let d = cfg.d;
    let per_query = groups
        .par_iter()
        .enumerate()
        .map(|(j, g)| {
            if g.records.len() != g.subs.len() || g.records.len() < 2 {
                return Err(Error::DataIntegrity(format!(
                    "query {}: {} reward records for {} rollouts",
                    g.query_id,
                    g.records.len(),
                    g.subs.len()
                )));
            }
            let mut rewards = Vec::with_capacity(g.subs.len());
            for (rec, subs) in g.records.iter().zip(&g.subs) {
                check_record(rec, &w)?;
                let row = subs
                    .iter()
                    .map(|t| {
                        let expert = expert_score(t, &g.spec, &vocab)?;
                        Ok(sub_reward(&t.output, rec.r_correct_main, expert, &w)?.total)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                rewards.push(row);
            }
            let sum: f64 = rewards.iter().flatten().sum();
            let count = rewards.iter().map(Vec::len).sum::<usize>();
            if !plan.train_sub {
                return Ok((sum, count, None));
            }
            let (stats, entries, norm) = if plan.align {
                let mut table = Vec::with_capacity(g.subs.len());
                let mut sources = Vec::with_capacity(g.subs.len());
                for (k, row) in rewards.iter().enumerate() {
                    let mut rng = derive_rng(cfg.seed, &[ALIGNMENT, plan.step, j as u64, k as u64]);
                    let plan_k = align_indices(row.len(), d, &mut rng)?;
                    table.push(
                        plan_k
                            .iter()
                            .map(|s| s.origin().map(|i| row[i]))
                            .collect::<Vec<_>>(),
                    );
                    sources.push(plan_k);
                }
                let (stats, adv) = sub_advantages_masked(&table)?;
                let entries: Vec<SurrogateEntry<'_>> = sources
                    .iter()
                    .zip(&adv)
                    .enumerate()
                    .flat_map(|(k, (src, a))| {
                        src.iter().zip(a).map(move |(s, &a)| SurrogateEntry {
                            trajectory: s.origin().map(|i| &g.subs[k][i]),
                            advantage: a,
                        })
                    })
                    .collect();
                (stats, entries, d * g.subs.len())
            } else {
                let adv = per_rollout_advantages(&rewards)?;
                let flat: Vec<f64> = rewards.iter().flatten().copied().collect();
                let entries: Vec<SurrogateEntry<'_>> = g
                    .subs
                    .iter()
                    .flatten()
                    .zip(adv.iter().flatten())
                    .map(|(t, &a)| SurrogateEntry {
                        trajectory: Some(t),
                        advantage: a,
                    })
                    .collect();
                (GroupStats::of(&flat), entries, count.max(1))
            };
            let (objective, grad) = surrogate_with_grad(&entries, norm, pi, pi, &clip)?;
            Ok((
                sum,
                count,
                Some((g.query_id.clone(), stats, objective, grad)),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let count: usize = per_query.iter().map(|p| p.1).sum();
    let mean_reward =
        (count > 0).then(|| per_query.iter().map(|p| p.0).sum::<f64>() / count as f64);
    if !plan.train_sub {
        return Ok(SubUpdate {
            policy: pi.clone(),
            mean_reward,
            grad_norm: None,
            objectives: Vec::new(),
        });
    }
    let parts: Vec<_> = per_query.into_iter().filter_map(|p| p.2).collect();
    let reduced = reduce(plan.step, Role::Sub, parts, pi.params.theta.len());
    let policy = pi.with_params(update(&pi.params, &reduced.grad, cfg.lr_sub)?)?;
    Ok(SubUpdate {
        policy,
        mean_reward,
        grad_norm: Some(l2_norm(&reduced.grad)),
        objectives: reduced.objectives,
    })
}

fn sub_groups(
    queries: &[(Query, TaskSpec)],
    groups: &[RolloutGroup],
    records: &[Vec<MainRewardRecord>],
) -> Vec<SubGroup> {
    queries
        .iter()
        .zip(groups)
        .zip(records)
        .map(|(((q, spec), g), recs)| SubGroup {
            query_id: q.id.clone(),
            spec: spec.clone(),
            records: recs.clone(),
            subs: g.rollouts.iter().map(|r| r.subs.clone()).collect(),
        })
        .collect()
}

/// Scalars reported for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub plan: StepPlan,
    pub mean_main_reward: f64,
    pub mean_sub_reward: Option<f64>,
    pub grad_norm_main: f64,
    pub grad_norm_sub: Option<f64>,
    pub objectives: Vec<ObjectiveRow>,
}

/// Both updates of one step in a single process.
pub fn reference_trainer_step(
    cfg: &RunConfig,
    plan: &StepPlan,
    main: &SoftmaxLinearPolicy,
    sub: &SoftmaxLinearPolicy,
) -> Result<(SoftmaxLinearPolicy, SoftmaxLinearPolicy, StepReport)> {
    let queries = step_queries(cfg, plan);
    let groups = generate_groups(cfg, plan, &queries, main, Some(sub))?;
    let m = main_update(cfg, plan, &groups, main)?;
    let s = sub_update(cfg, plan, &sub_groups(&queries, &groups, &m.records), sub)?;
    let mut objectives = m.objectives;
    objectives.extend(s.objectives);
    let report = StepReport {
        plan: *plan,
        mean_main_reward: m.mean_reward,
        mean_sub_reward: s.mean_reward,
        grad_norm_main: m.grad_norm,
        grad_norm_sub: s.grad_norm,
        objectives,
    };
    Ok((m.policy, s.policy, report))
}

/// One single-agent step: solo rollouts, scored and trained like the main agent.
pub fn single_agent_step(
    cfg: &RunConfig,
    plan: &StepPlan,
    solo: &SoftmaxLinearPolicy,
) -> Result<(SoftmaxLinearPolicy, StepReport)> {
    let queries = step_queries(cfg, plan);
    let groups = generate_groups(cfg, plan, &queries, solo, None)?;
    let m = main_update(cfg, plan, &groups, solo)?;
    let report = StepReport {
        plan: *plan,
        mean_main_reward: m.mean_reward,
        mean_sub_reward: None,
        grad_norm_main: m.grad_norm,
        grad_norm_sub: None,
        objectives: m.objectives,
    };
    Ok((m.policy, report))
}

fn timeout(cfg: &RunConfig) -> Duration {
    Duration::from_secs(cfg.store_timeout_secs)
}

fn snapshot_key(cfg: &RunConfig, step: u64) -> StoreKey {
    StoreKey::step_level(&cfg.run_id, step, RecordKind::SubPolicySnapshot)
}

/// Publishes the sub policy the main worker will sample from at `step`.
pub fn publish_snapshot(
    cfg: &RunConfig,
    step: u64,
    sub: &SoftmaxLinearPolicy,
    store: &dyn Store,
) -> Result<()> {
    store.put(&snapshot_key(cfg, step), &sub.to_checkpoint())
}

pub fn fetch_snapshot(
    cfg: &RunConfig,
    step: u64,
    store: &dyn Store,
) -> Result<SoftmaxLinearPolicy> {
    SoftmaxLinearPolicy::from_checkpoint(&store.wait_one(&snapshot_key(cfg, step), timeout(cfg))?)
}

pub fn fetch_sub_stats(cfg: &RunConfig, step: u64, store: &dyn Store) -> Result<SubStats> {
    let key = StoreKey::step_level(&cfg.run_id, step, RecordKind::SubStats);
    SubStats::from_bytes(&store.wait_one(&key, timeout(cfg))?)
}

/// Main side of a step: sample with the published sub snapshot, write
/// rewards and sub-trajectories, update the main policy, then the barrier.
pub fn main_worker_step(
    cfg: &RunConfig,
    plan: &StepPlan,
    queries: &[(Query, TaskSpec)],
    main: &SoftmaxLinearPolicy,
    store: &dyn Store,
) -> Result<MainUpdate> {
    if queries.is_empty() {
        return Ok(MainUpdate {
            policy: main.clone(),
            records: Vec::new(),
            mean_reward: 0.0,
            grad_norm: 0.0,
            objectives: Vec::new(),
        });
    }
    let sub = fetch_snapshot(cfg, plan.step, store)?;
    let groups = generate_groups(cfg, plan, queries, main, Some(&sub))?;
    let upd = main_update(cfg, plan, &groups, main)?;
    for (g, recs) in groups.iter().zip(&upd.records) {
        for (k, (r, rec)) in g.rollouts.iter().zip(recs).enumerate() {
            let key = |kind| StoreKey::new(&cfg.run_id, plan.step, &g.query.id, k as u32, kind);
            store.put(&key(RecordKind::MainReward), &rec.to_bytes())?;
            store.put(
                &key(RecordKind::SubTrajectoryRef),
                &serialize_trajectories(&r.subs)?,
            )?;
        }
    }
    let ids: Vec<String> = queries.iter().map(|(q, _)| q.id.clone()).collect();
    store.put(
        &StoreKey::step_level(&cfg.run_id, plan.step, RecordKind::Barrier),
        &encode_query_ids(&ids),
    )?;
    Ok(upd)
}

/// Sub side of a step: wait for the barrier, rebuild the step's inputs
/// from the store, update the sub policy and publish the next snapshot.
pub fn sub_worker_step(
    cfg: &RunConfig,
    plan: &StepPlan,
    sub: &SoftmaxLinearPolicy,
    store: &dyn Store,
) -> Result<SubUpdate> {
    let barrier = store.wait_one(
        &StoreKey::step_level(&cfg.run_id, plan.step, RecordKind::Barrier),
        timeout(cfg),
    )?;
    let ids = decode_query_ids(&barrier)?;
    let env = cfg.env();
    let mut keys = Vec::new();
    for id in &ids {
        for k in 0..cfg.k as u32 {
            keys.push(StoreKey::new(
                &cfg.run_id,
                plan.step,
                id,
                k,
                RecordKind::MainReward,
            ));
            keys.push(StoreKey::new(
                &cfg.run_id,
                plan.step,
                id,
                k,
                RecordKind::SubTrajectoryRef,
            ));
        }
    }
    let mut payloads = store.wait(&keys, timeout(cfg))?;
    let mut take = |key: &StoreKey| payloads.remove(key).expect("wait returned every key");
    let mut groups = Vec::with_capacity(ids.len());
    for id in &ids {
        let (stage, seed) = parse_query_id(id)
            .filter(|(s, _)| *s == plan.stage)
            .ok_or_else(|| {
                Error::DataIntegrity(format!("step {} lists unexpected query {id:?}", plan.step))
            })?;
        let (_, spec) = generate_query(stage, seed, &env);
        let mut records = Vec::with_capacity(cfg.k);
        let mut subs = Vec::with_capacity(cfg.k);
        for k in 0..cfg.k as u32 {
            let key = |kind| StoreKey::new(&cfg.run_id, plan.step, id, k, kind);
            records.push(MainRewardRecord::from_bytes(&take(&key(
                RecordKind::MainReward,
            )))?);
            let ts = deserialize_trajectories(&take(&key(RecordKind::SubTrajectoryRef)))?;
            if let Some(t) = ts.iter().find(|t| t.role != Role::Sub) {
                return Err(Error::DataIntegrity(format!(
                    "{id}/{k}: {} trajectory among sub payloads",
                    t.role
                )));
            }
            subs.push(ts);
        }
        groups.push(SubGroup {
            query_id: id.clone(),
            spec,
            records,
            subs,
        });
    }
    let upd = sub_update(cfg, plan, &groups, sub)?;
    let stats = SubStats {
        mean_reward: upd.mean_reward,
        grad_norm: upd.grad_norm,
    };
    store.put(
        &StoreKey::step_level(&cfg.run_id, plan.step, RecordKind::SubStats),
        &stats.to_bytes(),
    )?;
    publish_snapshot(cfg, plan.step + 1, &upd.policy, store)?;
    store.mark_complete(&cfg.run_id, plan.step)?;
    Ok(upd)
}
