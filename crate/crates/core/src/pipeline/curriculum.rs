//! The two-stage curriculum, run either in one process or as two workers.

use std::thread;

use super::store::{DirStore, MemoryStore, Store};
use super::worker::{
    fetch_snapshot, fetch_sub_stats, initial_policies, initial_solo_policy, main_worker_step,
    publish_snapshot, reference_trainer_step, single_agent_step, step_queries, sub_worker_step,
    StepPlan, StepReport,
};
use crate::config::{Mode, RunConfig, StoreBackend};
use crate::error::{Error, Result};
use crate::eval::{eval_corpus, evaluate, Agents};
use crate::metrics::{MetricsRow, ObjectiveRow};
use crate::policy::SoftmaxLinearPolicy;

#[derive(Debug, Clone)]
pub struct CurriculumResult {
    pub rows: Vec<MetricsRow>,
    pub objectives: Vec<ObjectiveRow>,
    /// The main policy, or the single agent's policy.
    pub main: SoftmaxLinearPolicy,
    pub sub: Option<SoftmaxLinearPolicy>,
}

impl CurriculumResult {
    /// Evaluation success rates recorded during Stage 2.
    pub fn stage2_evals(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.stage == 2)
            .filter_map(|r| r.eval_success)
            .collect()
    }
}

struct Evaluator {
    corpus: Vec<(crate::trajectory::Query, crate::env::TaskSpec)>,
}

impl Evaluator {
    fn new(cfg: &RunConfig) -> Self {
        Evaluator {
            corpus: eval_corpus(&cfg.env(), cfg.seed, cfg.eval_episodes),
        }
    }

    fn run(&self, cfg: &RunConfig, agents: Agents<'_>) -> Result<Option<f64>> {
        Ok(evaluate(agents, &self.corpus, &cfg.env(), cfg.seed)?.success_rate())
    }
}

fn row(cfg: &RunConfig, r: &StepReport, eval_success: Option<f64>) -> MetricsRow {
    MetricsRow {
        step: r.plan.step,
        stage: r.plan.stage.number(),
        mode: cfg.mode.to_string(),
        mean_main_reward: r.mean_main_reward,
        mean_sub_reward: r.mean_sub_reward,
        eval_success,
        grad_norm_main: r.grad_norm_main,
        grad_norm_sub: r.grad_norm_sub,
    }
}

/// Runs Stage 1 then Stage 2 for `mode` and `seed`, overriding the
/// config's own `mode` and `seed`. The single-agent mode always runs in
/// one process; the others use `cfg.store`.
pub fn run_curriculum(cfg: &RunConfig, mode: Mode, seed: u64) -> Result<CurriculumResult> {
    let cfg = RunConfig {
        mode,
        seed,
        ..cfg.clone()
    };
    cfg.validate()?;
    match (mode, cfg.store) {
        (Mode::SingleAgent, _) => run_single_agent(&cfg),
        (_, StoreBackend::Reference) => run_reference(&cfg),
        (_, StoreBackend::Memory) => run_decoupled(&cfg, &MemoryStore::new()),
        (_, StoreBackend::Dir) => {
            let store = DirStore::open(cfg.output_dir.join("store"))?;
            if store.keys()?.iter().any(|k| k.run_id == cfg.run_id) {
                return Err(Error::Config(vec![format!(
                    "store {} already holds run {:?}; choose a new run_id or output_dir",
                    store.root().display(),
                    cfg.run_id
                )]));
            }
            run_decoupled(&cfg, &store)
        }
    }
}

/// Both policies updated in one process, one step after another.
pub fn run_reference(cfg: &RunConfig) -> Result<CurriculumResult> {
    let evaluator = Evaluator::new(cfg);
    let (mut main, mut sub) = initial_policies(cfg);
    let mut rows = Vec::new();
    let mut objectives = Vec::new();
    for step in 0..cfg.total_steps() {
        let plan = StepPlan::new(cfg, step);
        let (m, s, report) = reference_trainer_step(cfg, &plan, &main, &sub)?;
        main = m;
        sub = s;
        let eval = if plan.eval_due(cfg) {
            evaluator.run(
                cfg,
                Agents::Hierarchical {
                    main: &main,
                    sub: &sub,
                },
            )?
        } else {
            None
        };
        rows.push(row(cfg, &report, eval));
        objectives.extend(report.objectives);
    }
    Ok(CurriculumResult {
        rows,
        objectives,
        main,
        sub: Some(sub),
    })
}

pub fn run_single_agent(cfg: &RunConfig) -> Result<CurriculumResult> {
    let evaluator = Evaluator::new(cfg);
    let mut solo = initial_solo_policy(cfg);
    let mut rows = Vec::new();
    let mut objectives = Vec::new();
    for step in 0..cfg.total_steps() {
        let plan = StepPlan::new(cfg, step);
        let (p, report) = single_agent_step(cfg, &plan, &solo)?;
        solo = p;
        let eval = if plan.eval_due(cfg) {
            evaluator.run(cfg, Agents::Solo(&solo))?
        } else {
            None
        };
        rows.push(row(cfg, &report, eval));
        objectives.extend(report.objectives);
    }
    Ok(CurriculumResult {
        rows,
        objectives,
        main: solo,
        sub: None,
    })
}

/// What the main worker ends a run with.
pub struct MainRun {
    pub rows: Vec<MetricsRow>,
    pub objectives: Vec<ObjectiveRow>,
    pub main: SoftmaxLinearPolicy,
    /// The last sub snapshot it read.
    pub sub: SoftmaxLinearPolicy,
}

/// The main worker's whole run. It also evaluates, using the snapshot the
/// sub worker publishes after each step.
pub fn main_worker_loop(cfg: &RunConfig, store: &dyn Store) -> Result<MainRun> {
    let evaluator = Evaluator::new(cfg);
    let (mut main, _) = initial_policies(cfg);
    let mut sub = None;
    let mut rows = Vec::new();
    let mut objectives = Vec::new();
    for step in 0..cfg.total_steps() {
        let plan = StepPlan::new(cfg, step);
        let queries = step_queries(cfg, &plan);
        let upd = main_worker_step(cfg, &plan, &queries, &main, store)?;
        main = upd.policy;
        let stats = fetch_sub_stats(cfg, step, store)?;
        let eval = if plan.eval_due(cfg) {
            let snapshot = fetch_snapshot(cfg, step + 1, store)?;
            let rate = evaluator.run(
                cfg,
                Agents::Hierarchical {
                    main: &main,
                    sub: &snapshot,
                },
            )?;
            sub = Some(snapshot);
            rate
        } else {
            None
        };
        let report = StepReport {
            plan,
            mean_main_reward: upd.mean_reward,
            mean_sub_reward: stats.mean_reward,
            grad_norm_main: upd.grad_norm,
            grad_norm_sub: stats.grad_norm,
            objectives: Vec::new(),
        };
        rows.push(row(cfg, &report, eval));
        objectives.extend(upd.objectives);
    }
    let sub = match sub {
        Some(s) => s,
        None => fetch_snapshot(cfg, cfg.total_steps(), store)?,
    };
    Ok(MainRun {
        rows,
        objectives,
        main,
        sub,
    })
}

/// The sub worker's whole run; returns its final policy and objective rows.
pub fn sub_worker_loop(
    cfg: &RunConfig,
    store: &dyn Store,
) -> Result<(SoftmaxLinearPolicy, Vec<ObjectiveRow>)> {
    let (_, mut sub) = initial_policies(cfg);
    publish_snapshot(cfg, 0, &sub, store)?;
    let mut objectives = Vec::new();
    for step in 0..cfg.total_steps() {
        let plan = StepPlan::new(cfg, step);
        let upd = sub_worker_step(cfg, &plan, &sub, store)?;
        sub = upd.policy;
        objectives.extend(upd.objectives);
    }
    Ok((sub, objectives))
}

/// Runs the two workers on separate threads that share only `store`.
pub fn run_decoupled(cfg: &RunConfig, store: &dyn Store) -> Result<CurriculumResult> {
    let (main_run, sub_run) = thread::scope(|s| {
        let sub = s.spawn(|| sub_worker_loop(cfg, store));
        let main = main_worker_loop(cfg, store);
        (main, sub.join().expect("sub worker panicked"))
    });
    // report the root cause rather than the partner's timeout
    let (main_run, (sub, sub_objectives)) = match (main_run, sub_run) {
        (Ok(m), Ok(s)) => (m, s),
        (Err(e), Ok(_)) | (Ok(_), Err(e)) => return Err(e),
        (Err(m), Err(s)) => return Err(if m.is_retriable() { s } else { m }),
    };
    if sub != main_run.sub {
        return Err(Error::DataIntegrity(
            "sub worker's final policy differs from its last published snapshot".into(),
        ));
    }
    Ok(CurriculumResult {
        rows: main_run.rows,
        objectives: merge_by_step(main_run.objectives, sub_objectives),
        main: main_run.main,
        sub: Some(sub),
    })
}

/// Interleaves the two workers' objective rows the way the reference
/// trainer emits them: each step's main rows, then its sub rows.
fn merge_by_step(main: Vec<ObjectiveRow>, sub: Vec<ObjectiveRow>) -> Vec<ObjectiveRow> {
    let mut out = Vec::with_capacity(main.len() + sub.len());
    let mut sub = sub.into_iter().peekable();
    let mut main = main.into_iter().peekable();
    while let Some(step) = [main.peek().map(|r| r.step), sub.peek().map(|r| r.step)]
        .into_iter()
        .flatten()
        .min()
    {
        while let Some(r) = main.next_if(|r| r.step == step) {
            out.push(r);
        }
        while let Some(r) = sub.next_if(|r| r.step == step) {
            out.push(r);
        }
    }
    out
}
