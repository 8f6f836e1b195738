//! Greedy-decoding evaluation on a fixed task corpus.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{
    derive_rng, generate_query, run_rollout, run_solo_rollout, ActionVocab, AgentKind, EnvConfig,
    GreedyActor, MainState, OracleActor, SoloState, SubState, TaskSpec,
};
use crate::error::{Error, Result};
use crate::policy::SoftmaxLinearPolicy;
use crate::rewards::validate_format;
use crate::trajectory::{Query, Role, Stage, Token};

const EVAL_NOISE: u64 = 0x6576_616c;
const EVAL_CORPUS: u64 = 0x636f_7270;

/// Who answers the evaluation episodes.
#[derive(Debug, Clone, Copy)]
pub enum Agents<'a> {
    Hierarchical {
        main: &'a SoftmaxLinearPolicy,
        sub: &'a SoftmaxLinearPolicy,
    },
    Solo(&'a SoftmaxLinearPolicy),
    /// The scripted solver; a reference point, not a learner.
    Oracle {
        visit: bool,
    },
}

fn check_shape(p: &SoftmaxLinearPolicy, role: Role, fd: usize, v: usize, what: &str) -> Result<()> {
    if p.role() != role || p.feature_dim != fd || p.vocab_size != v {
        return Err(Error::contract(format!(
            "{what} checkpoint is a {} policy with {} features x {} actions; \
             this environment needs a {role} policy with {fd} x {v}",
            p.role(),
            p.feature_dim,
            p.vocab_size
        )));
    }
    Ok(())
}

impl Agents<'_> {
    /// Rejects checkpoints whose shape does not fit the environment.
    pub fn check(&self, env: &EnvConfig) -> Result<()> {
        match *self {
            Agents::Hierarchical { main, sub } => {
                check_shape(
                    main,
                    Role::Main,
                    MainState::feature_dim(env),
                    ActionVocab::new(AgentKind::Main, env).len(),
                    "main",
                )?;
                check_shape(
                    sub,
                    Role::Sub,
                    SubState::feature_dim(env),
                    ActionVocab::new(AgentKind::Sub, env).len(),
                    "sub",
                )
            }
            Agents::Solo(p) => check_shape(
                p,
                Role::Main,
                SoloState::feature_dim(env),
                ActionVocab::new(AgentKind::Solo, env).len(),
                "single-agent",
            ),
            Agents::Oracle { .. } => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub query_id: String,
    pub hops: usize,
    pub invocations: usize,
    pub format_ok: bool,
    pub success: bool,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeLog>,
}

impl EvalReport {
    /// `None` when no episodes ran.
    pub fn success_rate(&self) -> Option<f64> {
        if self.episodes.is_empty() {
            return None;
        }
        let wins = self.episodes.iter().filter(|e| e.success).count();
        Some(wins as f64 / self.episodes.len() as f64)
    }

    pub fn write_log<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.episodes {
            w.serialize(e).map_err(|e| Error::Decode(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<episode log>", e))
    }
}

fn render(output: &[Token]) -> String {
    output
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

/// The fixed evaluation tasks for a run seed: `n` Stage 2 queries.
pub fn eval_corpus(env: &EnvConfig, seed: u64, n: usize) -> Vec<(Query, TaskSpec)> {
    let mut rng = derive_rng(seed, &[EVAL_CORPUS]);
    (0..n)
        .map(|_| generate_query(Stage::Stage2, rng.gen(), env))
        .collect()
}

/// Runs one greedy episode per corpus entry, in parallel, with per-episode
/// tool-noise streams so the result depends only on `seed`.
pub fn evaluate(
    agents: Agents<'_>,
    corpus: &[(Query, TaskSpec)],
    env: &EnvConfig,
    seed: u64,
) -> Result<EvalReport> {
    agents.check(env)?;
    let episodes = corpus
        .par_iter()
        .enumerate()
        .map(|(i, (query, spec))| {
            let mut rng = derive_rng(seed, &[EVAL_NOISE, i as u64]);
            let rollout = match agents {
                Agents::Hierarchical { main, sub } => run_rollout(
                    query,
                    spec,
                    env,
                    &mut GreedyActor(main),
                    &mut GreedyActor(sub),
                    &mut rng,
                )?,
                Agents::Solo(p) => {
                    run_solo_rollout(query, spec, env, &mut GreedyActor(p), &mut rng)?
                }
                Agents::Oracle { visit } => run_rollout(
                    query,
                    spec,
                    env,
                    &mut OracleActor { visit },
                    &mut OracleActor { visit },
                    &mut rng,
                )?,
            };
            let out = &rollout.main.output;
            let format_ok = validate_format(out);
            Ok(EpisodeLog {
                episode: i,
                query_id: query.id.clone(),
                hops: spec.hop_count,
                invocations: rollout.invocations(),
                format_ok,
                success: format_ok && out[1..out.len() - 1] == query.ground_truth[..],
                output: render(out),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { episodes })
}
