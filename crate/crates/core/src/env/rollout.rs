//! Rollout generation: one main trajectory with nested, synchronous
//! sub-agent calls.

use std::collections::VecDeque;

use super::{
    deliver_sub_result, step_main, step_solo, step_sub, Action, ActionVocab, AgentKind, EnvConfig,
    EnvRng, MainEvent, MainState, SoloState, SubState, TaskSpec,
};
use crate::error::{Error, Result};
use crate::policy::SoftmaxLinearPolicy;
use crate::trajectory::{validate_rollout, Query, Role, Rollout, Step, Trajectory};

/// Structured state behind an observation. Learned policies only look at
/// [`Observation::features`]; scripted oracles may inspect the view.
#[derive(Debug, Clone, Copy)]
pub enum View<'a> {
    Main(&'a MainState),
    Sub(&'a SubState),
    Solo(&'a SoloState),
}

#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub features: &'a [f64],
    pub view: View<'a>,
    pub vocab: &'a ActionVocab,
    pub spec: &'a TaskSpec,
}

/// Chooses actions. Returns the action index and its log-probability under
/// the acting distribution.
pub trait Actor {
    fn act(&mut self, obs: &Observation<'_>, rng: &mut EnvRng) -> Result<(u32, f64)>;

    /// Called before each new trajectory this actor drives.
    fn begin_episode(&mut self) {}
}

fn check_vocab(policy: &SoftmaxLinearPolicy, obs: &Observation<'_>) -> Result<()> {
    if policy.vocab_size != obs.vocab.len() {
        return Err(Error::contract(format!(
            "{} policy has {} actions, {:?} vocabulary has {}",
            policy.params.role,
            policy.vocab_size,
            obs.vocab.kind(),
            obs.vocab.len()
        )));
    }
    Ok(())
}

/// Samples from a softmax policy.
pub struct SampleActor<'p>(pub &'p SoftmaxLinearPolicy);

impl Actor for SampleActor<'_> {
    fn act(&mut self, obs: &Observation<'_>, rng: &mut EnvRng) -> Result<(u32, f64)> {
        check_vocab(self.0, obs)?;
        let (a, lp) = self.0.sample_action(obs.features, rng)?;
        Ok((a as u32, lp))
    }
}

/// Takes the most likely action; ties go to the lowest index.
pub struct GreedyActor<'p>(pub &'p SoftmaxLinearPolicy);

impl Actor for GreedyActor<'_> {
    fn act(&mut self, obs: &Observation<'_>, _rng: &mut EnvRng) -> Result<(u32, f64)> {
        check_vocab(self.0, obs)?;
        let lps = self.0.action_logprobs(obs.features)?;
        let (a, lp) = lps
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &lp)| {
                if lp > best.1 {
                    (i, lp)
                } else {
                    best
                }
            });
        Ok((a as u32, lp))
    }
}

/// Replays fixed action scripts, one per episode; `Stop` once a script
/// runs out. The last script repeats when no more are queued.
pub struct ScriptedActor {
    queued: VecDeque<Vec<Action>>,
    current: Vec<Action>,
    pos: usize,
}

impl ScriptedActor {
    pub fn new(episodes: Vec<Vec<Action>>) -> Self {
        ScriptedActor {
            queued: episodes.into(),
            current: Vec::new(),
            pos: 0,
        }
    }

    pub fn repeating(script: Vec<Action>) -> Self {
        Self::new(vec![script])
    }
}

impl Actor for ScriptedActor {
    fn act(&mut self, obs: &Observation<'_>, _rng: &mut EnvRng) -> Result<(u32, f64)> {
        let action = self.current.get(self.pos).copied().unwrap_or(Action::Stop);
        self.pos += 1;
        Ok((obs.vocab.encode(action)?, 0.0))
    }

    fn begin_episode(&mut self) {
        if let Some(next) = self.queued.pop_front() {
            self.current = next;
        }
        self.pos = 0;
    }
}

/// Solves tasks from the hidden task data. With `visit` set it confirms
/// every search by visiting, which defeats search noise.
#[derive(Debug, Clone, Copy)]
pub struct OracleActor {
    pub visit: bool,
}

impl OracleActor {
    fn choose(&self, obs: &Observation<'_>) -> Action {
        match obs.view {
            View::Main(st) => {
                if st.next_unresolved().is_some() {
                    Action::Delegate(0)
                } else if !st.begun() {
                    Action::Begin
                } else {
                    st.pending_token().map_or(Action::End, |_| Action::Copy)
                }
            }
            View::Sub(st) => {
                let key = st.key as u8;
                if !st.has_searched(st.key) {
                    Action::Search(key)
                } else if self.visit && !st.last_from_visit && !st.begun() {
                    Action::Visit
                } else if !st.begun() {
                    Action::Begin
                } else if st.payload_len() == 0 {
                    match st.last_result {
                        Some(t) if t.is_content() => Action::Copy,
                        _ => Action::Stop,
                    }
                } else {
                    Action::End
                }
            }
            View::Solo(st) => {
                let unconfirmed = st
                    .last_key
                    .filter(|k| self.visit && !st.last_from_visit && st.hop_keys().contains(k));
                if let (Some(_), false) = (unconfirmed, st.begun()) {
                    Action::Visit
                } else if let Some(k) = st.current_key() {
                    Action::Search(k as u8)
                } else if !st.begun() {
                    Action::Begin
                } else {
                    st.pending_token().map_or(Action::End, |_| Action::Copy)
                }
            }
        }
    }
}

impl Actor for OracleActor {
    fn act(&mut self, obs: &Observation<'_>, _rng: &mut EnvRng) -> Result<(u32, f64)> {
        Ok((obs.vocab.encode(self.choose(obs))?, 0.0))
    }
}

fn record_step(traj: &mut Trajectory, features: Vec<f64>, action: u32, logprob: f64) {
    traj.steps.push(Step {
        state: features,
        action,
        behavior_logprob: logprob,
        reward: 0.0,
    });
}

fn run_sub(
    query: &Query,
    spec: &TaskSpec,
    cfg: &EnvConfig,
    key: u32,
    vocab: &ActionVocab,
    actor: &mut dyn Actor,
    rng: &mut EnvRng,
) -> Result<Trajectory> {
    let mut st = SubState::new(key, cfg);
    let mut traj = Trajectory::new(Role::Sub);
    traj.subtask_key = Some(key);
    actor.begin_episode();
    while !st.terminated {
        let features = st.observation(query, cfg);
        let obs = Observation {
            features: &features,
            view: View::Sub(&st),
            vocab,
            spec,
        };
        let (a, lp) = actor.act(&obs, rng)?;
        let action = vocab.decode(a)?;
        st = step_sub(&st, action, spec, cfg, rng)?.0;
        record_step(&mut traj, features, a, lp);
    }
    traj.output = st.output().to_vec();
    traj.terminated = true;
    Ok(traj)
}

/// Runs one rollout. Each delegation runs a complete sub-trajectory before
/// the main agent acts again; the sub's answer shows up in the main
/// agent's next observation. Running out of budget ends a trajectory with
/// whatever it emitted so far.
pub fn run_rollout(
    query: &Query,
    spec: &TaskSpec,
    cfg: &EnvConfig,
    main: &mut dyn Actor,
    sub: &mut dyn Actor,
    rng: &mut EnvRng,
) -> Result<Rollout> {
    let main_vocab = ActionVocab::new(AgentKind::Main, cfg);
    let sub_vocab = ActionVocab::new(AgentKind::Sub, cfg);
    let mut st = MainState::new(spec, cfg);
    let mut traj = Trajectory::new(Role::Main);
    let mut subs = Vec::new();
    main.begin_episode();
    while !st.terminated {
        let features = st.observation(query, cfg);
        let obs = Observation {
            features: &features,
            view: View::Main(&st),
            vocab: &main_vocab,
            spec,
        };
        let (a, lp) = main.act(&obs, rng)?;
        let action = main_vocab.decode(a)?;
        let (next, event) = step_main(&st, action, spec)?;
        record_step(&mut traj, features, a, lp);
        st = next;
        if let Some(MainEvent::SubInvocation { slot, key }) = event {
            let sub_traj = run_sub(query, spec, cfg, key, &sub_vocab, sub, rng)?;
            st = deliver_sub_result(&st, slot, &sub_traj.output);
            subs.push(sub_traj);
        }
    }
    traj.output = st.output().to_vec();
    traj.terminated = true;
    let rollout = Rollout {
        query_id: query.id.clone(),
        main: traj,
        subs,
    };
    debug_assert!(validate_rollout(&rollout).is_empty());
    Ok(rollout)
}

/// Runs the single-agent variant: one trajectory, no sub-agent.
pub fn run_solo_rollout(
    query: &Query,
    spec: &TaskSpec,
    cfg: &EnvConfig,
    actor: &mut dyn Actor,
    rng: &mut EnvRng,
) -> Result<Rollout> {
    let vocab = ActionVocab::new(AgentKind::Solo, cfg);
    let mut st = SoloState::new(spec, cfg);
    let mut traj = Trajectory::new(Role::Main);
    actor.begin_episode();
    while !st.terminated() {
        let features = st.observation(query, cfg);
        let obs = Observation {
            features: &features,
            view: View::Solo(&st),
            vocab: &vocab,
            spec,
        };
        let (a, lp) = actor.act(&obs, rng)?;
        let action = vocab.decode(a)?;
        st = step_solo(&st, action, spec, cfg, rng)?.0;
        record_step(&mut traj, features, a, lp);
    }
    traj.output = st.output().to_vec();
    traj.terminated = true;
    Ok(Rollout {
        query_id: query.id.clone(),
        main: traj,
        subs: Vec::new(),
    })
}

/// Count of delegation actions in a main trajectory.
pub fn count_delegations(main: &Trajectory, vocab: &ActionVocab) -> usize {
    main.steps
        .iter()
        .filter(|s| matches!(vocab.decode(s.action), Ok(Action::Delegate(_))))
        .count()
}
