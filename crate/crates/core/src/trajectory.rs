//! Domain types shared across the crate: queries, steps, trajectories and
//! rollouts, plus the policy parameter vector and reward weights.
//!
//! Everything here is plain data. Values are validated on construction (or
//! through the explicit `validate` helpers) and are not mutated afterwards,
//! except for the reward broadcast which produces a new trajectory.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A token of the fixed output vocabulary.
///
/// Ids `0..3` are reserved markers; everything from [`Token::FIRST_CONTENT`]
/// upward is an ordinary payload token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(pub u32);

impl Token {
    pub const BEGIN: Token = Token(0);
    pub const END: Token = Token(1);
    /// Returned by tools for unknown keys. It may appear in an answer
    /// payload but never matches a fact.
    pub const NOT_FOUND: Token = Token(2);
    pub const FIRST_CONTENT: u32 = 3;

    pub fn is_content(self) -> bool {
        self.0 >= Self::FIRST_CONTENT
    }

    /// Allowed between the answer markers.
    pub fn is_payload(self) -> bool {
        self.is_content() || self == Self::NOT_FOUND
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Token::BEGIN => write!(f, "<begin>"),
            Token::END => write!(f, "<end>"),
            Token::NOT_FOUND => write!(f, "<not-found>"),
            Token(id) => write!(f, "t{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Main,
    Sub,
}

impl Role {
    pub fn as_byte(self) -> u8 {
        match self {
            Role::Main => 0,
            Role::Sub => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Role> {
        match b {
            0 => Some(Role::Main),
            1 => Some(Role::Sub),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Main => "main",
            Role::Sub => "sub",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub features: Vec<f64>,
    pub ground_truth: Vec<Token>,
    pub stage: Stage,
}

impl Query {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.features.len() != feature_dim {
            errs.push(format!(
                "query {}: features length {} != {}",
                self.id,
                self.features.len(),
                feature_dim
            ));
        }
        if self.ground_truth.is_empty() {
            errs.push(format!("query {}: empty ground truth", self.id));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: Vec<f64>,
    pub action: u32,
    /// Log-probability of `action` under the policy that sampled it.
    pub behavior_logprob: f64,
    /// Filled by reward broadcast; zero until then.
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub role: Role,
    pub steps: Vec<Step>,
    pub output: Vec<Token>,
    pub terminated: bool,
    /// Lookup key a sub-agent invocation was asked to resolve.
    pub subtask_key: Option<u32>,
}

impl Trajectory {
    pub fn new(role: Role) -> Self {
        Trajectory {
            role,
            steps: Vec::new(),
            output: Vec::new(),
            terminated: false,
            subtask_key: None,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Sum of recorded behavior log-probabilities.
    pub fn behavior_logprob(&self) -> f64 {
        self.steps.iter().map(|s| s.behavior_logprob).sum()
    }

    /// The single terminal reward, if every step carries the same value.
    pub fn broadcast_reward(&self) -> Option<f64> {
        let first = self.steps.first()?.reward;
        self.steps
            .iter()
            .all(|s| s.reward.to_bits() == first.to_bits())
            .then_some(first)
    }

    pub fn violations(&self, at: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.terminated && self.steps.is_empty() {
            out.push(Violation::new(at, "terminated trajectory has no steps"));
        }
        if self.role == Role::Main && self.subtask_key.is_some() {
            out.push(Violation::new(at, "main trajectory carries a subtask key"));
        }
        let dim = self.steps.first().map(|s| s.state.len());
        for (t, step) in self.steps.iter().enumerate() {
            let here = format!("{at}.steps[{t}]");
            if Some(step.state.len()) != dim {
                out.push(Violation::new(
                    &here,
                    "state dimension differs within trajectory",
                ));
            }
            if step.state.iter().any(|x| !x.is_finite()) {
                out.push(Violation::new(&here, "non-finite state feature"));
            }
            if !step.behavior_logprob.is_finite() || step.behavior_logprob > 0.0 {
                out.push(Violation::new(
                    &here,
                    "behavior logprob must be finite and <= 0",
                ));
            }
            if !step.reward.is_finite() {
                out.push(Violation::new(&here, "non-finite reward"));
            }
        }
        out
    }

    /// Checks every invariant that does not depend on a vocabulary.
    pub fn validate(&self) -> Result<()> {
        let v = self.violations("trajectory");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(v.iter().map(ToString::to_string).collect()))
        }
    }

    pub fn check_actions(&self, vocab_size: usize, at: &str) -> Vec<Violation> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| s.action as usize >= vocab_size)
            .map(|(t, s)| {
                Violation::new(
                    &format!("{at}.steps[{t}]"),
                    &format!("action {} outside vocabulary of {vocab_size}", s.action),
                )
            })
            .collect()
    }
}

/// One broken invariant, located by a dotted path into the value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl Violation {
    pub fn new(location: &str, message: &str) -> Self {
        Violation {
            location: location.to_string(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

/// One answering attempt: the main trajectory and the sub-trajectories it
/// spawned, in invocation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub query_id: String,
    pub main: Trajectory,
    pub subs: Vec<Trajectory>,
}

impl Rollout {
    /// Number of sub-agent invocations.
    pub fn invocations(&self) -> usize {
        self.subs.len()
    }
}

/// Every violated invariant of a rollout; empty iff the rollout is valid.
pub fn validate_rollout(r: &Rollout) -> Vec<Violation> {
    let mut out = Vec::new();
    if r.main.role != Role::Main {
        out.push(Violation::new("main", "role mismatch: expected main"));
    }
    out.extend(r.main.violations("main"));
    for (i, sub) in r.subs.iter().enumerate() {
        let at = format!("subs[{i}]");
        if sub.role != Role::Sub {
            out.push(Violation::new(&at, "role mismatch: expected sub"));
        }
        out.extend(sub.violations(&at));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query: Query,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn new(query: Query, rollouts: Vec<Rollout>) -> Result<Self> {
        if rollouts.len() < 2 {
            return Err(Error::contract(format!(
                "a rollout group needs at least 2 rollouts, got {}",
                rollouts.len()
            )));
        }
        if let Some(r) = rollouts.iter().find(|r| r.query_id != query.id) {
            return Err(Error::contract(format!(
                "rollout for query {} placed in group for {}",
                r.query_id, query.id
            )));
        }
        Ok(RolloutGroup { query, rollouts })
    }

    pub fn k(&self) -> usize {
        self.rollouts.len()
    }

    pub fn invocation_counts(&self) -> Vec<usize> {
        self.rollouts.iter().map(Rollout::invocations).collect()
    }
}

/// Weights of the main (`alpha*`) and sub (`beta*`) reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            alpha1: 0.1,
            alpha2: 0.9,
            beta1: 0.1,
            beta2: 0.4,
            beta3: 0.5,
        }
    }
}

impl RewardWeights {
    /// Weights must be finite and non-negative; they need not sum to one.
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
        ];
        let errs: Vec<String> = named
            .iter()
            .filter(|(_, w)| !w.is_finite() || *w < 0.0)
            .map(|(n, w)| format!("{n} = {w} must be a finite value >= 0"))
            .collect();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(errs))
        }
    }
}

/// A role's flat parameter vector with a monotone version counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub role: Role,
    pub theta: Vec<f64>,
    pub version: u64,
}

impl PolicyParams {
    pub fn zeros(role: Role, len: usize) -> Self {
        PolicyParams {
            role,
            theta: vec![0.0; len],
            version: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.theta.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(Error::Numeric(format!(
                "{} params: theta[{i}] is not finite",
                self.role
            ))),
            None => Ok(()),
        }
    }
}
