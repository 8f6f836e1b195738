//! Main and sub-agent rewards.
//!
//! Both rewards are gated on output format: a malformed answer scores zero
//! no matter what it contains. A well-formed answer is
//! `<begin> payload <end>` with a non-empty payload of content tokens.

use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionVocab, TaskSpec};
use crate::error::{Error, Result};
use crate::trajectory::{RewardWeights, Role, Token, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_ok: bool,
    pub correct: f64,
    pub expert: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn zero() -> Self {
        RewardBreakdown {
            format_ok: false,
            correct: 0.0,
            expert: 0.0,
            total: 0.0,
        }
    }
}

pub fn validate_format(output: &[Token]) -> bool {
    match output {
        [Token::BEGIN, payload @ .., Token::END] => {
            !payload.is_empty() && payload.iter().all(|t| t.is_payload())
        }
        _ => false,
    }
}

fn payload(output: &[Token]) -> &[Token] {
    &output[1..output.len() - 1]
}

/// Exact, order-sensitive match of the payload against the ground truth.
pub fn correctness(output: &[Token], ground_truth: &[Token]) -> Result<f64> {
    if !validate_format(output) {
        return Err(Error::contract("correctness of a malformed output"));
    }
    Ok(if payload(output) == ground_truth {
        1.0
    } else {
        0.0
    })
}

pub fn main_reward(output: &[Token], ground_truth: &[Token], w: &RewardWeights) -> RewardBreakdown {
    if !validate_format(output) {
        return RewardBreakdown::zero();
    }
    let correct = if payload(output) == ground_truth {
        1.0
    } else {
        0.0
    };
    RewardBreakdown {
        format_ok: true,
        correct,
        expert: 0.0,
        total: w.alpha1 + w.alpha2 * correct,
    }
}

/// Deterministic stand-in for a judge of sub-agent execution quality:
/// half credit for using a tool, half for reporting the true fact of the
/// assigned key.
pub fn expert_score(sub: &Trajectory, spec: &TaskSpec, vocab: &ActionVocab) -> Result<f64> {
    if sub.role != Role::Sub {
        return Err(Error::contract(
            "expert score requested for a main trajectory",
        ));
    }
    let mut used_tool = false;
    for s in &sub.steps {
        if matches!(vocab.decode(s.action)?, Action::Search(_) | Action::Visit) {
            used_tool = true;
            break;
        }
    }
    let truth = sub.subtask_key.and_then(|k| spec.fact(k));
    let reported = truth.is_some_and(|t| sub.output.iter().any(|o| o.is_content() && *o == t));
    Ok(0.5 * f64::from(u8::from(used_tool)) + 0.5 * f64::from(u8::from(reported)))
}

pub fn sub_reward(
    sub_output: &[Token],
    main_correct: f64,
    expert: f64,
    w: &RewardWeights,
) -> Result<RewardBreakdown> {
    if main_correct != 0.0 && main_correct != 1.0 {
        return Err(Error::contract(format!(
            "main correctness {main_correct} is not 0 or 1"
        )));
    }
    if !(0.0..=1.0).contains(&expert) {
        return Err(Error::contract(format!(
            "expert score {expert} outside [0, 1]"
        )));
    }
    if !validate_format(sub_output) {
        return Ok(RewardBreakdown::zero());
    }
    Ok(RewardBreakdown {
        format_ok: true,
        correct: main_correct,
        expert,
        total: w.beta1 + w.beta2 * main_correct + w.beta3 * expert,
    })
}

/// Copies the trajectory's terminal reward onto every step.
pub fn broadcast(t: &Trajectory, total: f64) -> Result<Trajectory> {
    if !t.terminated {
        return Err(Error::contract("broadcast onto an unfinished trajectory"));
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("reward {total} is not finite")));
    }
    let mut out = t.clone();
    for s in &mut out.steps {
        s.reward = total;
    }
    Ok(out)
}

/// One row of the reward log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardLogRow {
    pub query_id: String,
    pub rollout: usize,
    pub role: String,
    pub index: usize,
    pub format_ok: bool,
    pub correct: f64,
    pub expert: f64,
    pub total: f64,
}

impl RewardLogRow {
    pub fn new(
        query_id: &str,
        rollout: usize,
        role: Role,
        index: usize,
        r: &RewardBreakdown,
    ) -> Self {
        RewardLogRow {
            query_id: query_id.to_string(),
            rollout,
            role: role.to_string(),
            index,
            format_ok: r.format_ok,
            correct: r.correct,
            expert: r.expert,
            total: r.total,
        }
    }
}

pub fn write_reward_log<W: std::io::Write>(out: W, rows: &[RewardLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Decode(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<reward log>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_query, AgentKind, EnvConfig};
    use crate::trajectory::{RewardWeights, Stage, Step};

    const B: Token = Token::BEGIN;
    const E: Token = Token::END;

    #[test]
    fn format_examples() {
        assert!(validate_format(&[B, Token(3), E]));
        assert!(!validate_format(&[]));
        assert!(!validate_format(&[B, E]));
        assert!(!validate_format(&[B, Token(3)]));
        assert!(!validate_format(&[B, B, Token(3), E]));
        assert!(validate_format(&[B, Token::NOT_FOUND, E]));
        assert!(!validate_format(&[B, Token(3), E, E]));
        assert!(!validate_format(&[Token(3), B, Token(3), E]));
    }

    /// Reference definition written as an explicit scan.
    fn format_by_scan(out: &[Token]) -> bool {
        if out.len() < 3 || out[0] != B || out[out.len() - 1] != E {
            return false;
        }
        let mut n = 0;
        for t in &out[1..out.len() - 1] {
            if *t == B || *t == E {
                return false;
            }
            n += 1;
        }
        n >= 1
    }

    #[test]
    fn format_decision_table_up_to_length_four() {
        let alphabet: Vec<Token> = (0..8).map(Token).collect();
        let mut seqs: Vec<Vec<Token>> = vec![vec![]];
        let mut frontier = seqs.clone();
        for _ in 0..4 {
            frontier = frontier
                .iter()
                .flat_map(|s| alphabet.iter().map(move |&t| [s.as_slice(), &[t]].concat()))
                .collect();
            seqs.extend(frontier.iter().cloned());
        }
        assert_eq!(seqs.len(), 1 + 8 + 64 + 512 + 4096);
        let mut valid = 0;
        for s in &seqs {
            assert_eq!(validate_format(s), format_by_scan(s), "{s:?}");
            valid += usize::from(validate_format(s));
        }
        // five content tokens plus not-found: 6 one-token + 36 two-token payloads
        assert_eq!(valid, 42);
    }

    #[test]
    fn correctness_is_exact_and_ordered() {
        let gt = [Token(4), Token(7)];
        assert_eq!(correctness(&[B, Token(4), Token(7), E], &gt).unwrap(), 1.0);
        assert_eq!(correctness(&[B, Token(4), Token(8), E], &gt).unwrap(), 0.0);
        assert_eq!(correctness(&[B, Token(7), Token(4), E], &gt).unwrap(), 0.0);
        assert_eq!(correctness(&[B, Token(4), E], &gt).unwrap(), 0.0);
        assert!(correctness(&[Token(4), Token(7)], &gt).is_err());
    }

    #[test]
    fn main_reward_examples() {
        let w = RewardWeights::default();
        let gt = [Token(5)];
        let r = main_reward(&[B, Token(5), E], &gt, &w);
        assert!((r.total - 1.0).abs() < 1e-15);
        let r = main_reward(&[B, Token(6), E], &gt, &w);
        assert!((r.total - 0.1).abs() < 1e-15);
        let r = main_reward(&[B, Token(5)], &gt, &w);
        assert_eq!(r.total, 0.0);
        assert!(!r.format_ok);
    }

    #[test]
    fn sub_reward_examples() {
        let w = RewardWeights::default();
        let ok = [B, Token(5), E];
        assert!((sub_reward(&ok, 1.0, 1.0, &w).unwrap().total - 1.0).abs() < 1e-15);
        assert!((sub_reward(&ok, 0.0, 1.0, &w).unwrap().total - 0.6).abs() < 1e-15);
        assert_eq!(sub_reward(&[Token(5)], 1.0, 1.0, &w).unwrap().total, 0.0);
        assert!(sub_reward(&ok, 0.5, 1.0, &w).is_err());
        assert!(sub_reward(&ok, 1.0, 1.5, &w).is_err());
    }

    #[test]
    fn sub_reward_is_monotone_in_main_correctness() {
        let w = RewardWeights::default();
        for expert in [0.0, 0.5, 1.0] {
            for out in [vec![B, Token(4), E], vec![B, E]] {
                let lo = sub_reward(&out, 0.0, expert, &w).unwrap().total;
                let hi = sub_reward(&out, 1.0, expert, &w).unwrap().total;
                assert!(lo <= hi);
                assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
            }
        }
    }

    fn sub_traj(
        vocab: &ActionVocab,
        actions: &[Action],
        output: Vec<Token>,
        key: u32,
    ) -> Trajectory {
        Trajectory {
            role: Role::Sub,
            steps: actions
                .iter()
                .map(|a| Step {
                    state: vec![1.0],
                    action: vocab.encode(*a).unwrap(),
                    behavior_logprob: -1.0,
                    reward: 0.0,
                })
                .collect(),
            output,
            terminated: true,
            subtask_key: Some(key),
        }
    }

    #[test]
    fn expert_rubric_table() {
        let cfg = EnvConfig::default();
        let vocab = ActionVocab::new(AgentKind::Sub, &cfg);
        let (_, spec) = generate_query(Stage::Stage2, 3, &cfg);
        let key = spec.hop_keys[0];
        let fact = spec.fact(key).unwrap();
        let other = Token(if fact.0 == 3 { 4 } else { 3 });
        let tool = [
            Action::Search(key as u8),
            Action::Begin,
            Action::Copy,
            Action::End,
        ];
        let no_tool = [Action::Begin, Action::Copy, Action::End];
        let cases = [
            (&tool[..], fact, 1.0),
            (&tool[..], other, 0.5),
            (&no_tool[..], fact, 0.5),
            (&no_tool[..], other, 0.0),
        ];
        for (actions, reported, expected) in cases {
            let t = sub_traj(&vocab, actions, vec![B, reported, E], key);
            assert_eq!(expert_score(&t, &spec, &vocab).unwrap(), expected);
        }
        let mut main = sub_traj(&vocab, &tool, vec![], key);
        main.role = Role::Main;
        assert!(expert_score(&main, &spec, &vocab).is_err());
    }

    #[test]
    fn broadcast_examples() {
        let cfg = EnvConfig::default();
        let vocab = ActionVocab::new(AgentKind::Sub, &cfg);
        let t = sub_traj(
            &vocab,
            &[Action::Begin, Action::Copy, Action::End],
            vec![],
            0,
        );
        let b = broadcast(&t, 0.7).unwrap();
        assert!(b.steps.iter().all(|s| s.reward == 0.7));
        assert_eq!(b.broadcast_reward(), Some(0.7));
        assert_eq!(broadcast(&b, 0.7).unwrap(), b);
        assert!(broadcast(&t, 0.0)
            .unwrap()
            .steps
            .iter()
            .all(|s| s.reward == 0.0));
        let mut open = t;
        open.terminated = false;
        assert!(broadcast(&open, 1.0).is_err());
    }

    #[test]
    fn reward_log_rows() {
        let w = RewardWeights::default();
        let r = main_reward(&[B, Token(5), E], &[Token(5)], &w);
        let mut buf = Vec::new();
        write_reward_log(&mut buf, &[RewardLogRow::new("s1-3", 2, Role::Main, 0, &r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "query_id,rollout,role,index,format_ok,correct,expert,total\ns1-3,2,main,0,true,1.0,0.0,1.0\n"
        );
    }
}
