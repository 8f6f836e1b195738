//! Per-agent environment state, transitions and observation features.

use rand::Rng;

use super::{Action, EnvConfig, EnvRng, TaskSpec};
use crate::error::{Error, Result};
use crate::rewards::validate_format;
use crate::trajectory::{Query, Token};

/// Raised by the main agent's transition when it delegates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MainEvent {
    SubInvocation { slot: usize, key: u32 },
}

struct Features(Vec<f64>);

impl Features {
    fn with_capacity(n: usize) -> Self {
        Features(Vec::with_capacity(n))
    }

    fn flag(&mut self, on: bool) {
        self.0.push(if on { 1.0 } else { 0.0 });
    }

    fn one_hot(&mut self, n: usize, at: Option<usize>) {
        let base = self.0.len();
        self.0.resize(base + n, 0.0);
        if let Some(i) = at.filter(|&i| i < n) {
            self.0[base + i] = 1.0;
        }
    }
}

fn check_can_act(terminated: bool, budget: usize) -> Result<()> {
    if terminated {
        return Err(Error::contract("acting after termination"));
    }
    if budget == 0 {
        return Err(Error::contract("acting with no budget remaining"));
    }
    Ok(())
}

/// Output-writing actions shared by all agents.
#[derive(Debug, Clone, PartialEq)]
struct AnswerBuf {
    output: Vec<Token>,
    begun: bool,
    payload_len: usize,
}

impl AnswerBuf {
    fn new() -> Self {
        AnswerBuf {
            output: Vec::new(),
            begun: false,
            payload_len: 0,
        }
    }

    /// Returns true when the action terminates the trajectory.
    fn apply(&mut self, action: Action) -> bool {
        match action {
            Action::Emit(tok) => {
                self.output.push(tok);
                if self.begun {
                    self.payload_len += 1;
                }
                false
            }
            Action::Begin => {
                self.output.push(Token::BEGIN);
                self.begun = true;
                false
            }
            Action::End => {
                self.output.push(Token::END);
                true
            }
            Action::Stop => true,
            _ => unreachable!("not an answer action"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MainState {
    pub hop_count: usize,
    /// Token reported for each hop by a well-formed sub-agent answer.
    pub resolved: Vec<Option<Token>>,
    /// Most recent sub-agent report; `NOT_FOUND` for a malformed answer.
    pub last_report: Option<Token>,
    pub reasoned: bool,
    pub budget_remaining: usize,
    pub terminated: bool,
    answer: AnswerBuf,
}

impl MainState {
    pub fn new(spec: &TaskSpec, cfg: &EnvConfig) -> Self {
        MainState {
            hop_count: spec.hop_count,
            resolved: vec![None; spec.hop_count],
            last_report: None,
            reasoned: false,
            budget_remaining: cfg.main_budget,
            terminated: false,
            answer: AnswerBuf::new(),
        }
    }

    pub fn output(&self) -> &[Token] {
        &self.answer.output
    }

    pub fn begun(&self) -> bool {
        self.answer.begun
    }

    pub fn payload_len(&self) -> usize {
        self.answer.payload_len
    }

    pub fn next_unresolved(&self) -> Option<usize> {
        self.resolved.iter().position(Option::is_none)
    }

    /// The resolved token for the next answer position, once answering.
    pub fn pending_token(&self) -> Option<Token> {
        if !self.answer.begun {
            return None;
        }
        self.resolved
            .get(self.answer.payload_len)
            .copied()
            .flatten()
    }

    fn common_dim(cfg: &EnvConfig) -> usize {
        cfg.max_hops + 6
    }

    pub fn feature_dim(cfg: &EnvConfig) -> usize {
        Self::common_dim(cfg) + cfg.vocab_size + 1 + cfg.query_feature_dim()
    }

    pub fn observation(&self, query: &Query, cfg: &EnvConfig) -> Vec<f64> {
        let mut f = Features::with_capacity(Self::feature_dim(cfg));
        self.write_common(&mut f, cfg);
        f.one_hot(cfg.vocab_size, self.last_report.map(Token::index));
        f.flag(self.reasoned);
        f.0.extend_from_slice(&query.features);
        f.0
    }

    fn write_common(&self, f: &mut Features, cfg: &EnvConfig) {
        f.flag(true);
        f.one_hot(cfg.max_hops, self.next_unresolved());
        f.flag(self.next_unresolved().is_none());
        f.flag(self.answer.begun);
        f.flag(self.answer.payload_len > 0);
        f.flag(self.answer.begun && self.answer.payload_len >= self.hop_count);
        f.flag(self.pending_token().is_some());
    }
}

/// Applies one main-agent action. Every action spends one unit of budget;
/// running out of budget terminates the trajectory.
pub fn step_main(
    state: &MainState,
    action: Action,
    spec: &TaskSpec,
) -> Result<(MainState, Option<MainEvent>)> {
    check_can_act(state.terminated, state.budget_remaining)?;
    let mut next = state.clone();
    let mut event = None;
    match action {
        Action::Delegate(offset) => {
            let base = next.next_unresolved().unwrap_or(next.hop_count);
            let slot = base + offset as usize;
            event = Some(MainEvent::SubInvocation {
                slot,
                key: spec.key_for_slot(slot),
            });
        }
        Action::Reason => next.reasoned = true,
        Action::Copy => {
            if let Some(tok) = next.pending_token() {
                next.terminated = next.answer.apply(Action::Emit(tok));
            }
        }
        Action::Emit(_) | Action::Begin | Action::End | Action::Stop => {
            next.terminated = next.answer.apply(action);
        }
        Action::Search(_) | Action::Visit => {
            return Err(Error::contract(format!(
                "{action:?} is not a main-agent action"
            )))
        }
    }
    next.budget_remaining -= 1;
    if next.budget_remaining == 0 {
        next.terminated = true;
    }
    Ok((next, event))
}

/// Hands a finished sub-agent answer back to the main agent. A well-formed
/// answer whose first payload token is a content token resolves `slot`.
pub fn deliver_sub_result(state: &MainState, slot: usize, sub_output: &[Token]) -> MainState {
    let mut next = state.clone();
    let report = if validate_format(sub_output) {
        let tok = sub_output[1];
        if let Some(r @ None) = next.resolved.get_mut(slot) {
            if tok.is_content() {
                *r = Some(tok);
            }
        }
        tok
    } else {
        Token::NOT_FOUND
    };
    next.last_report = Some(report);
    next
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubState {
    pub key: u32,
    searched: u64,
    last_searched: Option<u32>,
    pub visited: bool,
    pub last_result: Option<Token>,
    pub last_from_visit: bool,
    pub used_tool: bool,
    pub budget_remaining: usize,
    pub terminated: bool,
    answer: AnswerBuf,
}

impl SubState {
    pub fn new(key: u32, cfg: &EnvConfig) -> Self {
        SubState {
            key,
            searched: 0,
            last_searched: None,
            visited: false,
            last_result: None,
            last_from_visit: false,
            used_tool: false,
            budget_remaining: cfg.sub_budget,
            terminated: false,
            answer: AnswerBuf::new(),
        }
    }

    pub fn output(&self) -> &[Token] {
        &self.answer.output
    }

    pub fn begun(&self) -> bool {
        self.answer.begun
    }

    pub fn payload_len(&self) -> usize {
        self.answer.payload_len
    }

    pub fn has_searched(&self, key: u32) -> bool {
        key < 64 && self.searched & (1 << key) != 0
    }

    pub fn feature_dim(cfg: &EnvConfig) -> usize {
        1 + cfg.num_keys + 6 + cfg.vocab_size + cfg.query_feature_dim()
    }

    pub fn observation(&self, query: &Query, cfg: &EnvConfig) -> Vec<f64> {
        let mut f = Features::with_capacity(Self::feature_dim(cfg));
        f.flag(true);
        f.one_hot(cfg.num_keys, Some(self.key as usize));
        f.flag(self.has_searched(self.key));
        f.flag(self.visited);
        f.flag(self.answer.begun);
        f.flag(self.answer.payload_len > 0);
        f.flag(self.last_from_visit);
        f.flag(self.last_result.is_some_and(|t| t != Token::NOT_FOUND));
        f.one_hot(cfg.vocab_size, self.last_result.map(Token::index));
        f.0.extend_from_slice(&query.features);
        f.0
    }
}

/// Executes a search or visit against the fact table. A visit opens the page
/// behind the most recent search.
fn run_tool(
    action: Action,
    searched: &mut u64,
    last_searched: &mut Option<u32>,
    spec: &TaskSpec,
    cfg: &EnvConfig,
    rng: &mut EnvRng,
) -> Token {
    match action {
        Action::Search(k) => {
            let key = u32::from(k);
            if key < 64 {
                *searched |= 1 << key;
            }
            *last_searched = Some(key);
            match spec.fact(key) {
                None => Token::NOT_FOUND,
                Some(fact) => {
                    if spec.noise_rate > 0.0 && rng.gen::<f64>() < spec.noise_rate {
                        // uniform over the other content tokens
                        let n = cfg.num_content() as u32 - 1;
                        let mut d = Token::FIRST_CONTENT + rng.gen_range(0..n);
                        if d >= fact.0 {
                            d += 1;
                        }
                        Token(d)
                    } else {
                        fact
                    }
                }
            }
        }
        Action::Visit => last_searched
            .and_then(|k| spec.fact(k))
            .unwrap_or(Token::NOT_FOUND),
        _ => unreachable!("not a tool action"),
    }
}

/// Applies one sub-agent action; tool actions return the tool's answer.
pub fn step_sub(
    state: &SubState,
    action: Action,
    spec: &TaskSpec,
    cfg: &EnvConfig,
    rng: &mut EnvRng,
) -> Result<(SubState, Option<Token>)> {
    check_can_act(state.terminated, state.budget_remaining)?;
    let mut next = state.clone();
    let mut result = None;
    match action {
        Action::Search(_) | Action::Visit => {
            let tok = run_tool(
                action,
                &mut next.searched,
                &mut next.last_searched,
                spec,
                cfg,
                rng,
            );
            next.used_tool = true;
            next.last_result = Some(tok);
            next.last_from_visit = action == Action::Visit;
            if next.last_from_visit && tok != Token::NOT_FOUND {
                next.visited = true;
            }
            result = Some(tok);
        }
        Action::Copy => {
            if let Some(tok) = next.last_result {
                next.terminated = next.answer.apply(Action::Emit(tok));
            }
        }
        Action::Emit(_) | Action::Begin | Action::End | Action::Stop => {
            next.terminated = next.answer.apply(action);
        }
        Action::Delegate(_) | Action::Reason => {
            return Err(Error::contract(format!(
                "{action:?} is not a sub-agent action"
            )))
        }
    }
    next.budget_remaining -= 1;
    if next.budget_remaining == 0 {
        next.terminated = true;
    }
    Ok((next, result))
}

/// State of the single agent that holds every tool itself.
#[derive(Debug, Clone, PartialEq)]
pub struct SoloState {
    inner: MainState,
    hop_keys: Vec<u32>,
    searched: u64,
    pub last_key: Option<u32>,
    pub last_result: Option<Token>,
    pub last_from_visit: bool,
}

impl SoloState {
    pub fn new(spec: &TaskSpec, cfg: &EnvConfig) -> Self {
        SoloState {
            inner: MainState::new(spec, cfg),
            hop_keys: spec.hop_keys.clone(),
            searched: 0,
            last_key: None,
            last_result: None,
            last_from_visit: false,
        }
    }

    pub fn terminated(&self) -> bool {
        self.inner.terminated
    }

    pub fn output(&self) -> &[Token] {
        self.inner.output()
    }

    pub fn begun(&self) -> bool {
        self.inner.begun()
    }

    pub fn payload_len(&self) -> usize {
        self.inner.payload_len()
    }

    /// Key of the first hop that has no note yet.
    pub fn hop_keys(&self) -> &[u32] {
        &self.hop_keys
    }

    pub fn has_searched(&self, key: u32) -> bool {
        key < 64 && self.searched & (1 << key) != 0
    }

    pub fn current_key(&self) -> Option<u32> {
        self.inner.next_unresolved().map(|i| self.hop_keys[i])
    }

    pub fn pending_token(&self) -> Option<Token> {
        self.inner.pending_token()
    }

    pub fn feature_dim(cfg: &EnvConfig) -> usize {
        MainState::common_dim(cfg)
            + 2 * cfg.num_keys
            + cfg.vocab_size
            + 2
            + 1
            + cfg.query_feature_dim()
    }

    pub fn observation(&self, query: &Query, cfg: &EnvConfig) -> Vec<f64> {
        let mut f = Features::with_capacity(Self::feature_dim(cfg));
        self.inner.write_common(&mut f, cfg);
        f.one_hot(cfg.num_keys, self.current_key().map(|k| k as usize));
        f.one_hot(cfg.num_keys, self.last_key.map(|k| k as usize));
        f.one_hot(cfg.vocab_size, self.last_result.map(Token::index));
        f.flag(self.last_result.is_some() && !self.last_from_visit);
        f.flag(self.last_from_visit);
        f.flag(self.inner.reasoned);
        f.0.extend_from_slice(&query.features);
        f.0
    }
}

/// Applies one single-agent action. A tool answer for a hop's key is noted
/// against that hop; a visit overwrites an earlier search note.
pub fn step_solo(
    state: &SoloState,
    action: Action,
    spec: &TaskSpec,
    cfg: &EnvConfig,
    rng: &mut EnvRng,
) -> Result<(SoloState, Option<Token>)> {
    check_can_act(state.inner.terminated, state.inner.budget_remaining)?;
    let mut next = state.clone();
    let mut result = None;
    match action {
        Action::Search(_) | Action::Visit => {
            let tok = run_tool(
                action,
                &mut next.searched,
                &mut next.last_key,
                spec,
                cfg,
                rng,
            );
            next.last_result = Some(tok);
            next.last_from_visit = action == Action::Visit;
            if let (Some(key), true) = (next.last_key, tok != Token::NOT_FOUND) {
                if let Some(hop) = next.hop_keys.iter().position(|&h| h == key) {
                    next.inner.resolved[hop] = Some(tok);
                }
            }
            result = Some(tok);
        }
        Action::Reason => next.inner.reasoned = true,
        Action::Copy => {
            if let Some(tok) = next.inner.pending_token() {
                next.inner.terminated = next.inner.answer.apply(Action::Emit(tok));
            }
        }
        Action::Emit(_) | Action::Begin | Action::End | Action::Stop => {
            next.inner.terminated = next.inner.answer.apply(action);
        }
        Action::Delegate(_) => {
            return Err(Error::contract("the single agent cannot delegate"));
        }
    }
    next.inner.budget_remaining -= 1;
    if next.inner.budget_remaining == 0 {
        next.inner.terminated = true;
    }
    Ok((next, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{derive_rng, generate_query};
    use crate::trajectory::Stage;

    fn setup(stage: Stage) -> (Query, TaskSpec, EnvConfig) {
        let cfg = EnvConfig::default();
        let (q, s) = generate_query(stage, 11, &cfg);
        (q, s, cfg)
    }

    #[test]
    fn delegation_counts_from_first_unresolved_hop() {
        let (_, spec, cfg) = setup(Stage::Stage2);
        let st = MainState::new(&spec, &cfg);
        let fact = spec.fact(spec.hop_keys[0]).unwrap();
        let st = deliver_sub_result(&st, 0, &[Token::BEGIN, fact, Token::END]);
        let (_, ev) = step_main(&st, Action::Delegate(0), &spec).unwrap();
        assert_eq!(
            ev,
            Some(MainEvent::SubInvocation {
                slot: 1,
                key: spec.hop_keys[1]
            })
        );
    }

    #[test]
    fn delegate_slot_zero_invokes_hop_zero() {
        let (_, spec, cfg) = setup(Stage::Stage2);
        let st = MainState::new(&spec, &cfg);
        let (next, ev) = step_main(&st, Action::Delegate(0), &spec).unwrap();
        assert_eq!(
            ev,
            Some(MainEvent::SubInvocation {
                slot: 0,
                key: spec.hop_keys[0]
            })
        );
        assert_eq!(next.budget_remaining, cfg.main_budget - 1);
        assert!(!next.terminated);
        let (_, ev) = step_main(&st, Action::Delegate(5), &spec).unwrap();
        let Some(MainEvent::SubInvocation { key, .. }) = ev else {
            panic!()
        };
        if spec.hop_count <= 5 {
            assert_eq!(key, spec.unknown_key);
        }
    }

    #[test]
    fn stop_and_end_terminate() {
        let (_, spec, cfg) = setup(Stage::Stage1);
        let st = MainState::new(&spec, &cfg);
        let (stopped, ev) = step_main(&st, Action::Stop, &spec).unwrap();
        assert!(stopped.terminated && ev.is_none() && stopped.output().is_empty());
        let (ended, _) = step_main(&st, Action::End, &spec).unwrap();
        assert!(ended.terminated);
        assert!(step_main(&stopped, Action::Begin, &spec).is_err());
    }

    #[test]
    fn exhausted_budget_rejects_actions() {
        let (_, spec, cfg) = setup(Stage::Stage1);
        let mut st = MainState::new(&spec, &cfg);
        for _ in 0..cfg.main_budget {
            st = step_main(&st, Action::Reason, &spec).unwrap().0;
        }
        assert_eq!(st.budget_remaining, 0);
        assert!(st.terminated);
        let err = step_main(&st, Action::Stop, &spec).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        let mut st = st.clone();
        st.terminated = false;
        assert!(step_main(&st, Action::Stop, &spec).is_err());
    }

    #[test]
    fn tools_are_rejected_for_main() {
        let (_, spec, cfg) = setup(Stage::Stage1);
        let st = MainState::new(&spec, &cfg);
        assert!(step_main(&st, Action::Search(0), &spec).is_err());
        let sub = SubState::new(0, &cfg);
        let mut rng = derive_rng(0, &[]);
        assert!(step_sub(&sub, Action::Delegate(0), &spec, &cfg, &mut rng).is_err());
    }

    #[test]
    fn noiseless_search_returns_fact_and_unknown_key_not_found() {
        let (_, spec, cfg) = setup(Stage::Stage1);
        let key = spec.hop_keys[0];
        let st = SubState::new(key, &cfg);
        let mut rng = derive_rng(1, &[]);
        let (_, tok) = step_sub(&st, Action::Search(key as u8), &spec, &cfg, &mut rng).unwrap();
        assert_eq!(tok, spec.fact(key));
        let (_, tok) = step_sub(
            &st,
            Action::Search(spec.unknown_key as u8),
            &spec,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert_eq!(tok, Some(Token::NOT_FOUND));
    }

    #[test]
    fn visit_requires_prior_search() {
        let (_, mut spec, cfg) = setup(Stage::Stage2);
        spec.noise_rate = 1.0;
        let key = spec.hop_keys[0];
        let mut rng = derive_rng(2, &[]);
        let st = SubState::new(key, &cfg);
        let (_, early) = step_sub(&st, Action::Visit, &spec, &cfg, &mut rng).unwrap();
        assert_eq!(early, Some(Token::NOT_FOUND));
        let (st, searched) =
            step_sub(&st, Action::Search(key as u8), &spec, &cfg, &mut rng).unwrap();
        assert_ne!(
            searched,
            spec.fact(key),
            "noise 1 always returns a distractor"
        );
        assert!(searched.unwrap().is_content());
        let (st, visited) = step_sub(&st, Action::Visit, &spec, &cfg, &mut rng).unwrap();
        assert_eq!(visited, spec.fact(key));
        assert!(st.visited && st.used_tool);
    }

    #[test]
    fn distractor_frequency_matches_noise_rate() {
        let (_, mut spec, cfg) = setup(Stage::Stage2);
        spec.noise_rate = 0.2;
        let key = spec.hop_keys[0];
        let fact = spec.fact(key).unwrap();
        let st = SubState::new(key, &cfg);
        let mut rng = derive_rng(3, &[]);
        let n = 10_000;
        let mut wrong = 0;
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..n {
            let (_, tok) = step_sub(&st, Action::Search(key as u8), &spec, &cfg, &mut rng).unwrap();
            let tok = tok.unwrap();
            if tok != fact {
                wrong += 1;
                seen.insert(tok);
                assert!(tok.is_content());
            }
        }
        let freq = wrong as f64 / n as f64;
        assert!((freq - 0.2).abs() < 0.02, "distractor frequency {freq}");
        assert_eq!(seen.len(), cfg.num_content() - 1);
    }

    #[test]
    fn sub_report_resolves_slot() {
        let (_, spec, cfg) = setup(Stage::Stage2);
        let st = MainState::new(&spec, &cfg);
        let report = [Token::BEGIN, Token(9), Token::END];
        let st = deliver_sub_result(&st, 1, &report);
        assert_eq!(st.resolved[1], Some(Token(9)));
        assert_eq!(st.next_unresolved(), Some(0));
        let st = deliver_sub_result(&st, 0, &[Token(4)]);
        assert_eq!(st.resolved[0], None);
        assert_eq!(st.last_report, Some(Token::NOT_FOUND));
        let st = deliver_sub_result(&st, 1, &[Token::BEGIN, Token(5), Token::END]);
        assert_eq!(st.resolved[1], Some(Token(9)), "first report wins");
    }

    #[test]
    fn observations_have_declared_dimensions() {
        let (q, spec, cfg) = setup(Stage::Stage2);
        let main = MainState::new(&spec, &cfg);
        assert_eq!(
            main.observation(&q, &cfg).len(),
            MainState::feature_dim(&cfg)
        );
        let sub = SubState::new(3, &cfg);
        assert_eq!(sub.observation(&q, &cfg).len(), SubState::feature_dim(&cfg));
        let solo = SoloState::new(&spec, &cfg);
        assert_eq!(
            solo.observation(&q, &cfg).len(),
            SoloState::feature_dim(&cfg)
        );
    }

    #[test]
    fn pending_token_tracks_answer_position() {
        let (_, spec, cfg) = setup(Stage::Stage2);
        let mut st = MainState::new(&spec, &cfg);
        for slot in 0..spec.hop_count {
            st = deliver_sub_result(
                &st,
                slot,
                &[Token::BEGIN, Token(10 + slot as u32), Token::END],
            );
        }
        assert_eq!(st.pending_token(), None);
        st = step_main(&st, Action::Begin, &spec).unwrap().0;
        assert_eq!(st.pending_token(), Some(Token(10)));
        st = step_main(&st, Action::Copy, &spec).unwrap().0;
        assert_eq!(st.output(), &[Token::BEGIN, Token(10)]);
        assert_eq!(st.pending_token(), Some(Token(11)));
    }

    #[test]
    fn copy_needs_something_in_hand() {
        let (_, spec, cfg) = setup(Stage::Stage1);
        let st = step_main(&MainState::new(&spec, &cfg), Action::Begin, &spec)
            .unwrap()
            .0;
        let st = step_main(&st, Action::Copy, &spec).unwrap().0;
        assert_eq!(st.output(), &[Token::BEGIN]);
        assert_eq!(st.budget_remaining, cfg.main_budget - 2);

        // a not-found report leaves the hop open
        let st = deliver_sub_result(&st, 0, &[Token::BEGIN, Token::NOT_FOUND, Token::END]);
        assert_eq!(st.last_report, Some(Token::NOT_FOUND));
        assert_eq!(st.pending_token(), None);

        let mut rng = derive_rng(2, &[]);
        let sub = SubState::new(spec.hop_keys[0], &cfg);
        let (sub, _) = step_sub(&sub, Action::Begin, &spec, &cfg, &mut rng).unwrap();
        let (sub, _) = step_sub(&sub, Action::Copy, &spec, &cfg, &mut rng).unwrap();
        assert_eq!(sub.output(), &[Token::BEGIN]);
        let (sub, _) = step_sub(
            &sub,
            Action::Search(spec.unknown_key as u8),
            &spec,
            &cfg,
            &mut rng,
        )
        .unwrap();
        let (sub, _) = step_sub(&sub, Action::Copy, &spec, &cfg, &mut rng).unwrap();
        assert_eq!(sub.output(), &[Token::BEGIN, Token::NOT_FOUND]);
    }

    #[test]
    fn solo_notes_follow_tool_results() {
        let (_, spec, cfg) = setup(Stage::Stage2);
        let mut rng = derive_rng(4, &[]);
        let st = SoloState::new(&spec, &cfg);
        assert_eq!(st.current_key(), Some(spec.hop_keys[0]));
        let k0 = spec.hop_keys[0] as u8;
        let (st, _) = step_solo(&st, Action::Search(k0), &spec, &cfg, &mut rng).unwrap();
        assert_eq!(st.current_key(), Some(spec.hop_keys[1]));
        let (st, tok) = step_solo(&st, Action::Visit, &spec, &cfg, &mut rng).unwrap();
        assert_eq!(tok, spec.fact(spec.hop_keys[0]));
        assert!(step_solo(&st, Action::Delegate(0), &spec, &cfg, &mut rng).is_err());
    }
}
