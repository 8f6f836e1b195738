//! Seeded synthetic delegation environment.
//!
//! A query asks for the concatenation of `hop_count` facts. Each fact sits
//! behind a lookup key that only the sub-agent's tools can resolve. The main
//! agent delegates one lookup per hop, collects the sub-agent reports and
//! writes the answer as `<begin> fact_0 .. fact_{h-1} <end>`.
//!
//! Tools:
//! * `Search(key)` returns the fact, or with probability `noise_rate` a
//!   distractor drawn uniformly from the other content tokens.
//! * `Visit` opens the page behind the most recent search and returns that
//!   key's fact without noise; with no prior search it returns `NOT_FOUND`.
//! * `Reason` (main only) marks the observation and otherwise does nothing.

mod rollout;
mod state;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Query, Stage, Token};

pub use rollout::{
    count_delegations, run_rollout, run_solo_rollout, Actor, GreedyActor, Observation, OracleActor,
    SampleActor, ScriptedActor, View,
};
pub use state::{
    deliver_sub_result, step_main, step_solo, step_sub, MainEvent, MainState, SoloState, SubState,
};

pub type EnvRng = ChaCha8Rng;

/// Static environment dimensions, fixed for a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub vocab_size: usize,
    pub num_keys: usize,
    pub max_hops: usize,
    pub main_budget: usize,
    pub sub_budget: usize,
    pub stage2_min_hops: usize,
    pub stage2_noise: f64,
    /// Stage 1 draws its lookup key from the first `stage1_keys` keys only;
    /// the rest first show up in Stage 2.
    pub stage1_keys: usize,
    /// Adds one emit action per content token next to `Copy`. Off by
    /// default: with literal emits an untrained policy almost never
    /// produces a correct answer and Stage 1 stalls.
    pub literal_emits: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            vocab_size: 32,
            num_keys: 8,
            max_hops: 6,
            main_budget: 16,
            sub_budget: 8,
            stage2_min_hops: 2,
            stage2_noise: 0.3,
            stage1_keys: 6,
            literal_emits: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.vocab_size < Token::FIRST_CONTENT as usize + 2 {
            errs.push(format!(
                "vocab_size = {} leaves fewer than two content tokens",
                self.vocab_size
            ));
        }
        if self.max_hops == 0 {
            errs.push("max_hops must be >= 1".into());
        }
        if self.num_keys <= self.max_hops {
            errs.push(format!(
                "num_keys = {} must exceed max_hops = {} so out-of-range delegations have an unknown key",
                self.num_keys, self.max_hops
            ));
        }
        if self.stage2_min_hops < 2 || self.stage2_min_hops > self.max_hops {
            errs.push(format!(
                "stage2_min_hops = {} must lie in [2, max_hops]",
                self.stage2_min_hops
            ));
        }
        if self.stage1_keys == 0 || self.stage1_keys > self.num_keys {
            errs.push(format!(
                "stage1_keys = {} must lie in [1, num_keys = {}]",
                self.stage1_keys, self.num_keys
            ));
        }
        if !(0.0..=1.0).contains(&self.stage2_noise) {
            errs.push(format!(
                "stage2_noise = {} must lie in [0, 1]",
                self.stage2_noise
            ));
        }
        // the witness needs h delegations + begin + h tokens + end
        if self.main_budget < 2 * self.max_hops + 2 {
            errs.push(format!(
                "main_budget = {} cannot fit a {}-hop answer",
                self.main_budget, self.max_hops
            ));
        }
        // search, visit, begin, token, end
        if self.sub_budget < 5 {
            errs.push(format!("sub_budget = {} must be >= 5", self.sub_budget));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn content_tokens(&self) -> impl Iterator<Item = Token> {
        (Token::FIRST_CONTENT..self.vocab_size as u32).map(Token)
    }

    pub fn num_content(&self) -> usize {
        self.vocab_size - Token::FIRST_CONTENT as usize
    }

    /// Length of [`Query::features`].
    pub fn query_feature_dim(&self) -> usize {
        2
    }
}

/// Hidden task data behind a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub hop_count: usize,
    /// Lookup key of each hop, in answer order.
    pub hop_keys: Vec<u32>,
    pub fact_table: BTreeMap<u32, Token>,
    pub noise_rate: f64,
    /// A key absent from the fact table, handed out for delegations that
    /// point past the last hop.
    pub unknown_key: u32,
}

impl TaskSpec {
    pub fn key_for_slot(&self, slot: usize) -> u32 {
        self.hop_keys.get(slot).copied().unwrap_or(self.unknown_key)
    }

    pub fn fact(&self, key: u32) -> Option<Token> {
        self.fact_table.get(&key).copied()
    }

    pub fn ground_truth(&self) -> Vec<Token> {
        self.hop_keys.iter().map(|k| self.fact_table[k]).collect()
    }

    /// Action sequences that solve the task: the main agent's actions and,
    /// for each hop, the sub-agent actions for that delegation.
    pub fn witness(&self) -> (Vec<Action>, Vec<Vec<Action>>) {
        let mut main = vec![Action::Delegate(0); self.hop_count];
        main.push(Action::Begin);
        main.extend(std::iter::repeat(Action::Copy).take(self.hop_count));
        main.push(Action::End);
        let subs = self
            .hop_keys
            .iter()
            .map(|&k| {
                vec![
                    Action::Search(k as u8),
                    Action::Visit,
                    Action::Begin,
                    Action::Copy,
                    Action::End,
                ]
            })
            .collect();
        (main, subs)
    }
}

/// Which agent an action vocabulary belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentKind {
    Main,
    Sub,
    /// One agent holding every tool, with no delegation.
    Solo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    /// Delegates the hop this many places past the first unresolved one.
    Delegate(u8),
    Reason,
    Search(u8),
    Visit,
    Emit(Token),
    /// Emits the token the agent currently has in hand: the main agent's
    /// next resolved answer token, or the sub-agent's last tool result.
    Copy,
    Begin,
    End,
    Stop,
}

/// Bijection between an agent's actions and categorical indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionVocab {
    kind: AgentKind,
    actions: Vec<Action>,
}

impl ActionVocab {
    pub fn new(kind: AgentKind, cfg: &EnvConfig) -> Self {
        let mut actions = Vec::new();
        match kind {
            AgentKind::Main => {
                actions.extend((0..cfg.max_hops).map(|s| Action::Delegate(s as u8)));
                actions.push(Action::Reason);
            }
            AgentKind::Sub => {
                actions.extend((0..cfg.num_keys).map(|k| Action::Search(k as u8)));
                actions.push(Action::Visit);
            }
            AgentKind::Solo => {
                actions.extend((0..cfg.num_keys).map(|k| Action::Search(k as u8)));
                actions.push(Action::Visit);
                actions.push(Action::Reason);
            }
        }
        actions.push(Action::Copy);
        if cfg.literal_emits {
            actions.extend(cfg.content_tokens().map(Action::Emit));
        }
        actions.extend([Action::Begin, Action::End, Action::Stop]);
        ActionVocab { kind, actions }
    }

    pub fn kind(&self) -> AgentKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn decode(&self, index: u32) -> Result<Action> {
        self.actions.get(index as usize).copied().ok_or_else(|| {
            Error::contract(format!(
                "action index {index} outside {:?} vocabulary of {}",
                self.kind,
                self.actions.len()
            ))
        })
    }

    pub fn encode(&self, action: Action) -> Result<u32> {
        self.actions
            .iter()
            .position(|a| *a == action)
            .map(|i| i as u32)
            .ok_or_else(|| Error::contract(format!("{action:?} is not a {:?} action", self.kind)))
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }
}

/// Derives an independent generator from a base seed and a path of labels.
pub fn derive_rng(seed: u64, path: &[u64]) -> EnvRng {
    // splitmix64 over the path keeps nearby seeds uncorrelated
    let mut h = seed ^ 0x6a09_e667_f3bc_c908;
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    EnvRng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn query_id(stage: Stage, seed: u64) -> String {
    format!("s{}-{seed}", stage.number())
}

/// Inverse of [`query_id`].
pub fn parse_query_id(id: &str) -> Option<(Stage, u64)> {
    let rest = id.strip_prefix('s')?;
    let (stage, seed) = rest.split_once('-')?;
    let stage = match stage {
        "1" => Stage::Stage1,
        "2" => Stage::Stage2,
        _ => return None,
    };
    Some((stage, seed.parse().ok()?))
}

/// Builds the query for `(stage, seed)`. Identical inputs give identical
/// output.
pub fn generate_query(stage: Stage, seed: u64, cfg: &EnvConfig) -> (Query, TaskSpec) {
    let mut rng = derive_rng(seed, &[0x7175_6572_79, stage.number() as u64]);
    let (hop_count, noise_rate) = match stage {
        Stage::Stage1 => (1, 0.0),
        Stage::Stage2 => (
            rng.gen_range(cfg.stage2_min_hops..=cfg.max_hops),
            cfg.stage2_noise,
        ),
    };
    let pool = match stage {
        Stage::Stage1 => cfg.stage1_keys,
        Stage::Stage2 => cfg.num_keys,
    };
    let hop_keys: Vec<u32> = sample(&mut rng, pool, hop_count)
        .into_iter()
        .map(|k| k as u32)
        .collect();
    let n_content = cfg.num_content() as u32;
    let fact_table: BTreeMap<u32, Token> = hop_keys
        .iter()
        .map(|&k| (k, Token(Token::FIRST_CONTENT + rng.gen_range(0..n_content))))
        .collect();
    let unknown_key = (0..cfg.num_keys as u32)
        .find(|k| !fact_table.contains_key(k))
        .expect("num_keys > max_hops leaves a free key");
    let spec = TaskSpec {
        hop_count,
        hop_keys,
        fact_table,
        noise_rate,
        unknown_key,
    };
    // the hop count stays hidden: agents learn it from their own progress
    let features = vec![if stage == Stage::Stage2 { 1.0 } else { 0.0 }, noise_rate];
    let query = Query {
        id: query_id(stage, seed),
        features,
        ground_truth: spec.ground_truth(),
        stage,
    };
    (query, spec)
}

/// One line of a task corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub stage: u8,
    pub seed: u64,
    pub hop_count: usize,
    pub noise_rate: f64,
    pub fact_table: Vec<(u32, u32)>,
    pub hop_keys: Vec<u32>,
    pub ground_truth: Vec<u32>,
    pub vocab_size: usize,
}

impl CorpusRecord {
    pub fn new(query: &Query, spec: &TaskSpec, seed: u64, cfg: &EnvConfig) -> Self {
        CorpusRecord {
            id: query.id.clone(),
            stage: query.stage.number(),
            seed,
            hop_count: spec.hop_count,
            noise_rate: spec.noise_rate,
            fact_table: spec.fact_table.iter().map(|(k, t)| (*k, t.0)).collect(),
            hop_keys: spec.hop_keys.clone(),
            ground_truth: query.ground_truth.iter().map(|t| t.0).collect(),
            vocab_size: cfg.vocab_size,
        }
    }
}

/// Serializes a corpus as JSON lines, one query per line.
pub fn write_corpus(
    stage: Stage,
    seeds: impl IntoIterator<Item = u64>,
    cfg: &EnvConfig,
) -> Result<String> {
    let mut out = String::new();
    for seed in seeds {
        let (q, spec) = generate_query(stage, seed, cfg);
        let line = serde_json::to_string(&CorpusRecord::new(&q, &spec, seed, cfg))
            .map_err(|e| Error::Decode(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Parses a corpus and regenerates each query from its seed, checking that
/// the stored facts agree with the regenerated ones.
pub fn read_corpus(text: &str, cfg: &EnvConfig) -> Result<Vec<(Query, TaskSpec)>> {
    let mut out = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let rec: CorpusRecord = serde_json::from_str(line)
            .map_err(|e| Error::Decode(format!("corpus line {}: {e}", n + 1)))?;
        if rec.vocab_size != cfg.vocab_size {
            return Err(Error::contract(format!(
                "corpus line {}: vocabulary {} does not match configured {}",
                n + 1,
                rec.vocab_size,
                cfg.vocab_size
            )));
        }
        let stage = match rec.stage {
            1 => Stage::Stage1,
            2 => Stage::Stage2,
            s => return Err(Error::Decode(format!("corpus line {}: stage {s}", n + 1))),
        };
        let (q, spec) = generate_query(stage, rec.seed, cfg);
        if CorpusRecord::new(&q, &spec, rec.seed, cfg) != rec {
            return Err(Error::DataIntegrity(format!(
                "corpus line {}: record {} does not match its seed",
                n + 1,
                rec.id
            )));
        }
        out.push((q, spec));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage1_queries_are_single_hop_and_noiseless() {
        let cfg = EnvConfig::default();
        let (q, spec) = generate_query(Stage::Stage1, 7, &cfg);
        assert_eq!(spec.hop_count, 1);
        assert_eq!(spec.noise_rate, 0.0);
        assert_eq!(q.ground_truth.len(), 1);
        q.validate(cfg.query_feature_dim()).unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = EnvConfig::default();
        assert_eq!(
            generate_query(Stage::Stage2, 7, &cfg),
            generate_query(Stage::Stage2, 7, &cfg)
        );
        assert_ne!(
            generate_query(Stage::Stage2, 7, &cfg).1,
            generate_query(Stage::Stage2, 8, &cfg).1
        );
    }

    #[test]
    fn stage2_hop_counts_cover_range() {
        let cfg = EnvConfig::default();
        let mut seen = [0usize; 7];
        for seed in 0..1000 {
            let (q, spec) = generate_query(Stage::Stage2, seed, &cfg);
            assert!((2..=6).contains(&spec.hop_count));
            assert_eq!(q.ground_truth, spec.ground_truth());
            assert_eq!(spec.hop_keys.len(), spec.hop_count);
            assert!(spec.fact(spec.unknown_key).is_none());
            assert!(q.ground_truth.iter().all(|t| t.is_content()));
            seen[spec.hop_count] += 1;
        }
        assert!(seen[2..=6].iter().all(|&c| c > 100), "{seen:?}");
    }

    #[test]
    fn vocab_round_trips_and_separates_roles() {
        let cfg = EnvConfig::default();
        let main = ActionVocab::new(AgentKind::Main, &cfg);
        let sub = ActionVocab::new(AgentKind::Sub, &cfg);
        assert_eq!(main.len(), 6 + 1 + 1 + 3);
        assert_eq!(sub.len(), 8 + 1 + 1 + 3);
        let literal = EnvConfig {
            literal_emits: true,
            ..cfg.clone()
        };
        assert_eq!(
            ActionVocab::new(AgentKind::Main, &literal).len(),
            6 + 1 + 1 + 29 + 3
        );
        assert_eq!(
            ActionVocab::new(AgentKind::Solo, &literal).len(),
            8 + 1 + 1 + 1 + 29 + 3
        );
        for v in [&main, &sub, &ActionVocab::new(AgentKind::Solo, &cfg)] {
            assert!(v.actions().iter().all(|a| !matches!(a, Action::Emit(_))));
            for i in 0..v.len() as u32 {
                assert_eq!(v.encode(v.decode(i).unwrap()).unwrap(), i);
            }
            assert!(v.decode(v.len() as u32).is_err());
        }
        assert!(sub.encode(Action::Delegate(0)).is_err());
        assert!(main.encode(Action::Search(0)).is_err());
    }

    #[test]
    fn corpus_round_trip_and_tamper_detection() {
        let cfg = EnvConfig::default();
        let text = write_corpus(Stage::Stage2, 0..5, &cfg).unwrap();
        let back = read_corpus(&text, &cfg).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back[3], generate_query(Stage::Stage2, 3, &cfg));

        let tampered = text.replacen("\"noise_rate\":0.3", "\"noise_rate\":0.1", 1);
        assert!(matches!(
            read_corpus(&tampered, &cfg),
            Err(Error::DataIntegrity(_))
        ));

        let small = EnvConfig {
            vocab_size: 16,
            ..cfg
        };
        assert!(read_corpus(&text, &small).is_err());
    }

    #[test]
    fn query_ids_parse_back() {
        assert_eq!(
            parse_query_id(&query_id(Stage::Stage2, 41)),
            Some((Stage::Stage2, 41))
        );
        assert_eq!(parse_query_id("x1-3"), None);
    }

    #[test]
    fn default_config_is_valid() {
        EnvConfig::default().validate().unwrap();
        let bad = EnvConfig {
            num_keys: 6,
            main_budget: 10,
            ..Default::default()
        };
        let Err(Error::Config(errs)) = bad.validate() else {
            panic!()
        };
        assert_eq!(errs.len(), 2);
    }
}
