//! Flat run configuration, read from and printed as TOML.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::mgrpo::ClipConfig;
use crate::trajectory::RewardWeights;

/// Which agents train in Stage 2. Stage 1 is the same for every
/// multi-agent mode; the single agent runs its own Stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    CoTrain,
    MainOnly,
    SingleAgent,
    /// Sub updates skip alignment and normalize within each rollout.
    NoSync,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::CoTrain,
        Mode::MainOnly,
        Mode::SingleAgent,
        Mode::NoSync,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::CoTrain => "co-train",
            Mode::MainOnly => "main-only",
            Mode::SingleAgent => "single-agent",
            Mode::NoSync => "no-sync",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown mode {s:?}")]))
    }
}

/// Where the two workers exchange data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoreBackend {
    /// One process, no store: the reference trainer.
    Reference,
    /// Two worker threads sharing an in-memory store.
    Memory,
    /// Two workers sharing a directory under `output_dir`.
    Dir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub mode: Mode,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub queries_per_step: usize,
    /// Rollouts per query.
    pub k: usize,
    /// Aligned sub-trajectories per rollout.
    pub d: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub epsilon_main: f64,
    pub epsilon_sub: f64,
    pub lr_main: f64,
    pub lr_sub: f64,
    /// Evaluate after every `eval_every` steps of each stage.
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub store: StoreBackend,
    pub store_timeout_secs: u64,
    pub output_dir: PathBuf,
    pub vocab_size: usize,
    pub num_keys: usize,
    pub max_hops: usize,
    pub main_budget: usize,
    pub sub_budget: usize,
    pub stage2_min_hops: usize,
    pub stage2_noise: f64,
    pub stage1_keys: usize,
    pub literal_emits: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = RewardWeights::default();
        let env = EnvConfig::default();
        RunConfig {
            run_id: "run".into(),
            seed: 1,
            mode: Mode::CoTrain,
            stage1_steps: 300,
            stage2_steps: 200,
            queries_per_step: 16,
            k: 8,
            d: 8,
            alpha1: w.alpha1,
            alpha2: w.alpha2,
            beta1: w.beta1,
            beta2: w.beta2,
            beta3: w.beta3,
            epsilon_main: 0.2,
            epsilon_sub: 0.2,
            lr_main: 0.2,
            lr_sub: 3.0,
            eval_every: 25,
            eval_episodes: 64,
            store: StoreBackend::Memory,
            store_timeout_secs: 120,
            output_dir: PathBuf::from("runs/default"),
            vocab_size: env.vocab_size,
            num_keys: env.num_keys,
            max_hops: env.max_hops,
            main_budget: env.main_budget,
            sub_budget: env.sub_budget,
            stage2_min_hops: env.stage2_min_hops,
            stage2_noise: env.stage2_noise,
            stage1_keys: env.stage1_keys,
            literal_emits: env.literal_emits,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The annotated default configuration printed by the CLI.
    pub fn default_toml() -> String {
        format!(
            "# mgrpo run configuration; every field is optional and defaults to the value shown.\n\
             # mode: co-train | main-only | single-agent | no-sync\n\
             # store: reference | memory | dir\n\n{}",
            RunConfig::default().to_toml()
        )
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            vocab_size: self.vocab_size,
            num_keys: self.num_keys,
            max_hops: self.max_hops,
            main_budget: self.main_budget,
            sub_budget: self.sub_budget,
            stage2_min_hops: self.stage2_min_hops,
            stage2_noise: self.stage2_noise,
            stage1_keys: self.stage1_keys,
            literal_emits: self.literal_emits,
        }
    }

    pub fn weights(&self) -> RewardWeights {
        RewardWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            beta1: self.beta1,
            beta2: self.beta2,
            beta3: self.beta3,
        }
    }

    pub fn clip_main(&self) -> ClipConfig {
        ClipConfig {
            epsilon: self.epsilon_main,
        }
    }

    pub fn clip_sub(&self) -> ClipConfig {
        ClipConfig {
            epsilon: self.epsilon_sub,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.stage2_steps
    }

    /// Collects every field-level problem rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.k < 2 {
            errs.push(format!("k = {}: group statistics need k >= 2", self.k));
        }
        if self.d < 1 {
            errs.push(format!("d = {}: alignment target must be >= 1", self.d));
        }
        if self.queries_per_step < 1 {
            errs.push("queries_per_step must be >= 1".into());
        }
        if self.eval_every < 1 {
            errs.push(format!(
                "eval_every = {}: cadence must be >= 1",
                self.eval_every
            ));
        }
        if self.run_id.is_empty() {
            errs.push("run_id must not be empty".into());
        }
        for (name, eps) in [
            ("epsilon_main", self.epsilon_main),
            ("epsilon_sub", self.epsilon_sub),
        ] {
            if ClipConfig::new(eps).is_err() {
                errs.push(format!(
                    "{name} = {eps}: ClipConfig.epsilon must lie in (0, 1)"
                ));
            }
        }
        for (name, lr) in [("lr_main", self.lr_main), ("lr_sub", self.lr_sub)] {
            if !(lr > 0.0 && lr.is_finite()) {
                errs.push(format!("{name} = {lr}: learning rate must be positive"));
            }
        }
        if let Err(Error::Invalid(e)) = self.weights().validate() {
            errs.extend(e);
        }
        if let Err(Error::Config(e)) = self.env().validate() {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
