//! Command implementations behind the `mgrpo` binary. Each returns data or
//! writes files; argument parsing and exit codes live in the binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::{read_corpus, EnvConfig, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{eval_corpus, evaluate, Agents, EvalReport};
use crate::metrics::{ema, read_metrics, write_csv, MetricsRow, SmoothedRow};
use crate::pipeline::{run_curriculum, CurriculumResult, DirStore, Store, StoreKey};
use crate::policy::SoftmaxLinearPolicy;
use crate::trajectory::Query;

pub const METRICS_FILE: &str = "metrics.csv";
pub const OBJECTIVES_FILE: &str = "objectives.csv";
pub const STAMP_FILE: &str = "stamp.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const MAIN_CHECKPOINT: &str = "main.ckpt";
pub const SUB_CHECKPOINT: &str = "sub.ckpt";

/// What makes a run reproducible: the config hash and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub config_sha256: String,
    pub steps: u64,
    pub crate_version: String,
}

/// Applies `field=value` overrides on top of a config's TOML form, so the
/// result goes through the same parsing and validation as a file would.
pub fn apply_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table =
        toml::from_str(&cfg.to_toml()).expect("config round-trips through toml");
    let mut errs = Vec::new();
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            errs.push(format!("override {o:?} is not field=value"));
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        // bare words become strings so `mode=main-only` works unquoted
        let value = toml::from_str::<toml::Table>(&format!("x = {v}"))
            .ok()
            .and_then(|mut t| t.remove("x"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        table.insert(k.to_string(), value);
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    RunConfig::from_toml(&toml::to_string(&table).expect("table serializes"))
}

/// Runs the configured curriculum and writes metrics, objectives,
/// checkpoints, the config and a reproducibility stamp into
/// `cfg.output_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<CurriculumResult> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let result = run_curriculum(cfg, cfg.mode, cfg.seed)?;
    write_csv(&dir.join(METRICS_FILE), &result.rows)?;
    write_csv(&dir.join(OBJECTIVES_FILE), &result.objectives)?;
    result.main.save(&dir.join(MAIN_CHECKPOINT))?;
    if let Some(sub) = &result.sub {
        sub.save(&dir.join(SUB_CHECKPOINT))?;
    }
    let stamp = Stamp {
        run_id: cfg.run_id.clone(),
        mode: cfg.mode.to_string(),
        seed: cfg.seed,
        config_sha256: cfg.hash(),
        steps: cfg.total_steps(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_text(
        &dir.join(STAMP_FILE),
        &toml::to_string(&stamp).expect("stamp serializes"),
    )?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    Ok(result)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Where evaluation tasks come from.
#[derive(Debug, Clone)]
pub enum CorpusSource {
    /// A line-delimited corpus file.
    File(PathBuf),
    /// The generated Stage 2 corpus for a seed.
    Generated { seed: u64 },
}

pub fn load_corpus(
    source: &CorpusSource,
    env: &EnvConfig,
    n: usize,
) -> Result<Vec<(Query, TaskSpec)>> {
    match source {
        CorpusSource::File(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut corpus = read_corpus(&text, env)?;
            corpus.truncate(n);
            Ok(corpus)
        }
        CorpusSource::Generated { seed } => Ok(eval_corpus(env, *seed, n)),
    }
}

/// Which checkpoints answer the episodes.
#[derive(Debug, Clone)]
pub enum EvalAgents {
    Hierarchical { main: PathBuf, sub: PathBuf },
    Solo(PathBuf),
    Oracle { visit: bool },
}

/// Greedy evaluation of checkpoints on up to `n` corpus episodes.
pub fn cmd_eval(
    agents: &EvalAgents,
    source: &CorpusSource,
    env: &EnvConfig,
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    env.validate()?;
    let corpus = load_corpus(source, env, n)?;
    match agents {
        EvalAgents::Hierarchical { main, sub } => {
            let main = SoftmaxLinearPolicy::load(main)?;
            let sub = SoftmaxLinearPolicy::load(sub)?;
            evaluate(
                Agents::Hierarchical {
                    main: &main,
                    sub: &sub,
                },
                &corpus,
                env,
                seed,
            )
        }
        EvalAgents::Solo(path) => {
            let p = SoftmaxLinearPolicy::load(path)?;
            evaluate(Agents::Solo(&p), &corpus, env, seed)
        }
        EvalAgents::Oracle { visit } => {
            evaluate(Agents::Oracle { visit: *visit }, &corpus, env, seed)
        }
    }
}

/// Metric columns `smooth` can read.
pub const SMOOTH_COLUMNS: [&str; 5] = [
    "mean_main_reward",
    "mean_sub_reward",
    "eval_success",
    "grad_norm_M",
    "grad_norm_S",
];

fn column(row: &MetricsRow, name: &str) -> Result<Option<f64>> {
    Ok(match name {
        "mean_main_reward" => Some(row.mean_main_reward),
        "mean_sub_reward" => row.mean_sub_reward,
        "eval_success" => row.eval_success,
        "grad_norm_M" => Some(row.grad_norm_main),
        "grad_norm_S" => row.grad_norm_sub,
        other => {
            return Err(Error::Config(vec![format!(
                "unknown column {other:?}; expected one of {}",
                SMOOTH_COLUMNS.join(", ")
            )]))
        }
    })
}

/// EMA-smooths one column of a metrics series. Rows where the column is
/// empty are skipped.
pub fn smooth_rows(rows: &[MetricsRow], name: &str, alpha: f64) -> Result<Vec<SmoothedRow>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(vec![format!(
            "alpha = {alpha} must lie in (0, 1]"
        )]));
    }
    let mut points = Vec::new();
    for r in rows {
        if let Some(v) = column(r, name)? {
            points.push((r.step, v));
        }
    }
    let values: Vec<f64> = points.iter().map(|p| p.1).collect();
    let smoothed = ema(&values, alpha)?;
    Ok(points
        .iter()
        .zip(smoothed)
        .map(|(&(step, value), ema)| SmoothedRow { step, value, ema })
        .collect())
}

pub fn cmd_smooth(metrics: &Path, name: &str, alpha: f64, out: &Path) -> Result<Vec<SmoothedRow>> {
    let rows = read_metrics(metrics)?;
    let smoothed = smooth_rows(&rows, name, alpha)?;
    write_csv(out, &smoothed)?;
    Ok(smoothed)
}

/// Keys written for one step, with payload sizes, grouped by run.
pub struct StoreListing {
    pub completed: BTreeMap<String, Vec<u64>>,
    pub entries: Vec<(StoreKey, usize)>,
}

pub fn cmd_inspect_store(root: &Path, step: u64, run_id: Option<&str>) -> Result<StoreListing> {
    if !root.is_dir() {
        return Err(Error::Config(vec![format!(
            "{} is not a store directory",
            root.display()
        )]));
    }
    let store = DirStore::open(root)?;
    let keys = store.keys()?;
    let mut completed = BTreeMap::new();
    let mut entries = Vec::new();
    for key in keys {
        if run_id.is_some_and(|r| r != key.run_id) {
            continue;
        }
        if !completed.contains_key(&key.run_id) {
            completed.insert(key.run_id.clone(), store.completed_steps(&key.run_id)?);
        }
        if key.step == step {
            let size = store.get(&key)?.map_or(0, |b| b.len());
            entries.push((key, size));
        }
    }
    Ok(StoreListing { completed, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(xs: &[f64]) -> Vec<MetricsRow> {
        xs.iter()
            .enumerate()
            .map(|(i, &x)| MetricsRow {
                step: i as u64,
                stage: 1,
                mode: "co-train".into(),
                mean_main_reward: x,
                mean_sub_reward: None,
                eval_success: (i % 2 == 0).then_some(x),
                grad_norm_main: 0.0,
                grad_norm_sub: None,
            })
            .collect()
    }

    #[test]
    fn smoothing_hand_recurrence() {
        let s = smooth_rows(&rows(&[0.0, 1.0, 1.0]), "mean_main_reward", 0.5).unwrap();
        let ema: Vec<f64> = s.iter().map(|r| r.ema).collect();
        assert_eq!(ema, vec![0.0, 0.5, 0.75]);
    }

    #[test]
    fn smoothing_skips_empty_cells() {
        let s = smooth_rows(&rows(&[0.0, 1.0, 1.0]), "eval_success", 1.0).unwrap();
        assert_eq!(s.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn smoothing_rejects_bad_input() {
        assert!(matches!(
            smooth_rows(&rows(&[1.0]), "x", 0.5),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            smooth_rows(&rows(&[1.0]), "mean_main_reward", 0.0),
            Err(Error::Config(_))
        ));
        assert!(smooth_rows(&[], "mean_main_reward", 0.5).is_err());
        assert!(smooth_rows(&rows(&[1.0]), "mean_sub_reward", 0.5).is_err());
    }

    #[test]
    fn overrides_parse_like_the_file() {
        let cfg = apply_overrides(
            &RunConfig::default(),
            &["k=4".into(), "mode=main-only".into()],
        )
        .unwrap();
        assert_eq!(cfg.k, 4);
        assert_eq!(cfg.mode, crate::Mode::MainOnly);
        assert!(apply_overrides(&RunConfig::default(), &["k".into()]).is_err());
        assert!(apply_overrides(&RunConfig::default(), &["epsilon_main=1.5".into()]).is_err());
    }
}
