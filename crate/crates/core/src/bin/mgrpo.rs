use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mgrpo::cli::{
    apply_overrides, cmd_eval, cmd_inspect_store, cmd_smooth, cmd_train, CorpusSource, EvalAgents,
    METRICS_FILE,
};
use mgrpo::{Error, Mode, RunConfig, StoreBackend};

/// Hierarchical group-relative policy optimization on a synthetic
/// delegation task.
#[derive(Parser)]
#[command(name = "mgrpo", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the two-stage curriculum and write metrics, checkpoints and a stamp.
    Train(TrainArgs),
    /// Greedy evaluation of checkpoints on a task corpus.
    Eval(EvalArgs),
    /// EMA-smooth one column of a metrics file.
    Smooth(SmoothArgs),
    /// Print the default configuration as TOML.
    PrintDefaultConfig,
    /// List the store keys written for one step.
    InspectStore(InspectArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; omitted fields take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set lr_main=0.1`. Repeatable.
    #[arg(long = "set", value_name = "FIELD=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<String>) -> mgrpo::Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| match e {
                Error::Io { path, source } => {
                    Error::Config(vec![format!("cannot read {}: {source}", path.display())])
                }
                e => e,
            })?,
            None => RunConfig::default(),
        };
        let mut all = self.overrides.clone();
        all.extend(extra);
        apply_overrides(&base, &all)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_store)]
    store: Option<StoreBackend>,
    /// Print one line per step as well as writing the metrics file.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Main-agent checkpoint, or the single agent's checkpoint when `--sub` is absent.
    #[arg(long, required_unless_present = "oracle")]
    main: Option<PathBuf>,
    #[arg(long, requires = "main")]
    sub: Option<PathBuf>,
    /// Use the scripted solver instead of checkpoints.
    #[arg(long, conflicts_with_all = ["main", "sub"])]
    oracle: bool,
    /// Let the scripted solver confirm each search with a visit.
    #[arg(long, requires = "oracle")]
    visit: bool,
    /// Corpus file; defaults to the generated Stage 2 corpus for the seed.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, short = 'n', default_value_t = 64)]
    episodes: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-episode log (CSV); stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SmoothArgs {
    metrics: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value = "mean_main_reward")]
    column: String,
    /// Output CSV; defaults to `<metrics>.ema.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// Store directory (`<output_dir>/store` for dir-backed runs).
    store: PathBuf,
    #[arg(long)]
    step: u64,
    #[arg(long)]
    run_id: Option<String>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_store(s: &str) -> Result<StoreBackend, String> {
    match s {
        "reference" => Ok(StoreBackend::Reference),
        "memory" => Ok(StoreBackend::Memory),
        "dir" => Ok(StoreBackend::Dir),
        _ => Err(format!(
            "unknown store {s:?}; expected reference, memory or dir"
        )),
    }
}

fn train(a: TrainArgs) -> mgrpo::Result<()> {
    let mut extra = Vec::new();
    if let Some(s) = a.seed {
        extra.push(format!("seed={s}"));
    }
    if let Some(m) = a.mode {
        extra.push(format!("mode=\"{m}\""));
    }
    if let Some(d) = &a.output_dir {
        extra.push(format!(
            "output_dir={}",
            toml::Value::String(d.display().to_string())
        ));
    }
    if let Some(s) = a.store {
        let name = match s {
            StoreBackend::Reference => "reference",
            StoreBackend::Memory => "memory",
            StoreBackend::Dir => "dir",
        };
        extra.push(format!("store=\"{name}\""));
    }
    let cfg = a.config.load(extra)?;
    let result = cmd_train(&cfg)?;
    if a.verbose {
        for r in &result.rows {
            println!(
                "step {:4} stage {} main {:.3} sub {} eval {}",
                r.step,
                r.stage,
                r.mean_main_reward,
                r.mean_sub_reward.map_or("-".into(), |v| format!("{v:.3}")),
                r.eval_success.map_or("-".into(), |v| format!("{v:.3}")),
            );
        }
    }
    let last_eval = result.rows.iter().rev().find_map(|r| r.eval_success);
    println!(
        "{} steps, mode {}, seed {}; final eval success {}; wrote {}",
        result.rows.len(),
        cfg.mode,
        cfg.seed,
        last_eval.map_or("n/a".into(), |v| format!("{v:.3}")),
        cfg.output_dir.join(METRICS_FILE).display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> mgrpo::Result<()> {
    let cfg = a.config.load(Vec::new())?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let agents = match (a.oracle, a.main, a.sub) {
        (true, _, _) => EvalAgents::Oracle { visit: a.visit },
        (false, Some(main), Some(sub)) => EvalAgents::Hierarchical { main, sub },
        (false, Some(main), None) => EvalAgents::Solo(main),
        (false, None, _) => unreachable!("clap requires --main without --oracle"),
    };
    let source = match a.corpus {
        Some(p) => CorpusSource::File(p),
        None => CorpusSource::Generated { seed },
    };
    let report = cmd_eval(&agents, &source, &cfg.env(), a.episodes, seed)?;
    match &a.log {
        Some(p) => {
            let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            report.write_log(std::io::BufWriter::new(f))?;
        }
        None => report.write_log(std::io::stdout().lock())?,
    }
    match report.success_rate() {
        Some(r) => println!(
            "success rate {r:.4} over {} episodes",
            report.episodes.len()
        ),
        None => println!("success rate undefined: 0 episodes"),
    }
    Ok(())
}

fn smooth(a: SmoothArgs) -> mgrpo::Result<()> {
    let out = a.out.unwrap_or_else(|| a.metrics.with_extension("ema.csv"));
    let rows = cmd_smooth(&a.metrics, &a.column, a.alpha, &out)?;
    println!(
        "smoothed {} points of {} into {}",
        rows.len(),
        a.column,
        out.display()
    );
    Ok(())
}

fn inspect(a: InspectArgs) -> mgrpo::Result<()> {
    let listing = cmd_inspect_store(&a.store, a.step, a.run_id.as_deref())?;
    for (run, steps) in &listing.completed {
        println!("run {run}: {} completed steps", steps.len());
    }
    for (key, size) in &listing.entries {
        println!("{key}\t{size} bytes");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Smooth(a) => smooth(a),
        Cmd::PrintDefaultConfig => {
            print!("{}", RunConfig::default_toml());
            Ok(())
        }
        Cmd::InspectStore(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::Invalid(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
