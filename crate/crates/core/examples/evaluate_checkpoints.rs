//! Train briefly, save checkpoints, reload them and evaluate greedily.

use mgrpo::eval::{eval_corpus, evaluate, Agents};
use mgrpo::pipeline::run_curriculum;
use mgrpo::policy::SoftmaxLinearPolicy;
use mgrpo::{Mode, RunConfig, StoreBackend};

fn main() -> mgrpo::Result<()> {
    let cfg = RunConfig {
        store: StoreBackend::Reference,
        stage2_steps: 50,
        ..RunConfig::default()
    };
    let run = run_curriculum(&cfg, Mode::CoTrain, 2)?;
    let dir = std::env::temp_dir();
    let (mp, sp) = (
        dir.join("mgrpo-example-main.ckpt"),
        dir.join("mgrpo-example-sub.ckpt"),
    );
    run.main.save(&mp)?;
    run.sub
        .as_ref()
        .expect("co-training keeps a sub policy")
        .save(&sp)?;
    let (main, sub) = (
        SoftmaxLinearPolicy::load(&mp)?,
        SoftmaxLinearPolicy::load(&sp)?,
    );

    let env = cfg.env();
    let corpus = eval_corpus(&env, 11, 200);
    let trained = evaluate(
        Agents::Hierarchical {
            main: &main,
            sub: &sub,
        },
        &corpus,
        &env,
        11,
    )?;
    let oracle = evaluate(Agents::Oracle { visit: false }, &corpus, &env, 11)?;
    println!(
        "trained agents: {:.3}",
        trained.success_rate().unwrap_or(f64::NAN)
    );
    println!(
        "search-only scripted solver: {:.3}",
        oracle.success_rate().unwrap_or(f64::NAN)
    );
    for hops in 2..=env.max_hops {
        let eps: Vec<_> = trained.episodes.iter().filter(|e| e.hops == hops).collect();
        let wins = eps.iter().filter(|e| e.success).count();
        println!("  {hops} hops: {wins}/{}", eps.len());
    }
    for e in trained.episodes.iter().take(3) {
        println!(
            "  {} ({} hops): {} -> {}",
            e.query_id,
            e.hops,
            e.output,
            if e.success { "ok" } else { "wrong" }
        );
    }
    Ok(())
}
