//! One group-relative update of the main agent: sample K rollouts, score
//! them, form advantages and take a clipped-surrogate ascent step.

use mgrpo::mgrpo::{
    main_advantages, surrogate_grad, surrogate_main, update, ClipConfig, RoleBatch,
};
use mgrpo::pipeline::{generate_groups, run_curriculum, step_queries, StepPlan};
use mgrpo::rewards::main_reward;
use mgrpo::trajectory::Role;
use mgrpo::{Mode, RunConfig, StoreBackend};

fn main() -> mgrpo::Result<()> {
    let clip = ClipConfig::default();
    for (ratio, adv) in [(1.5, 1.0), (0.5, 1.0), (1.5, -1.0), (0.5, -1.0)] {
        println!(
            "ratio {ratio} advantage {adv:+}: term {:+.2}",
            clip.term(ratio, adv)
        );
    }

    // a uniform policy almost never answers, so start from a partly trained pair
    let cfg = RunConfig {
        stage1_steps: 140,
        stage2_steps: 0,
        store: StoreBackend::Reference,
        ..RunConfig::default()
    };
    let warm = run_curriculum(&cfg, Mode::CoTrain, 1)?;
    let (main, sub) = (warm.main, warm.sub.expect("co-training keeps a sub policy"));
    let plan = StepPlan::new(&cfg, 139);
    let queries = step_queries(
        &RunConfig {
            queries_per_step: 1,
            ..cfg.clone()
        },
        &plan,
    );
    let groups = generate_groups(&cfg, &plan, &queries, &main, Some(&sub))?;
    let g = &groups[0];
    let rewards: Vec<f64> = g
        .rollouts
        .iter()
        .map(|r| main_reward(&r.main.output, &g.query.ground_truth, &cfg.weights()).total)
        .collect();
    let (stats, adv) = main_advantages(&rewards)?;
    println!(
        "rewards {rewards:?} -> mean {:.3} std {:.3}",
        stats.mean, stats.std
    );

    let mains: Vec<_> = g.rollouts.iter().map(|r| r.main.clone()).collect();
    // at the behavior policy the surrogate is the mean advantage
    println!(
        "surrogate at pi_old: {:.3e}",
        surrogate_main(&mains, &main, &main, &adv, &clip)?
    );
    let grad = surrogate_grad(
        Role::Main,
        RoleBatch::Main {
            mains: &mains,
            adv: &adv,
        },
        &main,
        &main,
        &clip,
    )?;
    let next = main.with_params(update(&main.params, &grad, cfg.lr_main)?)?;
    println!(
        "after one step: surrogate {:.4}, version {}",
        surrogate_main(&mains, &next, &main, &adv, &clip)?,
        next.params.version
    );
    Ok(())
}
