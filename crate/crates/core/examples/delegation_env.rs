//! Generate a multi-hop query, inspect its facts and replay the solver.

use mgrpo::env::{derive_rng, generate_query, run_rollout, EnvConfig, OracleActor, ScriptedActor};
use mgrpo::rewards::main_reward;
use mgrpo::trajectory::{RewardWeights, Stage};

fn main() -> mgrpo::Result<()> {
    let cfg = EnvConfig::default();
    let (query, spec) = generate_query(Stage::Stage2, 7, &cfg);
    println!(
        "query {} needs {} hops, noise {}",
        query.id, spec.hop_count, spec.noise_rate
    );
    for (hop, key) in spec.hop_keys.iter().enumerate() {
        println!("  hop {hop}: key {key} -> {:?}", spec.fact(*key));
    }

    // the generator's own witness replays to the ground truth on a noiseless copy
    let mut quiet = spec.clone();
    quiet.noise_rate = 0.0;
    let (main_script, sub_scripts) = quiet.witness();
    let mut main = ScriptedActor::repeating(main_script);
    let mut subs = ScriptedActor::new(sub_scripts);
    let r = run_rollout(
        &query,
        &quiet,
        &cfg,
        &mut main,
        &mut subs,
        &mut derive_rng(0, &[]),
    )?;
    let w = RewardWeights::default();
    println!(
        "witness: {} delegations, reward {}",
        r.invocations(),
        main_reward(&r.main.output, &query.ground_truth, &w).total
    );

    // with noise, searching alone is a gamble; confirming with a visit is not
    for visit in [false, true] {
        let (mut wins, n) = (0, 200);
        for i in 0..n {
            let (q, s) = generate_query(Stage::Stage2, 1000 + i, &cfg);
            let mut rng = derive_rng(1, &[i]);
            let r = run_rollout(
                &q,
                &s,
                &cfg,
                &mut OracleActor { visit },
                &mut OracleActor { visit },
                &mut rng,
            )?;
            wins += (main_reward(&r.main.output, &q.ground_truth, &w).correct == 1.0) as u32;
        }
        println!("scripted solver, visit={visit}: {wins}/{n} correct");
    }
    Ok(())
}
