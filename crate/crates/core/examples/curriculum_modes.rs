//! The two-stage curriculum under each training mode. Pass a seed as the
//! first argument; expect a few seconds per mode.

use mgrpo::metrics::ema;
use mgrpo::pipeline::run_curriculum;
use mgrpo::{Mode, RunConfig, StoreBackend};

fn main() -> mgrpo::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    let cfg = RunConfig {
        store: StoreBackend::Reference,
        ..RunConfig::default()
    };
    println!(
        "{:>13} {:>10} {:>10} {:>10} {:>10}",
        "mode", "stage1", "eval mean", "eval last", "ema"
    );
    for mode in Mode::ALL {
        let r = run_curriculum(&cfg, mode, seed)?;
        let stage1: Vec<f64> = r
            .rows
            .iter()
            .filter(|x| x.stage == 1)
            .map(|x| x.mean_main_reward)
            .collect();
        let stage2: Vec<f64> = r
            .rows
            .iter()
            .filter(|x| x.stage == 2)
            .map(|x| x.mean_main_reward)
            .collect();
        let evals = r.stage2_evals();
        println!(
            "{:>13} {:>10.3} {:>10.3} {:>10.3} {:>10.3}",
            mode.name(),
            stage1[stage1.len() - 10..].iter().sum::<f64>() / 10.0,
            evals.iter().sum::<f64>() / evals.len() as f64,
            evals.last().copied().unwrap_or(f64::NAN),
            ema(&stage2, 0.1)?.last().copied().unwrap_or(f64::NAN),
        );
    }
    Ok(())
}
