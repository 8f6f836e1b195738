//! Group-relative advantages for the main agent and the pooled, aligned
//! sub-agent batch.

use mgrpo::mgrpo::{align_indices, main_advantages, sub_advantages_masked, SubSource};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mgrpo::Result<()> {
    let (stats, adv) = main_advantages(&[1.0, 0.1, 0.1, 0.0])?;
    println!(
        "main: mean {:.3} std {:.3} advantages {adv:.3?}",
        stats.mean, stats.std
    );
    let (_, flat) = main_advantages(&[0.1; 4])?;
    println!("identical rewards give {flat:?}");

    // rollouts that invoked 3 and 8 sub-agents, aligned to d = 8 each
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rows = Vec::new();
    for (k, d_k) in [3usize, 8].into_iter().enumerate() {
        let idx = align_indices(d_k, d, &mut rng)?;
        println!("rollout {k}: {d_k} subs -> {idx:?}");
        rows.push(
            idx.iter()
                .map(|s| match s {
                    SubSource::Placeholder => None,
                    s => Some(0.2 + 0.1 * s.origin().unwrap() as f64 + k as f64 * 0.3),
                })
                .collect::<Vec<_>>(),
        );
    }
    let (stats, adv) = sub_advantages_masked(&rows)?;
    println!(
        "sub pool of {} entries: mean {:.3} std {:.3}",
        rows.len() * d,
        stats.mean,
        stats.std
    );
    for (k, a) in adv.iter().enumerate() {
        println!("  rollout {k}: {a:.2?}");
    }

    // rollouts with more than d subs keep a random d of them
    println!("12 subs, d = 8 -> {:?}", align_indices(12, d, &mut rng)?);
    Ok(())
}
