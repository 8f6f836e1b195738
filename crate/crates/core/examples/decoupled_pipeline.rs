//! Two workers that share only a write-once store reproduce the
//! single-process reference trainer exactly.

use mgrpo::pipeline::{run_decoupled, run_reference, MemoryStore, RecordKind, Store};
use mgrpo::RunConfig;

fn main() -> mgrpo::Result<()> {
    let cfg = RunConfig {
        stage1_steps: 8,
        stage2_steps: 4,
        queries_per_step: 4,
        ..RunConfig::default()
    };
    let store = MemoryStore::new();
    let split = run_decoupled(&cfg, &store)?;
    let single = run_reference(&cfg)?;
    println!(
        "main parameters identical: {}",
        split.main.params == single.main.params
    );
    println!("sub parameters identical:  {}", split.sub == single.sub);

    let keys = store.keys()?;
    for kind in RecordKind::ALL {
        println!(
            "{:>16}: {} records",
            kind.name(),
            keys.iter().filter(|k| k.kind == kind).count()
        );
    }
    println!("completed steps {:?}", store.completed_steps(&cfg.run_id)?);
    Ok(())
}
