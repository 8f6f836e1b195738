//! A directory-backed run: every record is one file named by its key,
//! and a manifest lists the finished steps.

use mgrpo::pipeline::{run_decoupled, DirStore, Store, StoreKey};
use mgrpo::RunConfig;

fn main() -> mgrpo::Result<()> {
    let dir = std::env::temp_dir().join(format!("mgrpo-store-{}", std::process::id()));
    let cfg = RunConfig {
        stage1_steps: 3,
        stage2_steps: 0,
        queries_per_step: 2,
        ..RunConfig::default()
    };
    let store = DirStore::open(&dir)?;
    run_decoupled(&cfg, &store)?;

    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| mgrpo::Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    println!("{} files under {}", names.len(), dir.display());
    for name in names.iter().filter(|n| n.contains(".0000000001.")).take(6) {
        println!("  {name} -> {}", StoreKey::decode(name)?);
    }
    println!("completed steps {:?}", store.completed_steps(&cfg.run_id)?);

    // write-once: a second write to an existing key is refused
    let first = store.keys()?.remove(0);
    println!(
        "rewrite of {first}: {}",
        store.put(&first, b"x").unwrap_err()
    );
    std::fs::remove_dir_all(&dir).map_err(|e| mgrpo::Error::io(&dir, e))
}
