//! EMA smoothing of a reward series, as used for reporting curves.

use mgrpo::metrics::ema;

fn main() -> mgrpo::Result<()> {
    let xs = [0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
    for alpha in [1.0, 0.5, 0.1] {
        let ys = ema(&xs, alpha)?;
        println!("alpha {alpha:<3}: {:.3?}", ys);
    }
    println!("empty series: {}", ema(&[], 0.5).unwrap_err());
    Ok(())
}
