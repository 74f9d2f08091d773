//! Every adaptation strategy on the same target stream: accuracy, mean
//! prediction entropy and per-batch adapt time.
//!
//! cargo run --example compare_strategies

use ttgen::harness::DeskSetup;
use ttgen::metatrain::train;
use ttgen::synthdata::{stream, OrderPolicy};
use ttgen::ttg::{make_strategy, run_stream, StrategyKind, StrategyOptions};

fn main() -> anyhow::Result<()> {
    let setup = DeskSetup::quick();
    let mut domains = setup.rotated(1, &[0.0, 30.0, 60.0, 90.0])?;
    let target = domains.remove(0);
    let model = train(&setup.config(1), &domains)?.selected;
    let s = stream(std::slice::from_ref(&target), 20, OrderPolicy::SingleDomain, 1)?;

    println!("{:<18} {:>8} {:>9} {:>10}", "strategy", "acc", "entropy", "median ms");
    for kind in StrategyKind::ALL {
        let mut strategy = make_strategy(kind, &model, StrategyOptions::default())?;
        let m = run_stream(&s, strategy.as_mut())?;
        let entropy = m.batches.iter().map(|b| b.mean_entropy).sum::<f64>() / m.batches.len() as f64;
        println!("{:<18} {:>8.3} {:>9.4} {:>10.3}", kind.name(), m.accuracy(), entropy, m.adapt_ms_quantiles().0);
    }
    Ok(())
}
