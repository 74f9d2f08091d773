//! Source accuracy before and after each strategy adapts over a target
//! stream. Generalizeformer never mutates stored weights, so its delta is 0.
//!
//! cargo run --example forgetting

use ttgen::harness::experiments::forgetting;
use ttgen::harness::DeskSetup;
use ttgen::metatrain::train;
use ttgen::synthdata::{stream, OrderPolicy};
use ttgen::ttg::{StrategyKind, StrategyOptions};

fn main() -> anyhow::Result<()> {
    let setup = DeskSetup::quick();
    let mut domains = setup.rotated(0, &[0.0, 30.0, 60.0, 90.0])?;
    let target = domains.pop().expect("four domains");
    let model = train(&setup.config(0), &domains)?.selected;
    let batches = stream(std::slice::from_ref(&target), 20, OrderPolicy::SingleDomain, 0)?.batches;

    for kind in StrategyKind::ALL {
        for row in forgetting(&model, kind, StrategyOptions::default(), &batches, &domains, 20)? {
            println!(
                "{:<18} source {:>3}: {:.3} -> {:.3} ({:+.3})",
                kind.name(),
                row.domain,
                row.before,
                row.after,
                row.after - row.before
            );
        }
    }
    Ok(())
}
