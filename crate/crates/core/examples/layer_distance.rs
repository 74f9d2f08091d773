//! How far generated parameters move from the source ones, per slot, on an
//! input-level shift (rotation) and an output-level one (disjoint label sets).
//!
//! cargo run --example layer_distance

use ttgen::harness::experiments::{eval_distance, LOO_ANGLES};
use ttgen::harness::{DeskSetup, ModelCache};

fn main() -> anyhow::Result<()> {
    let setup = DeskSetup::quick();
    let r = eval_distance(&setup, &LOO_ANGLES, &ModelCache::new())?;
    let slots: std::collections::BTreeSet<&String> = r.cells.iter().filter_map(|c| c.labels.get("slot")).collect();
    println!("{:<16} {:>10} {:>10}", "slot", "input", "output");
    for slot in slots {
        let d = |b| r.mean(&[("benchmark", b), ("slot", slot)], "relative_l2").unwrap_or(f64::NAN);
        println!("{slot:<16} {:>10.5} {:>10.5}", d("input"), d("output"));
    }
    Ok(())
}
