//! Leave-one-domain-out over rotated domains, written as a full report
//! (cells.jsonl, batches.jsonl, summary.csv, SVG plots).
//!
//! cargo run --example leave_one_out [out_dir]

use std::path::PathBuf;

use ttgen::harness::experiments::{eval_leave_one_out, LOO_ANGLES};
use ttgen::harness::{DeskSetup, ModelCache};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ttgen-loo"));
    let setup = DeskSetup::quick();
    let mut report = eval_leave_one_out(&setup, &LOO_ANGLES, &ModelCache::new())?;
    for s in report.summaries() {
        println!("{:?} {} = {:.3} (n={})", s.labels, s.metric, s.mean, s.n);
    }
    report.write(&out)?;
    println!("report written to {}", out.display());
    Ok(())
}
