//! Single-target mode (one stream per domain, fresh strategy each) against
//! multiple-target mode (one stream with domains mixed inside batches).
//!
//! cargo run --example multi_target

use ttgen::harness::experiments::{eval_multi_target, MULTI_SOURCE_ANGLES, MULTI_TARGET_ANGLES};
use ttgen::harness::{DeskSetup, ModelCache};

fn main() -> anyhow::Result<()> {
    let setup = DeskSetup::quick();
    let r = eval_multi_target(&setup, &MULTI_SOURCE_ANGLES, &MULTI_TARGET_ANGLES, &ModelCache::new())?;
    for kind in &setup.strategies {
        let get = |mode| r.mean(&[("strategy", kind.name()), ("mode", mode)], "accuracy").unwrap_or(f64::NAN);
        println!("{:<18} single {:.3}  multi {:.3}", kind.name(), get("single"), get("multi"));
    }
    Ok(())
}
