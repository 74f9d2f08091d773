//! Meta-train on three rotated domains, then generate a model per batch of
//! an unseen rotation and compare against the plain source model.
//!
//! cargo run --example quickstart

use ttgen::harness::DeskSetup;
use ttgen::metatrain::train;
use ttgen::synthdata::{stream, OrderPolicy};
use ttgen::ttg::{run_stream, Erm, GeneralizeFormer};

fn main() -> anyhow::Result<()> {
    let setup = DeskSetup::quick();
    let mut domains = setup.rotated(0, &[0.0, 30.0, 60.0, 90.0])?;
    let target = domains.pop().expect("four domains");

    let config = setup.config(0);
    let out = train(&config, &domains)?;
    println!("trained {} iterations, selected iteration {:?}", config.n_iter, out.best_iter);

    let s = stream(std::slice::from_ref(&target), 20, OrderPolicy::SingleDomain, 0)?;
    let erm = run_stream(&s, &mut Erm::new(&out.selected.backbone))?;
    let gf = run_stream(&s, &mut GeneralizeFormer::new(&out.selected))?;
    println!("target 90 deg: erm {:.3}  generalizeformer {:.3}", erm.accuracy(), gf.accuracy());
    Ok(())
}
