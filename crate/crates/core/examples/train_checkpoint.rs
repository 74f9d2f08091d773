//! Step the meta-training loop by hand, stop halfway, persist the resumable
//! state, resume it and save the selected model.
//!
//! cargo run --example train_checkpoint [out_dir]

use std::path::PathBuf;

use ttgen::harness::checkpoint::{load_trainer, save_trainer};
use ttgen::harness::{load_model, save_outcome, DeskSetup};
use ttgen::metatrain::Trainer;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("ttgen-train"));
    let setup = DeskSetup::quick();
    let config = setup.config(0);
    let sources = setup.rotated(0, &[0.0, 30.0, 60.0])?;

    let mut trainer = Trainer::new(config.clone(), &sources)?;
    trainer.run_until(config.n_iter / 2)?;
    save_trainer(&out.join("trainer"), &trainer)?;
    drop(trainer);

    let mut trainer = load_trainer(&out.join("trainer"), &sources)?;
    trainer.run_until(config.n_iter)?;
    let outcome = trainer.finish()?;
    for m in &outcome.metrics {
        println!("iter {:>4}  source ce {:.4}  target ce {:.4}  val {:?}", m.iter, m.meta_source_ce, m.meta_target_ce, m.val_acc);
    }

    save_outcome(&out.join("model"), &config, &outcome)?;
    let ckpt = load_model(&out.join("model"))?;
    assert_eq!(ckpt.model.checksum(), outcome.selected.checksum());
    println!("checkpoint {} ({} tensors)", out.join("model").display(), ckpt.manifest.tensors.len());
    Ok(())
}
