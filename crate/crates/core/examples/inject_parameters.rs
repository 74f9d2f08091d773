//! The backbone as a pure function of externally supplied slot values:
//! re-injecting the extracted parameters is the identity, and an injected
//! change never touches the stored model.
//!
//! cargo run --example inject_parameters

use ttgen::backbone::{gamma_slot, Backbone, BackboneSpec};
use ttgen::synthdata::make_rotated_domains;

fn main() -> anyhow::Result<()> {
    let model = Backbone::new(BackboneSpec::default(), 0)?;
    for slot in model.list_slots() {
        println!("{:<12} {:?} {:?}", slot.slot_id, slot.kind, slot.shape);
    }
    let x = make_rotated_domains(0, &[45.0], 10, 5, 16)?.remove(0).inputs;

    let plain = model.forward(&x, None)?;
    let mut params = model.extract_all();
    assert!(model.forward(&x, Some(&params))?.bits_eq(&plain));

    let g = params.get_mut(&gamma_slot(2)).expect("slot exists");
    *g = g.map(|v| 2.0 * v);
    let scaled = model.forward(&x, Some(&params))?;
    println!("doubling bn2.gamma moves logits by {:.4}", scaled.max_abs_diff(&plain));
    assert!(model.forward(&x, None)?.bits_eq(&plain));
    Ok(())
}
