//! Entropy gradients with respect to every slot against central finite
//! differences. Glyph images have flat regions, so a step can push a whole
//! block of ReLU inputs across zero; such entries are reported, not compared.
//!
//! cargo run --example gradient_check

use ttgen::autograd::Graph;
use ttgen::backbone::{Backbone, BackboneSpec, BnMode, ParamSet, Track};
use ttgen::objectives::{layer_gradients, UnsupervisedLoss};
use ttgen::synthdata::make_rotated_domains;
use ttgen::Tensor;

const H: f64 = 1e-4;

/// Entropy at `p` and the sign of every ReLU input.
fn entropy_and_signs(model: &Backbone, x: &Tensor, p: &ParamSet) -> anyhow::Result<(f64, Vec<bool>)> {
    let mut g = Graph::new();
    let vars = model.bind_injected(&mut g, Some(p), Track::default())?;
    let xv = g.constant(x.clone());
    let t = model.trace(&mut g, xv, &vars, BnMode::Frozen);
    let l = g.entropy(t.logits);
    let signs = t.pre_relu.iter().flat_map(|v| g.value(*v).data().iter().map(|a| *a > 0.0).collect::<Vec<_>>()).collect();
    Ok((g.value(l).item(), signs))
}

fn main() -> anyhow::Result<()> {
    let mut model = Backbone::new(BackboneSpec::default(), 3)?;
    // With beta = 0, black background pixels sit exactly on the ReLU kink.
    let mut shifted = model.extract_all();
    for id in ["bn1.beta", "bn2.beta", "bn3.beta"] {
        let b = shifted.get_mut(id).expect("slot");
        *b = b.map(|v| v + 0.05);
    }
    model.set_slots(&shifted)?;

    let x = make_rotated_domains(3, &[20.0], 8, 5, 16)?.remove(0).inputs;
    let source = model.extract_all();
    let ids: Vec<String> = source.slot_ids().cloned().collect();
    let grads = layer_gradients(&model, UnsupervisedLoss::Entropy, &x, None, &ids)?;
    let (_, base) = entropy_and_signs(&model, &x, &source)?;

    for id in &ids {
        let analytic = grads.get(id).expect("requested slot");
        let (mut worst, mut skipped): (f64, usize) = (0.0, 0);
        for i in 0..analytic.numel() {
            let mut p = source.clone();
            p.get_mut(id).expect("slot").data_mut()[i] += H;
            let (up, su) = entropy_and_signs(&model, &x, &p)?;
            p.get_mut(id).expect("slot").data_mut()[i] -= 2.0 * H;
            let (down, sd) = entropy_and_signs(&model, &x, &p)?;
            if su != base || sd != base {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        println!("{id:<12} max relative error {worst:.2e} ({skipped}/{} across a kink)", analytic.numel());
    }
    Ok(())
}
