//! Builds both backbones, runs one forward pass and shows where the
//! classification heads attach.
//!
//! ```text
//! cargo run --release --example forward
//! ```

use segimprint::data::{base_class_names, gen_background};
use segimprint::model::{BackboneKind, ModelConfig, SegModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let image = gen_background(1, 64, 64)?;
    for kind in [BackboneKind::FcnLike, BackboneKind::UnetLike] {
        let model = SegModel::build(kind, ModelConfig::default(), base_class_names())?;
        let logits = model.forward(&image)?;
        let params: usize = model.parameters().iter().map(|t| t.len()).sum();
        println!("{:<5} {params:>7} parameters, logits {:?}", kind.name(), logits.shape());
        for spec in model.head_specs() {
            println!("      head at level {} reads {} channels", spec.level, spec.in_channels);
        }
        // Scaling every head input leaves the argmax map unchanged.
        let features = model.extract_features(&image)?;
        let scaled = model.logits_from_features(&features.scaled(5.0))?;
        let same = segimprint::numerics::argmax_channels(&scaled)? == model.predict(&image)?;
        println!("      argmax unchanged under feature scaling: {same}");
    }
    Ok(())
}
