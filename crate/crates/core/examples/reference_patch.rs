//! Regenerates the bundled reference patch and its profile.

use histoclass::stain::{MacenkoParams, ReferenceProfile};
use histoclass::synth;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let patch = synth::stained_patch(1, 224, 2024);
    patch.save(dir.join("reference_patch.png"))?;
    let profile = ReferenceProfile::from_image(&patch, &MacenkoParams::default())?;
    std::fs::write(dir.join("reference_profile.txt"), profile.to_string())?;
    print!("{profile}");
    Ok(())
}
