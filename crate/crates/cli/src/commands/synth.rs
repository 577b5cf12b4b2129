use std::path::Path;

use clap::ValueEnum;
use histoclass::{par, seed, synth};

use crate::artifacts;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    /// Three-class slides with tissue on a white background.
    Slides,
    /// Three-class stained patches.
    Patches,
    /// Four-class texture patches for pretraining.
    Textures,
}

/// Writes a synthetic dataset as `out/type<k>/*.png`.
pub fn run(kind: Kind, out: &Path, per_class: usize, size: u32, seed: u64) -> Result<()> {
    if per_class == 0 || size == 0 {
        return Err(CliError::Config("--per-class and --size must be positive".into()));
    }
    artifacts::reset_dir(out)?;
    let written = match kind {
        Kind::Slides => {
            let classes = synth::TARGET_CLASSES.len();
            let jobs: Vec<(usize, usize)> = (0..per_class).flat_map(|i| (0..classes).map(move |c| (c, i))).collect();
            let results = par::map(&jobs, |&(class, i)| {
                let img = synth::slide(size, size, class, seed::derive(seed, &[i as u64]));
                artifacts::save_png(&img, &out.join(synth::class_dir(class)).join(format!("slide_{i:03}.png")))
            });
            results.into_iter().collect::<Result<Vec<()>>>()?.len()
        }
        Kind::Patches | Kind::Textures => {
            let (data, prefix) = match kind {
                Kind::Patches => (synth::stained_dataset(per_class, size as usize, seed), "patch"),
                _ => (synth::texture_dataset(per_class, size as usize, seed), "texture"),
            };
            let results = par::map_range(data.len(), |i| {
                let dir = out.join(synth::class_dir(data.labels[i]));
                artifacts::save_png(&data.images[i], &dir.join(format!("{prefix}_{i:05}.png")))
            });
            results.into_iter().collect::<Result<Vec<()>>>()?.len()
        }
    };
    println!("wrote {written} images to {}", out.display());
    Ok(())
}
