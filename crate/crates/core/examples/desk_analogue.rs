//! Base versus hybrid transfer on the synthetic stained-texture task.
//!
//! `SEED`, `BS` (batch size) and `PRE` (pretraining epochs) override the
//! defaults used by the acceptance suite.

use std::time::Instant;

use histoclass::cv::{pretrain, run_experiment, SampleSet, TrainConfig};
use histoclass::model::{build_base, build_hybrid, compact_extractor, default_head, COMPACT_HYBRID_BOUNDARY};
use histoclass::optim::ScheduleConfig;
use histoclass::stain::{normalize, MacenkoParams, ReferenceProfile};
use histoclass::{par, synth};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let start = Instant::now();
    let side = 64;
    let target = synth::stained_dataset(200, side, 7);
    let reference = ReferenceProfile::default();
    let params = MacenkoParams::default();
    let normalized = par::map(&target.images, |img| normalize(img, &reference, &params).unwrap_or_else(|_| img.clone()));
    let data = SampleSet::from_images(&normalized, target.labels.clone(), target.num_classes)?;
    let source = synth::texture_dataset(100, side, 8);
    let source = SampleSet::from_images(&source.images, source.labels, source.num_classes)?;
    println!("data ready {:.1}s", start.elapsed().as_secs_f64());

    let ex = compact_extractor(side);
    let pre_cfg = TrainConfig {
        schedule: ScheduleConfig { total_epochs: std::env::var("PRE").ok().and_then(|s| s.parse().ok()).unwrap_or(24), ..ScheduleConfig::default() },
        batch_size: 32,
        seed: 11,
        ..TrainConfig::default()
    };
    let src = build_hybrid(&ex, 0, &[source.num_classes()], source.num_classes())?;
    let pre = pretrain(&src, &source, &pre_cfg)?;
    println!("pretrain {:.1}s last {:?}", start.elapsed().as_secs_f64(), pre.logs.last());

    let seed: u64 = std::env::var("SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let batch_size = std::env::var("BS").ok().and_then(|s| s.parse().ok()).unwrap_or(32);
    let cfg = TrainConfig { seed, batch_size, ..TrainConfig::default() };
    let base = build_base(&ex, 3)?;
    let head = default_head(ex.feature_dim()?, 3)?;
    let hybrid = build_hybrid(&ex, COMPACT_HYBRID_BOUNDARY, &head, 3)?;
    for (name, spec) in [("base", base), ("hybrid", hybrid)] {
        let t = Instant::now();
        let out = run_experiment(&spec, Some(pre.model.params()), &data, &cfg)?;
        let epochs: Vec<usize> = out.folds.iter().map(|f| f.logs.len()).collect();
        println!("{name}: {} epochs {:?} in {:.1}s", out.aggregate.row("Accuracy", "").unwrap().render(), epochs, t.elapsed().as_secs_f64());
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
