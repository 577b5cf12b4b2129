use std::collections::HashMap;

use histoclass::par;
use histoclass::patch::{self, Augmentation, PatchRecord};

use crate::artifacts::{self, Layout};
use crate::config::Config;
use crate::error::{CliError, Result};

fn suffix(aug: &Augmentation) -> &'static str {
    match (aug.hflip, aug.vflip) {
        (true, true) => "_hv",
        (true, false) => "_h",
        (false, true) => "_v",
        (false, false) => "",
    }
}

fn patch_path(r: &PatchRecord, aug: &Augmentation) -> String {
    format!("patches/{}_{}_{}{}.png", r.slide_id, r.x, r.y, suffix(aug))
}

pub fn run(cfg: &Config) -> Result<()> {
    let slides = artifacts::discover(&cfg.data.slides, cfg.data.num_classes)?;
    let layout = Layout::new(&cfg.out);
    let dir = layout.tile_dir();
    let (size, stride) = (cfg.tile.size, cfg.tile.stride());
    let qc = cfg.qc.rule();
    if slides.is_empty() {
        log::warn!("no slides found in {}", cfg.data.slides.display());
    }

    // Pass 1: grid statistics and QC for every slide.
    let mut records = Vec::new();
    for slide in &slides {
        let img = artifacts::open_rgb(&slide.path)?;
        let mut recs = patch::tile(&img, &slide.id, slide.label, size, stride)
            .map_err(|e| CliError::Config(format!("{}: {e}", slide.path.display())))?;
        qc.apply(&mut recs);
        let accepted = recs.iter().filter(|r| r.accepted).count();
        println!("{}\taccepted {accepted}\trejected {}", slide.id, recs.len() - accepted);
        records.extend(recs);
    }

    let accepted: Vec<PatchRecord> = records.iter().filter(|r| r.accepted).cloned().collect();
    let kept = if cfg.tile.per_class > 0 && !accepted.is_empty() {
        patch::balance_downsample(&accepted, cfg.tile.per_class, cfg.seed).map_err(|e| CliError::Failed(e.to_string()))?
    } else {
        accepted
    };
    let planned = patch::oversample_with_flips(&kept, cfg.tile.target_per_class);

    let mut paths: HashMap<(String, u32, u32), String> = HashMap::new();
    for (r, aug) in planned.iter().filter(|(_, a)| a.is_identity()) {
        paths.insert((r.slide_id.clone(), r.x, r.y), patch_path(r, aug));
    }
    for r in &mut records {
        if let Some(p) = paths.get(&(r.slide_id.clone(), r.x, r.y)) {
            r.output_path = p.clone();
        }
    }
    let copies: Vec<PatchRecord> = planned
        .iter()
        .filter(|(_, a)| !a.is_identity())
        .map(|(r, a)| PatchRecord { output_path: patch_path(r, a), ..r.clone() })
        .collect();

    // Pass 2: crop, resize and write the kept patches slide by slide.
    artifacts::reset_dir(&dir)?;
    for slide in &slides {
        let jobs: Vec<&(PatchRecord, Augmentation)> = planned.iter().filter(|(r, _)| r.slide_id == slide.id).collect();
        if jobs.is_empty() {
            continue;
        }
        let img = artifacts::open_rgb(&slide.path)?;
        let written = par::map(&jobs, |(r, aug)| {
            let cropped = patch::crop(&img, r);
            let resized = patch::resize_square(&cropped, cfg.tile.patch_side).map_err(|e| CliError::Failed(e.to_string()))?;
            artifacts::save_png(&aug.apply(&resized), &dir.join(patch_path(r, aug)))
        });
        written.into_iter().collect::<Result<Vec<()>>>()?;
    }
    records.extend(copies);
    artifacts::write_manifest(&dir.join("manifest.csv"), &records)?;
    let written = records.iter().filter(|r| !r.output_path.is_empty()).count();
    log::info!("{} slides, {} tiles, {written} patches written to {}", slides.len(), records.len(), dir.display());
    Ok(())
}
