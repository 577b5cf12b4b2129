use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use histoclass::par;
use histoclass::stain::{self, ReferenceProfile, StainMatrix};

use crate::artifacts::{self, Layout};
use crate::config::Config;
use crate::error::{CliError, IoContext, Result};

const LOG_HEADER: &str = "path,status,h_angle,e_angle,h_r,h_g,h_b,e_r,e_g,e_b";

fn angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    dot.clamp(-1.0, 1.0).acos()
}

fn reference(cfg: &Config, promote: Option<&Path>) -> Result<ReferenceProfile> {
    let params = cfg.stain.params();
    if let Some(p) = promote {
        let img = artifacts::open_rgb(p)?;
        return ReferenceProfile::from_image(&img, &params)
            .map_err(|e| CliError::Failed(format!("cannot promote {}: {e}", p.display())));
    }
    match &cfg.stain.reference {
        Some(p) => fs::read_to_string(p)
            .at(p)?
            .parse()
            .map_err(|e: stain::StainError| CliError::Decode { path: p.clone(), message: e.to_string() }),
        None => Ok(ReferenceProfile::default()),
    }
}

struct Outcome {
    line: String,
    flagged: bool,
}

/// Normalizes every written tile to the reference colors. Tiles whose stains
/// cannot be estimated are copied unchanged and flagged in the log.
pub fn run(cfg: &Config, promote: Option<&Path>) -> Result<()> {
    let layout = Layout::new(&cfg.out);
    let src_dir = layout.tile_dir();
    let records = artifacts::read_manifest(&src_dir.join("manifest.csv"))?;
    let reference = reference(cfg, promote)?;
    let params = cfg.stain.params();
    let dir = layout.normalize_dir();
    artifacts::reset_dir(&dir)?;
    artifacts::write_file(&dir.join("reference_profile.txt"), reference.to_string())?;

    let paths: Vec<&str> = records.iter().map(|r| r.output_path.as_str()).filter(|p| !p.is_empty()).collect();
    let outcomes = par::map(&paths, |rel| -> Result<Outcome> {
        let src = src_dir.join(rel);
        let dst = dir.join(rel);
        let img = artifacts::open_rgb(&src)?;
        let result = stain::estimate_stains(&img, &params)
            .and_then(|s| stain::normalize_with(&img, &s, &reference, &params).map(|out| (s, out)));
        match result {
            Ok((s, out)) => {
                artifacts::save_png(&out, &dst)?;
                Ok(Outcome { line: log_line(rel, "ok", Some((&s, &reference.stains))), flagged: false })
            }
            Err(e) => {
                log::warn!("{rel}: {e}; copied unmodified");
                if let Some(parent) = dst.parent() {
                    fs::create_dir_all(parent).at(parent)?;
                }
                fs::copy(&src, &dst).at(&dst)?;
                Ok(Outcome { line: log_line(rel, e.tag(), None), flagged: true })
            }
        }
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    for o in &outcomes {
        log.push_str(&o.line);
        log.push('\n');
    }
    artifacts::write_file(&dir.join("stain_log.csv"), log)?;
    artifacts::write_manifest(&dir.join("manifest.csv"), &records)?;
    let flagged = outcomes.iter().filter(|o| o.flagged).count();
    println!("normalized {}\tflagged {flagged}", outcomes.len() - flagged);
    Ok(())
}

fn log_line(path: &str, status: &str, stains: Option<(&StainMatrix, &StainMatrix)>) -> String {
    let mut line = format!("{path},{status}");
    match stains {
        Some((s, r)) => {
            let _ = write!(line, ",{:.6},{:.6}", angle(s.hematoxylin(), r.hematoxylin()), angle(s.eosin(), r.eosin()));
            for v in s.hematoxylin().iter().chain(s.eosin().iter()) {
                let _ = write!(line, ",{v:.6}");
            }
        }
        None => line.push_str(",,,,,,,,"),
    }
    line
}
