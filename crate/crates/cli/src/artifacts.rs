//! Output layout and the file-level plumbing shared by the commands.

use std::fs;
use std::path::{Path, PathBuf};

use histoclass::cv::checkpoint::{self, CheckpointEntry, CheckpointError};
use histoclass::cv::{ExperimentSplit, SampleSet};
use histoclass::par;
use histoclass::patch::{self, PatchRecord};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{CliError, IoContext, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "tif", "tiff"];

/// Where every command reads and writes under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn tile_dir(&self) -> PathBuf {
        self.root.join("tile")
    }

    pub fn normalize_dir(&self) -> PathBuf {
        self.root.join("normalize")
    }

    pub fn split_file(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.pretrain_dir().join("extractor.ckpt")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn fold_checkpoint(&self, fold: usize) -> PathBuf {
        self.train_dir().join(format!("fold{fold}.ckpt"))
    }

    pub fn epoch_log(&self) -> PathBuf {
        self.train_dir().join("epochs.csv")
    }

    pub fn evaluate_dir(&self) -> PathBuf {
        self.root.join("evaluate")
    }

    pub fn scores(&self, fold: usize) -> PathBuf {
        self.evaluate_dir().join(format!("scores_fold{fold}.csv"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    /// Directory holding the manifest the model stages train on: normalized
    /// patches when stain normalization is enabled, raw tiles otherwise.
    pub fn dataset_dir(&self, cfg: &Config) -> PathBuf {
        if cfg.stain.enabled {
            self.normalize_dir()
        } else {
            self.tile_dir()
        }
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, contents).at(path)
}

/// Removes a directory left by an earlier run so stale files cannot survive.
pub fn reset_dir(dir: &Path) -> Result<()> {
    match fs::remove_dir_all(dir) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
        Err(e) => return Err(e).at(dir),
    }
    fs::create_dir_all(dir).at(dir)
}

/// Fails with the artifact-mismatch code when an upstream artifact is absent.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path))
    }
}

pub fn open_rgb(path: &Path) -> Result<RgbImage> {
    match image::open(path) {
        Ok(img) => Ok(img.into_rgb8()),
        Err(image::ImageError::IoError(source)) => Err(CliError::Io { path: path.to_path_buf(), source }),
        Err(e) => Err(CliError::Decode { path: path.to_path_buf(), message: e.to_string() }),
    }
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(source) => CliError::Io { path: path.to_path_buf(), source },
        other => CliError::Decode { path: path.to_path_buf(), message: other.to_string() },
    })
}

/// Class index of a `type<k>` directory name, case-insensitive.
pub fn class_of_dir(name: &str) -> Option<usize> {
    let lower = name.to_ascii_lowercase();
    lower.strip_prefix("type")?.parse().ok()
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        entries.push(entry.at(dir)?.path());
    }
    entries.sort();
    Ok(entries)
}

/// A labelled image found under a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelledImage {
    pub path: PathBuf,
    /// Path relative to the scanned directory, without extension, `/`-separated.
    pub id: String,
    pub label: usize,
}

/// Images in `dir`: those in `type<k>` subdirectories get label `k`, loose
/// files get label 0. Ordered by path.
pub fn discover(dir: &Path, num_classes: usize) -> Result<Vec<LabelledImage>> {
    let mut found = Vec::new();
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    for entry in sorted_entries(dir)? {
        if entry.is_dir() {
            let name = entry.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let Some(label) = class_of_dir(&name) else {
                log::warn!("skipping {}: not a type<k> class directory", entry.display());
                continue;
            };
            if label >= num_classes {
                return Err(CliError::Config(format!(
                    "{} holds class {label} but data.num_classes is {num_classes}",
                    entry.display()
                )));
            }
            for file in sorted_entries(&entry)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
                found.push(LabelledImage { id: format!("{name}/{}", stem(&file)), path: file, label });
            }
        } else if is_image(&entry) {
            found.push(LabelledImage { id: stem(&entry), path: entry, label: 0 });
        } else {
            log::debug!("ignoring {}", entry.display());
        }
    }
    Ok(found)
}

pub fn read_manifest(path: &Path) -> Result<Vec<PatchRecord>> {
    require(path)?;
    let bytes = fs::read(path).at(path)?;
    patch::read_manifest(&bytes[..]).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))
}

pub fn write_manifest(path: &Path, records: &[PatchRecord]) -> Result<()> {
    let mut buf = Vec::new();
    patch::write_manifest(&mut buf, records).map_err(|e| CliError::Failed(e.to_string()))?;
    write_file(path, buf)
}

/// Rows that point at a written patch.
pub fn usable(records: &[PatchRecord]) -> Vec<PatchRecord> {
    records.iter().filter(|r| r.accepted && !r.output_path.is_empty()).cloned().collect()
}

/// The usable rows of the dataset manifest, labels checked against the config.
pub fn dataset_rows(cfg: &Config, layout: &Layout) -> Result<(PathBuf, Vec<PatchRecord>)> {
    let dir = layout.dataset_dir(cfg);
    let manifest = dir.join("manifest.csv");
    let rows = usable(&read_manifest(&manifest)?);
    if let Some(r) = rows.iter().find(|r| r.label >= cfg.data.num_classes) {
        return Err(CliError::Mismatch(format!(
            "{}: label {} but data.num_classes is {}",
            manifest.display(),
            r.label,
            cfg.data.num_classes
        )));
    }
    Ok((dir, rows))
}

/// Loads images, resizing to `side` where needed.
pub fn load_images(paths: &[PathBuf], side: usize) -> Result<Vec<RgbImage>> {
    par::map(paths, |p| {
        let img = open_rgb(p)?;
        if img.dimensions() == (side as u32, side as u32) {
            Ok(img)
        } else {
            patch::resize_square(&img, side as u32).map_err(|e| CliError::Decode { path: p.clone(), message: e.to_string() })
        }
    })
    .into_iter()
    .collect()
}

/// The training set described by the dataset manifest.
pub fn load_dataset(cfg: &Config, layout: &Layout) -> Result<(Vec<PatchRecord>, SampleSet)> {
    let (dir, rows) = dataset_rows(cfg, layout)?;
    let paths: Vec<PathBuf> = rows.iter().map(|r| dir.join(&r.output_path)).collect();
    let images = load_images(&paths, cfg.model.input_side)?;
    let labels = rows.iter().map(|r| r.label).collect();
    let set = SampleSet::from_images(&images, labels, cfg.data.num_classes).map_err(|e| CliError::Failed(e.to_string()))?;
    Ok((rows, set))
}

/// `split.json`: indices into the usable rows of `manifest`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    /// Manifest path relative to the output directory.
    pub manifest: String,
    pub samples: usize,
    /// SHA-256 over the `path,label` lines of the usable rows.
    pub rows_sha256: String,
    #[serde(flatten)]
    pub split: ExperimentSplit,
}

pub fn rows_digest(rows: &[PatchRecord]) -> String {
    let mut hasher = Sha256::new();
    for r in rows {
        hasher.update(format!("{},{}\n", r.output_path, r.label).as_bytes());
    }
    hex::encode(hasher.finalize())
}

pub fn read_split(layout: &Layout, manifest: &str, rows: &[PatchRecord]) -> Result<ExperimentSplit> {
    let path = layout.split_file();
    require(&path)?;
    let text = fs::read_to_string(&path).at(&path)?;
    let file: SplitFile =
        serde_json::from_str(&text).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))?;
    let samples = rows.len();
    if file.manifest != manifest || file.samples != samples {
        return Err(CliError::Mismatch(format!(
            "{} was made for {} samples of {}, dataset has {samples} samples of {manifest}",
            path.display(),
            file.samples,
            file.manifest
        )));
    }
    if file.rows_sha256 != rows_digest(rows) {
        return Err(CliError::Mismatch(format!("{} was made for different rows of {manifest}; rerun split", path.display())));
    }
    file.split.check(samples).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))?;
    Ok(file.split)
}

/// Manifest path in the form recorded by `split.json`.
pub fn manifest_key(cfg: &Config, layout: &Layout) -> String {
    let dir = layout.dataset_dir(cfg);
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{name}/manifest.csv")
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    require(path)?;
    let bytes = fs::read(path).at(path)?;
    checkpoint::read_checkpoint(&bytes[..]).map_err(|e| checkpoint_error(path, e))
}

pub fn checkpoint_error(path: &Path, e: CheckpointError) -> CliError {
    match e {
        CheckpointError::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => CliError::Mismatch(format!("{}: {other}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_directories() {
        assert_eq!(class_of_dir("type2"), Some(2));
        assert_eq!(class_of_dir("Type0"), Some(0));
        assert_eq!(class_of_dir("types"), None);
        assert_eq!(class_of_dir("normal"), None);
    }
}
