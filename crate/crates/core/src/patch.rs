//! Slide tiling, tissue-visibility QC, resizing, augmentation and class balancing.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{par, seed};

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("patch is {width}x{height}, expected a square")]
    NotSquare { width: u32, height: u32 },
    #[error("class {0} has no records")]
    EmptyClass(usize),
    #[error("tile size and stride must be positive")]
    BadGeometry,
    #[error("manifest: {0}")]
    Manifest(#[from] csv::Error),
}

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// One tile of a slide. Serializes as a manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub slide_id: String,
    pub x: u32,
    pub y: u32,
    pub size: u32,
    #[serde(rename = "mean")]
    pub mean_intensity: f64,
    #[serde(rename = "std")]
    pub std_intensity: f64,
    pub label: usize,
    pub accepted: bool,
    #[serde(rename = "path")]
    pub output_path: String,
}

pub const MANIFEST_HEADER: &str = "slide_id,x,y,size,mean,std,label,accepted,path";

/// Mean and population standard deviation of the luma of a window.
pub fn gray_stats(img: &RgbImage, x: u32, y: u32, size: u32) -> (f64, f64) {
    let n = f64::from(size) * f64::from(size);
    let (mut sum, mut sq) = (0.0, 0.0);
    for yy in y..y + size {
        for xx in x..x + size {
            let p = img.get_pixel(xx, yy).0;
            let l = LUMA[0] * f64::from(p[0]) + LUMA[1] * f64::from(p[1]) + LUMA[2] * f64::from(p[2]);
            sum += l;
            sq += l * l;
        }
    }
    let mean = sum / n;
    (mean, (sq / n - mean * mean).max(0.0).sqrt())
}

/// Row-major grid of `size`-pixel windows every `stride` pixels. Windows that
/// would cross the border are dropped. Records come back unaccepted; run
/// [`QcRule::apply`] to set the flag.
pub fn tile(slide: &RgbImage, slide_id: &str, label: usize, size: u32, stride: u32) -> Result<Vec<PatchRecord>, PatchError> {
    if size == 0 || stride == 0 {
        return Err(PatchError::BadGeometry);
    }
    let (w, h) = slide.dimensions();
    if w < size || h < size {
        log::warn!("slide {slide_id} ({w}x{h}) is smaller than one {size}px tile");
        return Ok(Vec::new());
    }
    let origins: Vec<(u32, u32)> = (0..=(h - size) / stride)
        .flat_map(|r| (0..=(w - size) / stride).map(move |c| (c * stride, r * stride)))
        .collect();
    let stats = par::map(&origins, |&(x, y)| gray_stats(slide, x, y, size));
    Ok(origins
        .into_iter()
        .zip(stats)
        .map(|((x, y), (mean, std))| PatchRecord {
            slide_id: slide_id.to_string(),
            x,
            y,
            size,
            mean_intensity: mean,
            std_intensity: std,
            label,
            accepted: false,
            output_path: String::new(),
        })
        .collect())
}

/// Tissue-visibility thresholds on luma statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QcRule {
    pub mean_max: f64,
    pub std_min: f64,
}

impl Default for QcRule {
    fn default() -> Self {
        Self { mean_max: 200.0, std_min: 60.0 }
    }
}

impl QcRule {
    pub fn accepts(&self, record: &PatchRecord) -> bool {
        qc_accept(record, self.mean_max, self.std_min)
    }

    pub fn apply(&self, records: &mut [PatchRecord]) {
        records.iter_mut().for_each(|r| r.accepted = self.accepts(r));
    }
}

/// Accepts tiles dark enough to hold tissue (`mean ≤ mean_max`) and textured
/// enough not to be blank (`std ≥ std_min`).
pub fn qc_accept(record: &PatchRecord, mean_max: f64, std_min: f64) -> bool {
    record.mean_intensity <= mean_max && record.std_intensity >= std_min
}

pub fn crop(slide: &RgbImage, record: &PatchRecord) -> RgbImage {
    imageops::crop_imm(slide, record.x, record.y, record.size, record.size).to_image()
}

/// Bilinear (triangle-filter) resize of a square patch to `side`×`side`.
pub fn resize_square(patch: &RgbImage, side: u32) -> Result<RgbImage, PatchError> {
    let (width, height) = patch.dimensions();
    if width != height {
        return Err(PatchError::NotSquare { width, height });
    }
    Ok(imageops::resize(patch, side, side, FilterType::Triangle))
}

pub fn resize224(patch: &RgbImage) -> Result<RgbImage, PatchError> {
    resize_square(patch, 224)
}

/// Which random transforms are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub allow_hflip: bool,
    pub allow_vflip: bool,
    pub allow_rot90: bool,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::kmc_like(0)
    }
}

impl AugmentPolicy {
    /// Rotation only.
    pub fn tcga_like(seed: u64) -> Self {
        Self { allow_hflip: false, allow_vflip: false, allow_rot90: true, seed }
    }

    /// Rotation and horizontal flip.
    pub fn colon_like(seed: u64) -> Self {
        Self { allow_hflip: true, allow_vflip: false, allow_rot90: true, seed }
    }

    /// Rotation with horizontal and vertical flips.
    pub fn kmc_like(seed: u64) -> Self {
        Self { allow_hflip: true, allow_vflip: true, allow_rot90: true, seed }
    }

    pub fn is_active(&self) -> bool {
        self.allow_hflip || self.allow_vflip || self.allow_rot90
    }

    /// Samples each enabled transform independently.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Augmentation {
        Augmentation {
            hflip: self.allow_hflip && rng.random_bool(0.5),
            vflip: self.allow_vflip && rng.random_bool(0.5),
            quarter_turns: if self.allow_rot90 { rng.random_range(0..4) } else { 0 },
        }
    }

    /// Draw keyed by (policy seed, sample id, epoch).
    pub fn draw_for(&self, sample: u64, epoch: u64) -> Augmentation {
        self.draw(&mut seed::rng(self.seed, &[sample, epoch]))
    }
}

/// A dihedral transform: optional flips, then counter-clockwise quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
}

impl Augmentation {
    pub const IDENTITY: Self = Self { hflip: false, vflip: false, quarter_turns: 0 };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Index in `0..8` of the dihedral element this transform produces. A
    /// vertical flip equals a horizontal flip followed by a half turn, so
    /// distinct draws can share an index.
    pub fn canonical_index(&self) -> usize {
        let mirrored = self.hflip ^ self.vflip;
        let turns = (self.quarter_turns as usize + 2 * usize::from(self.vflip)) % 4;
        usize::from(mirrored) * 4 + turns
    }

    pub fn from_canonical(index: usize) -> Self {
        Self { hflip: index % 8 >= 4, vflip: false, quarter_turns: (index % 4) as u8 }
    }

    /// Source position for output `(y, x)` in an `n×n` grid.
    fn source(&self, n: usize, mut y: usize, mut x: usize) -> (usize, usize) {
        // undo the rotation, then the flips
        for _ in 0..self.quarter_turns % 4 {
            // ccw turn maps src (y, x) to dst (n-1-x, y)
            (y, x) = (x, n - 1 - y);
        }
        if self.vflip {
            y = n - 1 - y;
        }
        if self.hflip {
            x = n - 1 - x;
        }
        (y, x)
    }

    /// Applies to a planar `[C, n, n]` buffer.
    pub fn apply_planar(&self, data: &[f64], channels: usize, n: usize) -> Vec<f64> {
        if self.is_identity() {
            return data.to_vec();
        }
        let mut out = vec![0.0; data.len()];
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = self.source(n, y, x);
                for c in 0..channels {
                    out[c * n * n + y * n + x] = data[c * n * n + sy * n + sx];
                }
            }
        }
        out
    }

    /// Applies to a square image; non-square images only accept flips.
    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let (w, h) = img.dimensions();
        if w != h {
            let mut out = img.clone();
            if self.hflip {
                imageops::flip_horizontal_in_place(&mut out);
            }
            if self.vflip {
                imageops::flip_vertical_in_place(&mut out);
            }
            return out;
        }
        let n = w as usize;
        RgbImage::from_fn(w, h, |x, y| {
            let (sy, sx) = self.source(n, y as usize, x as usize);
            *img.get_pixel(sx as u32, sy as u32)
        })
    }
}

/// Applies a fresh random draw of `policy` to `patch`.
pub fn augment<R: Rng + ?Sized>(patch: &RgbImage, policy: &AugmentPolicy, rng: &mut R) -> RgbImage {
    policy.draw(rng).apply(patch)
}

/// Uniform subsample without replacement to at most `per_class` records per
/// class. Input order is preserved among the survivors.
pub fn balance_downsample(records: &[PatchRecord], per_class: usize, seed: u64) -> Result<Vec<PatchRecord>, PatchError> {
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        classes.entry(r.label).or_default().push(i);
    }
    let max_label = classes.keys().next_back().copied().unwrap_or(0);
    if let Some(c) = (0..=max_label).find(|c| !classes.contains_key(c)) {
        return Err(PatchError::EmptyClass(c));
    }
    let mut keep = vec![false; records.len()];
    for (&class, members) in &classes {
        let mut rng = seed::rng(seed, &[0x6261_6c61, class as u64]);
        if members.len() <= per_class {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            members.choose_multiple(&mut rng, per_class).for_each(|&i| keep[i] = true);
        }
    }
    Ok(records.iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r.clone()).collect())
}

/// Flip variants used to pad small classes, in the order they are used.
pub const OVERSAMPLE_FLIPS: [Augmentation; 3] = [
    Augmentation { hflip: true, vflip: false, quarter_turns: 0 },
    Augmentation { hflip: false, vflip: true, quarter_turns: 0 },
    Augmentation { hflip: true, vflip: true, quarter_turns: 0 },
];

/// Pads every class below `target` with flipped copies of its own records:
/// all members get a horizontal flip first, then a vertical one, then both,
/// stopping at `target` or after three variants per record. Returns the
/// originals (identity) followed by the copies. Classes at or above `target`
/// are left alone.
pub fn oversample_with_flips(records: &[PatchRecord], target: usize) -> Vec<(PatchRecord, Augmentation)> {
    let mut out: Vec<(PatchRecord, Augmentation)> = records.iter().map(|r| (r.clone(), Augmentation::IDENTITY)).collect();
    let mut classes: BTreeMap<usize, Vec<&PatchRecord>> = BTreeMap::new();
    for r in records {
        classes.entry(r.label).or_default().push(r);
    }
    for members in classes.values() {
        let missing = target.saturating_sub(members.len());
        let extra = OVERSAMPLE_FLIPS
            .iter()
            .flat_map(|aug| members.iter().map(move |r| ((*r).clone(), *aug)))
            .take(missing);
        out.extend(extra);
    }
    out
}

/// Shuffles a copy of `items` under a counter-keyed seed.
pub fn shuffled<T: Clone>(items: &[T], seed: u64, stream: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut seed::rng(seed, &[stream]));
    v
}

pub fn write_manifest<W: Write>(out: W, records: &[PatchRecord]) -> Result<(), PatchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(MANIFEST_HEADER.split(','))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_manifest<R: Read>(input: R) -> Result<Vec<PatchRecord>, PatchError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != MANIFEST_HEADER {
        return Err(PatchError::Manifest(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected header `{}`", header.join(",")),
        ))));
    }
    rdr.deserialize().collect::<Result<Vec<PatchRecord>, _>>().map_err(PatchError::from)
}
