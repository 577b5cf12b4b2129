//! Procedural stained tissue for tests, benchmarks and demos.
//!
//! Images are built as hematoxylin/eosin concentration fields and rendered
//! through a per-image stain matrix, so color varies between images the way it
//! does between scanners and staining batches.

use std::io;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::seed;
use crate::stain::StainMatrix;

pub const H_BASE: [f64; 3] = [0.65, 0.70, 0.29];
pub const E_BASE: [f64; 3] = [0.22, 0.90, 0.35];

/// Names the target classes are written under.
pub fn class_dir(class: usize) -> String {
    format!("type{class}")
}

/// H&E-like stain matrix with each component jittered by up to `jitter`.
pub fn random_he_matrix<R: Rng + ?Sized>(rng: &mut R, jitter: f64) -> StainMatrix {
    let mut j = |v: [f64; 3]| v.map(|c| (c + rng.random_range(-jitter..=jitter)).max(0.05));
    let (h, e) = (j(H_BASE), j(E_BASE));
    StainMatrix::new(h, e).expect("jittered H&E columns stay apart")
}

/// Concentration pixels for stain-recovery checks: a third pure hematoxylin,
/// a third pure eosin, the rest mixed. Totals stay below saturation so 8-bit
/// rendering keeps the OD resolution.
pub fn mixed_concentrations<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| match i % 3 {
            0 => [rng.random_range(0.6..1.6), 0.0],
            1 => [0.0, rng.random_range(0.6..1.6)],
            _ => [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)],
        })
        .collect()
}

/// Bilinear value noise in `[0, 1]` on a `cells`-per-side lattice.
fn value_noise<R: Rng + ?Sized>(rng: &mut R, size: usize, cells: usize) -> Vec<f64> {
    let g = cells + 1;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.random()).collect();
    let mut out = vec![0.0; size * size];
    let scale = cells as f64 / size as f64;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 * scale, y as f64 * scale);
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let at = |cx: usize, cy: usize| lattice[cy.min(cells) * g + cx.min(cells)];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Paints filled ellipses of hematoxylin onto a concentration field.
fn stamp_nuclei<R: Rng + ?Sized>(rng: &mut R, conc: &mut [[f64; 2]], size: usize, count: usize, radius: (f64, f64)) {
    for _ in 0..count {
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let r = rng.random_range(radius.0..radius.1);
        let elong = rng.random_range(0.75..1.33);
        let (rx, ry) = (r * elong, r / elong);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (c, s) = (theta.cos(), theta.sin());
        let h = rng.random_range(0.8..1.25);
        let reach = rx.max(ry).ceil() as i64 + 1;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (px, py) = (cx as i64 + dx, cy as i64 + dy);
                if px < 0 || py < 0 || px >= size as i64 || py >= size as i64 {
                    continue;
                }
                let (ox, oy) = (px as f64 + 0.5 - cx, py as f64 + 0.5 - cy);
                let (u, v) = (ox * c + oy * s, -ox * s + oy * c);
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    let p = &mut conc[py as usize * size + px as usize];
                    p[0] = p[0].max(h);
                    p[1] = p[1].min(0.25);
                }
            }
        }
    }
}

fn stroma<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Vec<[f64; 2]> {
    let coarse = value_noise(rng, size, 4);
    let fine = value_noise(rng, size, 16);
    coarse.iter().zip(&fine).map(|(a, b)| [0.08, 0.35 + 0.45 * a + 0.2 * b]).collect()
}

/// Adds Gaussian noise and applies per-stain intensity scales.
fn finish<R: Rng + ?Sized>(rng: &mut R, conc: &mut [[f64; 2]], scale: [f64; 2], sigma: f64) {
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    for p in conc.iter_mut() {
        for s in 0..2 {
            p[s] = ((p[s] + noise.sample(rng)) * scale[s]).max(0.0);
        }
    }
}

/// Nucleus count and radius range of each target class.
pub const TARGET_CLASSES: [(std::ops::Range<usize>, (f64, f64)); 3] =
    [(5..9, (4.5, 6.5)), (12..18, (3.0, 4.2)), (26..36, (2.0, 3.0))];

/// Concentration field of a tissue patch of the given class.
pub fn tissue_concentrations<R: Rng + ?Sized>(rng: &mut R, class: usize, size: usize) -> Vec<[f64; 2]> {
    let (counts, radius) = TARGET_CLASSES[class % TARGET_CLASSES.len()].clone();
    let area = (size * size) as f64 / (64.0 * 64.0);
    let count = (rng.random_range(counts) as f64 * area).round() as usize;
    let mut conc = stroma(rng, size);
    stamp_nuclei(rng, &mut conc, size, count, radius);
    conc
}

fn render(stains: &StainMatrix, conc: &[[f64; 2]], size: usize) -> RgbImage {
    crate::stain::synthesize(stains, conc, size as u32, size as u32, 255.0)
}

/// One stained patch with per-image stain and intensity variation.
pub fn stained_patch(class: usize, size: usize, seed: u64) -> RgbImage {
    let mut rng = seed::rng(seed, &[0x7469_7373, class as u64]);
    let stains = random_he_matrix(&mut rng, 0.08);
    let mut conc = tissue_concentrations(&mut rng, class, size);
    let scale = [rng.random_range(0.8..1.2), rng.random_range(0.8..1.2)];
    finish(&mut rng, &mut conc, scale, 0.04);
    render(&stains, &conc, size)
}

/// Source-task patterns: stripes, fine dots, large blobs and plain noise.
pub const SOURCE_CLASSES: usize = 4;

pub fn texture_patch(class: usize, size: usize, seed: u64) -> RgbImage {
    let mut rng = seed::rng(seed, &[0x7465_7874, class as u64]);
    let stains = random_he_matrix(&mut rng, 0.15);
    let mut conc = match class % SOURCE_CLASSES {
        0 => {
            let period = rng.random_range(5.0..12.0);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..period);
            let (c, s) = (theta.cos(), theta.sin());
            (0..size * size)
                .map(|i| {
                    let (x, y) = ((i % size) as f64, (i / size) as f64);
                    let t = ((x * c + y * s + phase) / period * std::f64::consts::TAU).sin();
                    [if t > 0.0 { 1.2 } else { 0.1 }, 0.5]
                })
                .collect()
        }
        1 => {
            let mut conc = stroma(&mut rng, size);
            let n = rng.random_range(40..70) * size * size / 4096;
            stamp_nuclei(&mut rng, &mut conc, size, n, (1.2, 2.2));
            conc
        }
        2 => {
            let mut conc = stroma(&mut rng, size);
            let n = rng.random_range(3..7) * size * size / 4096;
            stamp_nuclei(&mut rng, &mut conc, size, n.max(1), (6.0, 10.0));
            conc
        }
        _ => {
            let cells = rng.random_range(3..9);
            value_noise(&mut rng, size, cells).into_iter().map(|v| [1.4 * v, 1.0 - 0.8 * v]).collect()
        }
    };
    let scale = [rng.random_range(0.8..1.2), rng.random_range(0.8..1.2)];
    finish(&mut rng, &mut conc, scale, 0.04);
    render(&stains, &conc, size)
}

/// A labelled image set held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<RgbImage>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Writes `dir/type<k>/<prefix>_<i>.png` and returns the paths in order.
    pub fn save(&self, dir: &Path, prefix: &str) -> io::Result<Vec<PathBuf>> {
        let mut paths = Vec::with_capacity(self.len());
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            let class_dir = dir.join(class_dir(label));
            std::fs::create_dir_all(&class_dir)?;
            let path = class_dir.join(format!("{prefix}_{i:05}.png"));
            img.save(&path).map_err(io::Error::other)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

fn build(num_classes: usize, per_class: usize, make: impl Fn(usize, u64) -> RgbImage + Sync) -> Dataset {
    let n = num_classes * per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    let images = crate::par::map_range(n, |i| make(labels[i], i as u64));
    Dataset { images, labels, num_classes }
}

/// Three-class stained tissue set, classes interleaved.
pub fn stained_dataset(per_class: usize, size: usize, seed: u64) -> Dataset {
    build(TARGET_CLASSES.len(), per_class, |c, i| stained_patch(c, size, seed::derive(seed, &[i])))
}

/// Four-class texture set for pretraining.
pub fn texture_dataset(per_class: usize, size: usize, seed: u64) -> Dataset {
    build(SOURCE_CLASSES, per_class, |c, i| texture_patch(c, size, seed::derive(seed, &[i])))
}

/// A slide with a roughly elliptical tissue region on white background.
pub fn slide(width: u32, height: u32, class: usize, seed: u64) -> RgbImage {
    let mut rng = seed::rng(seed, &[0x736c_6964, class as u64]);
    let stains = random_he_matrix(&mut rng, 0.05);
    let size = width.max(height) as usize;
    let mut conc = tissue_concentrations(&mut rng, class, size);
    finish(&mut rng, &mut conc, [1.0, 1.0], 0.04);
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let (rx, ry) = (width as f64 * 0.42, height as f64 * 0.42);
    let wobble = value_noise(&mut rng, size, 6);
    RgbImage::from_fn(width, height, |x, y| {
        let d = ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2);
        let i = y as usize * size + x as usize;
        let c = if d <= 0.8 + 0.4 * wobble[i] { conc[i] } else { [0.0, 0.0] };
        crate::stain::pixel_from_conc(&stains, c, 255.0)
    })
}
