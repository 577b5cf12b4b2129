//! Macenko stain normalization.
//!
//! Pixels are taken to optical density, the dominant plane of the tissue OD
//! cloud is found, and the extreme angles inside that plane give the two stain
//! vectors. Concentrations are recovered by least squares and re-rendered with
//! a reference stain matrix.

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StainError {
    #[error("only {found} tissue pixels above the OD threshold, need {required}")]
    InsufficientTissue { found: usize, required: usize },
    #[error("estimated stain vectors are collinear")]
    DegenerateStains,
    #[error("stain matrix is singular")]
    SingularStains,
    #[error("invalid stain matrix: {0}")]
    InvalidMatrix(String),
    #[error("reference profile: {0}")]
    Profile(String),
}

impl StainError {
    /// Short snake_case tag for logs.
    pub fn tag(&self) -> &'static str {
        match self {
            Self::InsufficientTissue { .. } => "insufficient_tissue",
            Self::DegenerateStains => "degenerate_stains",
            Self::SingularStains => "singular_stains",
            Self::InvalidMatrix(_) => "invalid_matrix",
            Self::Profile(_) => "bad_profile",
        }
    }
}

pub type Result<T, E = StainError> = std::result::Result<T, E>;

/// Estimation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MacenkoParams {
    /// Percentile (0..50) used for the extreme angles.
    pub alpha: f64,
    /// OD threshold; a pixel is tissue only if every channel exceeds it.
    pub beta: f64,
    /// Background intensity.
    pub i0: f64,
    pub min_pixels: usize,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.15, i0: 255.0, min_pixels: 100 }
    }
}

const MIN_ANGLE: f64 = 1e-3;

pub fn rgb_to_od(pixel: [u8; 3], i0: f64) -> [f64; 3] {
    pixel.map(|v| -(f64::from(v.max(1)) / i0).log10())
}

pub fn od_to_rgb(od: [f64; 3], i0: f64) -> [u8; 3] {
    od.map(|d| (i0 * 10f64.powf(-d)).round().clamp(0.0, 255.0) as u8)
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos()
}

/// Two unit stain vectors in OD space, hematoxylin first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainMatrix {
    columns: [[f64; 3]; 2],
}

impl StainMatrix {
    /// Normalizes both columns and checks the invariants. Column order is kept.
    pub fn new(h: [f64; 3], e: [f64; 3]) -> Result<Self> {
        let unit = |v: [f64; 3]| -> Result<[f64; 3]> {
            if v.iter().any(|c| !c.is_finite() || *c < 0.0) {
                return Err(StainError::InvalidMatrix(format!("component out of range in {v:?}")));
            }
            let n = norm(v);
            if n == 0.0 {
                return Err(StainError::InvalidMatrix("zero column".into()));
            }
            // already-unit columns keep their exact bits
            Ok(if (n - 1.0).abs() < 1e-12 { v } else { v.map(|c| c / n) })
        };
        let (h, e) = (unit(h)?, unit(e)?);
        if angle_between(h, e) <= MIN_ANGLE {
            return Err(StainError::DegenerateStains);
        }
        Ok(Self { columns: [h, e] })
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.columns[0]
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.columns[1]
    }

    pub fn column(&self, i: usize) -> [f64; 3] {
        self.columns[i]
    }

    /// OD of a pixel with the given concentrations.
    pub fn compose(&self, c: [f64; 2]) -> [f64; 3] {
        let [h, e] = self.columns;
        [0, 1, 2].map(|k| h[k] * c[0] + e[k] * c[1])
    }

    /// Least-squares concentrations of one OD vector, negatives clamped.
    pub fn solve(&self, od: [f64; 3]) -> Result<[f64; 2]> {
        let [h, e] = self.columns;
        let (a, b, d) = (dot(h, h), dot(h, e), dot(e, e));
        let det = a * d - b * b;
        if det.abs() < 1e-12 {
            return Err(StainError::SingularStains);
        }
        let (rh, re) = (dot(h, od), dot(e, od));
        Ok([((d * rh - b * re) / det).max(0.0), ((a * re - b * rh) / det).max(0.0)])
    }

    /// Largest per-column angle to `other`, in radians.
    pub fn angle_to(&self, other: &StainMatrix) -> f64 {
        (0..2).map(|i| angle_between(self.columns[i], other.columns[i])).fold(0.0, f64::max)
    }
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching unit eigenvectors.
pub fn symmetric_eigen3(m: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-30 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in &mut v {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.map(|i| a[i][i]);
    let vectors = order.map(|i| [v[0][i], v[1][i], v[2][i]]);
    (values, vectors)
}

/// Linear-interpolated percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, q)
}

/// Optical densities of every pixel, row-major.
pub fn image_od(image: &RgbImage, i0: f64) -> Vec<[f64; 3]> {
    image.pixels().map(|p| rgb_to_od(p.0, i0)).collect()
}

pub fn estimate_stains(image: &RgbImage, params: &MacenkoParams) -> Result<StainMatrix> {
    let tissue: Vec<[f64; 3]> =
        image_od(image, params.i0).into_iter().filter(|od| od.iter().all(|&d| d > params.beta)).collect();
    estimate_from_od(&tissue, params)
}

/// Stain estimation on an already thresholded OD cloud.
pub fn estimate_from_od(tissue: &[[f64; 3]], params: &MacenkoParams) -> Result<StainMatrix> {
    let required = params.min_pixels.max(2);
    if tissue.len() < required {
        return Err(StainError::InsufficientTissue { found: tissue.len(), required });
    }
    let n = tissue.len() as f64;
    let mut mean = [0.0; 3];
    for od in tissue {
        (0..3).for_each(|k| mean[k] += od[k]);
    }
    mean = mean.map(|m| m / n);
    let mut cov = [[0.0; 3]; 3];
    for od in tissue {
        let d = [0, 1, 2].map(|k| od[k] - mean[k]);
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    let cov = cov.map(|row| row.map(|c| c / (n - 1.0)));
    let (values, vectors) = symmetric_eigen3(cov);
    // a single stain leaves the cloud on a line: no second direction to span
    if !(values[1] > 1e-3 * values[0]) {
        return Err(StainError::DegenerateStains);
    }
    let orient = |v: [f64; 3]| if v.iter().sum::<f64>() < 0.0 { v.map(|c| -c) } else { v };
    let (e1, e2) = (orient(vectors[0]), orient(vectors[1]));

    let mut phi: Vec<f64> = tissue.iter().map(|&od| dot(od, e2).atan2(dot(od, e1))).collect();
    phi.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&phi, params.alpha);
    let hi = percentile_sorted(&phi, 100.0 - params.alpha);
    let back = |t: f64| {
        let v = [0, 1, 2].map(|k| e1[k] * t.cos() + e2[k] * t.sin());
        let v = orient(v).map(|c| c.max(0.0));
        let nv = norm(v);
        if nv == 0.0 { v } else { v.map(|c| c / nv) }
    };
    let (a, b) = (back(lo), back(hi));
    if norm(a) == 0.0 || norm(b) == 0.0 || angle_between(a, b) <= MIN_ANGLE {
        return Err(StainError::DegenerateStains);
    }
    let (h, e) = if a[0] >= b[0] { (a, b) } else { (b, a) };
    StainMatrix::new(h, e)
}

/// Per-pixel concentrations, row-major.
pub fn concentrations(image: &RgbImage, stains: &StainMatrix, i0: f64) -> Result<Vec<[f64; 2]>> {
    image.pixels().map(|p| stains.solve(rgb_to_od(p.0, i0))).collect()
}

/// 99th percentile of each concentration channel.
pub fn max_concentrations(conc: &[[f64; 2]]) -> [f64; 2] {
    [0, 1].map(|s| percentile(&conc.iter().map(|c| c[s]).collect::<Vec<_>>(), 99.0))
}

/// Renders a concentration map with `stains`.
pub fn render(conc: &[[f64; 2]], stains: &StainMatrix, width: u32, height: u32, i0: f64) -> RgbImage {
    let raw: Vec<u8> = conc.iter().flat_map(|&c| od_to_rgb(stains.compose(c), i0)).collect();
    RgbImage::from_raw(width, height, raw).expect("concentration map matches image size")
}

/// Normalization target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceProfile {
    pub stains: StainMatrix,
    pub max_conc: [f64; 2],
}

const PROFILE_KEYS: [&str; 8] = ["h_r", "h_g", "h_b", "e_r", "e_g", "e_b", "h_max", "e_max"];

impl ReferenceProfile {
    pub fn new(stains: StainMatrix, max_conc: [f64; 2]) -> Result<Self> {
        if max_conc.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(StainError::Profile(format!("concentrations must be positive, got {max_conc:?}")));
        }
        Ok(Self { stains, max_conc })
    }

    /// Promotes an image to reference.
    pub fn from_image(image: &RgbImage, params: &MacenkoParams) -> Result<Self> {
        let stains = estimate_stains(image, params)?;
        let conc = concentrations(image, &stains, params.i0)?;
        Self::new(stains, max_concentrations(&conc))
    }
}

impl Default for ReferenceProfile {
    /// Profile of the bundled reference patch, `data/reference_patch.png`.
    fn default() -> Self {
        DEFAULT_PROFILE.parse().expect("bundled profile is valid")
    }
}

const DEFAULT_PROFILE: &str = include_str!("../data/reference_profile.txt");

impl fmt::Display for ReferenceProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [h, e] = self.stains.columns;
        let values = [h[0], h[1], h[2], e[0], e[1], e[2], self.max_conc[0], self.max_conc[1]];
        for (k, v) in PROFILE_KEYS.iter().zip(values) {
            writeln!(f, "{k} {v}")?;
        }
        Ok(())
    }
}

impl FromStr for ReferenceProfile {
    type Err = StainError;

    fn from_str(s: &str) -> Result<Self> {
        let lines: Vec<&str> = s.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
        if lines.len() != PROFILE_KEYS.len() {
            return Err(StainError::Profile(format!("expected {} fields, found {}", PROFILE_KEYS.len(), lines.len())));
        }
        let mut v = [0.0; 8];
        for (i, (line, key)) in lines.iter().zip(PROFILE_KEYS).enumerate() {
            let (k, val) = line.split_once(char::is_whitespace).ok_or_else(|| StainError::Profile(format!("bad line `{line}`")))?;
            if k != key {
                return Err(StainError::Profile(format!("expected `{key}`, found `{k}`")));
            }
            v[i] = val.trim().parse().map_err(|_| StainError::Profile(format!("bad number in `{line}`")))?;
        }
        let stains = StainMatrix::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])?;
        Self::new(stains, [v[6], v[7]])
    }
}

/// Re-renders `image` in the colors of `reference`.
pub fn normalize(image: &RgbImage, reference: &ReferenceProfile, params: &MacenkoParams) -> Result<RgbImage> {
    let stains = estimate_stains(image, params)?;
    normalize_with(image, &stains, reference, params)
}

/// [`normalize`] with the source stain matrix already estimated.
pub fn normalize_with(
    image: &RgbImage,
    stains: &StainMatrix,
    reference: &ReferenceProfile,
    params: &MacenkoParams,
) -> Result<RgbImage> {
    let mut conc = concentrations(image, stains, params.i0)?;
    let src = max_concentrations(&conc);
    let scale = [0, 1].map(|s| if src[s] > 0.0 { reference.max_conc[s] / src[s] } else { 1.0 });
    for c in &mut conc {
        c[0] *= scale[0];
        c[1] *= scale[1];
    }
    Ok(render(&conc, &reference.stains, image.width(), image.height(), params.i0))
}

/// Normalizes a batch in parallel; each entry fails or succeeds on its own.
pub fn normalize_all(images: &[RgbImage], reference: &ReferenceProfile, params: &MacenkoParams) -> Vec<Result<RgbImage>> {
    par::map(images, |img| normalize(img, reference, params))
}

/// Builds an image from a stain matrix and a concentration map.
pub fn synthesize(stains: &StainMatrix, conc: &[[f64; 2]], width: u32, height: u32, i0: f64) -> RgbImage {
    render(conc, stains, width, height, i0)
}

/// Single-pixel helper, mostly for tests and tools.
pub fn pixel_from_conc(stains: &StainMatrix, c: [f64; 2], i0: f64) -> Rgb<u8> {
    Rgb(od_to_rgb(stains.compose(c), i0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn he() -> StainMatrix {
        StainMatrix::new([0.65, 0.70, 0.29], [0.07, 0.99, 0.11]).unwrap()
    }

    #[test]
    fn od_examples() {
        assert_eq!(rgb_to_od([255, 255, 255], 255.0), [0.0; 3]);
        assert!((-(25.5f64 / 255.0).log10() - 1.0).abs() < 1e-15);
        assert!(rgb_to_od([0, 0, 0], 255.0).iter().all(|d| d.is_finite()));
        for v in 1..=255u8 {
            let back = od_to_rgb(rgb_to_od([v, v, v], 255.0), 255.0);
            assert!(back.iter().all(|&b| (i32::from(b) - i32::from(v)).abs() <= 1));
        }
    }

    #[test]
    fn jacobi_matches_known_spectrum() {
        let m = [[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]];
        let (vals, vecs) = symmetric_eigen3(m);
        for (got, want) in vals.iter().zip([5.0, 3.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        for (l, v) in vals.iter().zip(vecs) {
            let mv = [0, 1, 2].map(|i| dot(m[i], v));
            assert!((0..3).all(|i| (mv[i] - l * v[i]).abs() < 1e-12));
        }
    }

    #[test]
    fn solve_examples() {
        let m = he();
        assert_eq!(m.solve([0.0; 3]).unwrap(), [0.0, 0.0]);
        let c = m.solve(m.compose([2.0, 3.0])).unwrap();
        assert!((c[0] - 2.0).abs() < 1e-9 && (c[1] - 3.0).abs() < 1e-9);
        let c = m.solve(m.hematoxylin().map(|v| v * 5.0)).unwrap();
        assert!((c[0] - 5.0).abs() < 1e-9 && c[1].abs() < 1e-9);
    }

    #[test]
    fn matrix_invariants() {
        assert!(matches!(StainMatrix::new([1.0, 0.0, 0.0], [2.0, 0.0, 0.0]), Err(StainError::DegenerateStains)));
        assert!(StainMatrix::new([-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]).is_err());
        assert!(StainMatrix::new([0.0; 3], [0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn percentile_is_linear() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert!((percentile(&v, 50.0) - 2.5).abs() < 1e-15);
        assert!((percentile(&v, 99.0) - 3.97).abs() < 1e-12);
    }

    #[test]
    fn profile_text_round_trip() {
        let p = ReferenceProfile::new(he(), [1.9705, 1.0308]).unwrap();
        let text = p.to_string();
        assert!(text.starts_with("h_r "));
        assert_eq!(text.parse::<ReferenceProfile>().unwrap(), p);
        assert!("h_r 1\n".parse::<ReferenceProfile>().is_err());
        assert!(ReferenceProfile::new(he(), [0.0, 1.0]).is_err());
        let default = ReferenceProfile::default();
        assert!(default.max_conc.iter().all(|&c| c > 0.0));
    }
}
