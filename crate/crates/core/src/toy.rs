//! Procedural cartoon faces with exact label masks.
//!
//! Each face is drawn with a painter's algorithm over the 12-category
//! taxonomy; the image is then a flat colour per category, so the mask is
//! the ground-truth segmentation of the image by construction.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Error, Result};
use crate::imaging::{load_mask_png, save_mask_png, FloatImage};
use crate::mask::LabelMask;

pub const BACKGROUND: u8 = 0;
pub const EYEBROWS: u8 = 1;
pub const EYES: u8 = 2;
pub const NOSE: u8 = 3;
pub const MOUTH: u8 = 4;
pub const LIPS: u8 = 5;
pub const SKIN: u8 = 6;
pub const NECK: u8 = 7;
pub const HAIR: u8 = 8;
pub const EARS: u8 = 9;
pub const EYEGLASS: u8 = 10;
pub const EAR_RINGS: u8 = 11;
pub const NUM_CATEGORIES: usize = 12;

/// Geometry and palette of one face, in unit image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub cx: f64,
    pub cy: f64,
    pub face_rx: f64,
    pub face_ry: f64,
    pub hair_extent: f64,
    pub fringe: f64,
    pub eye_y: f64,
    pub eye_dx: f64,
    pub eye_rx: f64,
    pub eye_ry: f64,
    pub nose_len: f64,
    pub nose_w: f64,
    pub mouth_y: f64,
    pub mouth_rx: f64,
    pub mouth_ry: f64,
    pub neck_w: f64,
    pub glasses: bool,
    pub earrings: bool,
    pub palette: [[f32; 3]; NUM_CATEGORIES],
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], spread: f32) -> [f32; 3] {
    base.map(|c| (c + rng.random_range(-spread..=spread)).clamp(0.0, 1.0))
}

impl FaceParams {
    pub fn sample(rng: &mut ChaCha8Rng, force_accessories: bool) -> Self {
        let skin_tones = [[0.96, 0.80, 0.69], [0.87, 0.67, 0.52], [0.68, 0.48, 0.34], [0.45, 0.31, 0.22]];
        let hair_tones = [[0.10, 0.08, 0.07], [0.40, 0.25, 0.12], [0.85, 0.70, 0.40], [0.60, 0.20, 0.10]];
        let eye_tones = [[0.15, 0.35, 0.75], [0.30, 0.20, 0.10], [0.20, 0.55, 0.30], [0.45, 0.45, 0.50]];
        let tone = skin_tones[rng.random_range(0..4)];
        let skin = jitter(rng, tone, 0.04);
        let darker = |c: [f32; 3], f: f32| c.map(|v| v * f);
        let mut palette = [[0.0f32; 3]; NUM_CATEGORIES];
        palette[BACKGROUND as usize] = [rng.random(), rng.random(), rng.random()];
        palette[EYEBROWS as usize] = jitter(rng, [0.18, 0.12, 0.08], 0.05);
        let tone = eye_tones[rng.random_range(0..4)];
        palette[EYES as usize] = jitter(rng, tone, 0.05);
        palette[NOSE as usize] = darker(skin, 0.88);
        palette[MOUTH as usize] = jitter(rng, [0.30, 0.05, 0.08], 0.04);
        palette[LIPS as usize] = jitter(rng, [0.78, 0.30, 0.35], 0.06);
        palette[SKIN as usize] = skin;
        palette[NECK as usize] = darker(skin, 0.80);
        let tone = hair_tones[rng.random_range(0..4)];
        palette[HAIR as usize] = jitter(rng, tone, 0.05);
        palette[EARS as usize] = darker(skin, 0.93);
        palette[EYEGLASS as usize] = jitter(rng, [0.08, 0.08, 0.10], 0.03);
        palette[EAR_RINGS as usize] = jitter(rng, [0.95, 0.80, 0.20], 0.04);
        let face_rx = rng.random_range(0.24..0.30);
        let face_ry = rng.random_range(0.30..0.36);
        let cy = rng.random_range(0.47..0.53);
        Self {
            cx: rng.random_range(0.47..0.53),
            cy,
            face_rx,
            face_ry,
            hair_extent: rng.random_range(0.0..0.25),
            fringe: rng.random_range(0.06..0.14),
            eye_y: cy - rng.random_range(0.05..0.09),
            eye_dx: rng.random_range(0.10..0.13),
            eye_rx: rng.random_range(0.055..0.07),
            eye_ry: rng.random_range(0.035..0.045),
            nose_len: rng.random_range(0.09..0.13),
            nose_w: rng.random_range(0.03..0.045),
            mouth_y: cy + rng.random_range(0.14..0.18),
            mouth_rx: rng.random_range(0.08..0.11),
            mouth_ry: rng.random_range(0.035..0.05),
            neck_w: rng.random_range(0.10..0.14),
            glasses: force_accessories || rng.random_bool(0.3),
            earrings: force_accessories || rng.random_bool(0.3),
            palette,
        }
    }

    /// Category at unit coordinates (u right, v down).
    pub fn label_at(&self, u: f64, v: f64) -> u8 {
        let ell = |cx: f64, cy: f64, rx: f64, ry: f64| ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0;
        let (cx, cy) = (self.cx, self.cy);
        let mut label = BACKGROUND;
        if (u - cx).abs() < self.neck_w && v > cy + self.face_ry * 0.6 {
            label = NECK;
        }
        if ell(cx, cy - 0.04, self.face_rx + 0.06, self.face_ry + 0.08) && v < cy + self.hair_extent {
            label = HAIR;
        }
        for side in [-1.0, 1.0] {
            let ex = cx + side * self.face_rx;
            if ell(ex, cy + 0.02, 0.045, 0.075) {
                label = EARS;
            }
            if self.earrings && ell(ex, cy + 0.115, 0.028, 0.028) {
                label = EAR_RINGS;
            }
        }
        if ell(cx, cy, self.face_rx, self.face_ry) {
            label = if v < cy - self.face_ry + self.fringe { HAIR } else { SKIN };
        }
        if label == SKIN || label == HAIR {
            for side in [-1.0, 1.0] {
                let bx = cx + side * self.eye_dx;
                let by = self.eye_y - self.eye_ry - 0.04;
                if label == SKIN && (u - bx).abs() <= self.eye_rx + 0.01 && (v - by).abs() <= 0.018 {
                    label = EYEBROWS;
                }
            }
        }
        if self.glasses && label != HAIR {
            for side in [-1.0, 1.0] {
                let gx = cx + side * self.eye_dx;
                let outer = ell(gx, self.eye_y, self.eye_rx + 0.05, self.eye_ry + 0.05);
                let inner = ell(gx, self.eye_y, self.eye_rx + 0.025, self.eye_ry + 0.025);
                if outer && !inner {
                    label = EYEGLASS;
                }
            }
            if (u - cx).abs() < self.eye_dx - self.eye_rx - 0.04 && (v - self.eye_y).abs() < 0.012 {
                label = EYEGLASS;
            }
        }
        for side in [-1.0, 1.0] {
            if ell(cx + side * self.eye_dx, self.eye_y, self.eye_rx, self.eye_ry) {
                label = EYES;
            }
        }
        let nose_top = self.eye_y + 0.01;
        let t = (v - nose_top) / self.nose_len;
        if (0.0..=1.0).contains(&t) && (u - cx).abs() <= self.nose_w * (0.3 + 0.7 * t) {
            label = NOSE;
        }
        if ell(cx, self.mouth_y, self.mouth_rx, self.mouth_ry) {
            label = LIPS;
        }
        if ell(cx, self.mouth_y, self.mouth_rx * 0.75, self.mouth_ry * 0.35) {
            label = MOUTH;
        }
        label
    }

    /// Rasterizes at pixel centres.
    pub fn rasterize(&self, resolution: usize) -> LabelMask {
        let r = resolution as f64;
        let labels = (0..resolution * resolution)
            .map(|p| self.label_at(((p % resolution) as f64 + 0.5) / r, ((p / resolution) as f64 + 0.5) / r))
            .collect();
        LabelMask::new(resolution, resolution, NUM_CATEGORIES, labels).expect("toy labels are in range")
    }

    pub fn render(&self, mask: &LabelMask) -> FloatImage {
        let mut img = FloatImage::filled(mask.height(), mask.width(), [0.0; 3]);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                img.set_pixel(y, x, self.palette[mask.get(y, x) as usize]);
            }
        }
        img
    }
}

/// Parameters for face `index` of a seeded set; face 0 always wears
/// glasses and earrings so every category occurs.
pub fn face_params(seed: u64, index: usize) -> FaceParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    FaceParams::sample(&mut rng, index == 0)
}

/// An (image, mask) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: FloatImage,
    pub mask: LabelMask,
}

pub fn toy_faces(n: usize, resolution: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return arg_err("toy dataset needs n >= 1");
    }
    if resolution < 8 {
        return arg_err("toy resolution must be at least 8");
    }
    Ok((0..n)
        .map(|i| {
            let p = face_params(seed, i);
            let mask = p.rasterize(resolution);
            Sample { image: p.render(&mask), mask }
        })
        .collect())
}

/// Writes `DIR/0000.png` and `DIR/0000.mask.png`, ... for `n` faces.
pub fn write_toy_dataset(dir: &Path, n: usize, resolution: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (i, s) in toy_faces(n, resolution, seed)?.iter().enumerate() {
        let p = dir.join(format!("{i:04}.png"));
        s.image.save_png(&p)?;
        save_mask_png(&s.mask, &dir.join(format!("{i:04}.mask.png")))?;
        paths.push(p);
    }
    Ok(paths)
}

/// Companion mask path: `x.png` -> `x.mask.png`.
pub fn mask_path_for(image: &Path) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image.with_file_name(format!("{stem}.mask.png"))
}

/// Loads every `*.png` with a companion `*.mask.png`, sorted by name.
pub fn load_dataset(dir: &Path, num_categories: usize) -> Result<Vec<Sample>> {
    let mut images: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png") && !p.to_string_lossy().ends_with(".mask.png"))
        .collect();
    images.sort();
    let mut out = Vec::new();
    for p in images {
        let mp = mask_path_for(&p);
        if !mp.exists() {
            continue;
        }
        let image = FloatImage::load_png(&p)?;
        let mask = load_mask_png(&mp, num_categories)?;
        if mask.height() != image.height() || mask.width() != image.width() {
            return Err(Error::Argument(format!("{} and its mask differ in size", p.display())));
        }
        out.push(Sample { image, mask });
    }
    if out.is_empty() {
        return arg_err(format!("no image/mask pairs in {}", dir.display()));
    }
    Ok(out)
}
