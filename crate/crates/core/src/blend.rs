//! Multi-band (Laplacian pyramid) paste-back of a swapped crop.

use crate::error::{arg_err, Result};
use crate::imaging::FloatImage;

const KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Single-channel float plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Plane {
    fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, v: vec![0.0; h * w] }
    }

    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.v[y * self.w + x]
    }

    fn blur(&self) -> Plane {
        let mut tmp = Plane::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                tmp.v[y * self.w + x] = (0..5).map(|k| KERNEL[k] * self.at(y as isize, x as isize + k as isize - 2)).sum();
            }
        }
        let mut out = Plane::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                out.v[y * self.w + x] = (0..5).map(|k| KERNEL[k] * tmp.at(y as isize + k as isize - 2, x as isize)).sum();
            }
        }
        out
    }

    /// Blur then keep every second sample.
    pub fn reduce(&self) -> Plane {
        let b = self.blur();
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut out = Plane::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                out.v[y * w + x] = b.v[2 * y * self.w + 2 * x];
            }
        }
        out
    }

    /// Zero-insertion upsampling to (h, w) followed by a normalized blur, so
    /// constants stay constant up to the border.
    pub fn expand(&self, h: usize, w: usize) -> Plane {
        let mut up = Plane::zeros(h, w);
        let mut wt = Plane::zeros(h, w);
        for y in 0..self.h {
            for x in 0..self.w {
                if 2 * y < h && 2 * x < w {
                    up.v[2 * y * w + 2 * x] = self.v[y * self.w + x];
                    wt.v[2 * y * w + 2 * x] = 1.0;
                }
            }
        }
        let (up, wt) = (up.blur_zero(), wt.blur_zero());
        Plane { h, w, v: up.v.iter().zip(&wt.v).map(|(a, b)| a / b).collect() }
    }

    fn blur_zero(&self) -> Plane {
        let get = |p: &Plane, y: isize, x: isize| {
            if y < 0 || x < 0 || y >= p.h as isize || x >= p.w as isize {
                0.0
            } else {
                p.v[y as usize * p.w + x as usize]
            }
        };
        let (h, w) = (self.h, self.w);
        let mut tmp = Plane::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                tmp.v[y * w + x] = (0..5).map(|k| KERNEL[k] * get(self, y as isize, x as isize + k as isize - 2)).sum();
            }
        }
        let mut out = Plane::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                out.v[y * w + x] = (0..5).map(|k| KERNEL[k] * get(&tmp, y as isize + k as isize - 2, x as isize)).sum();
            }
        }
        out
    }

    fn sub(&self, o: &Plane) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(a, b)| a - b).collect() }
    }
}

pub fn gaussian_pyramid(p: &Plane, levels: usize) -> Vec<Plane> {
    let mut out = vec![p.clone()];
    for _ in 1..levels {
        let next = out.last().expect("non-empty").reduce();
        out.push(next);
    }
    out
}

pub fn laplacian_pyramid(p: &Plane, levels: usize) -> Vec<Plane> {
    let g = gaussian_pyramid(p, levels);
    let mut out: Vec<Plane> = (0..levels - 1).map(|l| g[l].sub(&g[l + 1].expand(g[l].h, g[l].w))).collect();
    out.push(g[levels - 1].clone());
    out
}

pub fn collapse(bands: &[Plane]) -> Plane {
    let mut acc = bands.last().expect("non-empty").clone();
    for band in bands.iter().rev().skip(1) {
        let up = acc.expand(band.h, band.w);
        acc = Plane { h: band.h, w: band.w, v: band.v.iter().zip(&up.v).map(|(a, b)| a + b).collect() };
    }
    acc
}

/// Blends plane `a` over `b` with weights `m` in `levels` bands, returned
/// as `b + collapse(G(m) * (L(a) - L(b)))` so identical inputs give `b`
/// exactly.
pub fn blend_planes(a: &Plane, b: &Plane, m: &Plane, levels: usize) -> Plane {
    let la = laplacian_pyramid(a, levels);
    let lb = laplacian_pyramid(b, levels);
    let gm = gaussian_pyramid(m, levels);
    let diff: Vec<Plane> = (0..levels)
        .map(|l| Plane {
            h: la[l].h,
            w: la[l].w,
            v: (0..la[l].v.len()).map(|i| gm[l].v[i] * (la[l].v[i] - lb[l].v[i])).collect(),
        })
        .collect();
    let d = collapse(&diff);
    Plane { h: b.h, w: b.w, v: b.v.iter().zip(&d.v).map(|(x, y)| x + y).collect() }
}

/// Crop-box weight: 1 inside, linear ramp to 0 over `feather` pixels
/// towards the box edge, 0 outside.
pub fn feathered_box(h: usize, w: usize, crop: &CropBox, feather: usize) -> Plane {
    let mut m = Plane::zeros(h, w);
    for y in crop.top..crop.top + crop.height {
        for x in crop.left..crop.left + crop.width {
            let d = (y - crop.top).min(crop.top + crop.height - 1 - y).min(x - crop.left).min(crop.left + crop.width - 1 - x);
            m.v[y * w + x] = if feather == 0 { 1.0 } else { ((d as f64 + 1.0) / (feather as f64 + 1.0)).min(1.0) };
        }
    }
    m
}

/// Support radius of the pyramid beyond the crop edge.
pub fn blend_margin(levels: usize) -> usize {
    if levels <= 1 {
        0
    } else {
        4 << (levels - 1)
    }
}

/// Pastes `swapped` (crop-sized) into `frame` at `crop` by multi-band
/// blending; pixels beyond the blending support are copied from `frame`.
pub fn paste_back(swapped: &FloatImage, frame: &FloatImage, crop: &CropBox, levels: usize, feather: usize) -> Result<FloatImage> {
    if levels == 0 {
        return arg_err("paste_back needs at least one level");
    }
    if crop.height == 0
        || crop.width == 0
        || crop.top + crop.height > frame.height()
        || crop.left + crop.width > frame.width()
    {
        return arg_err("crop box must lie within the frame");
    }
    if swapped.height() != crop.height || swapped.width() != crop.width {
        return arg_err("swapped image must match the crop box size");
    }
    let (h, w) = (frame.height(), frame.width());
    let m = feathered_box(h, w, crop, feather);
    let margin = blend_margin(levels) as isize;
    let mut out = frame.clone();
    for c in 0..3 {
        let b = Plane { h, w, v: frame.channel(c).iter().map(|&v| v as f64).collect() };
        let mut a = b.clone();
        for y in 0..crop.height {
            for x in 0..crop.width {
                a.v[(crop.top + y) * w + crop.left + x] = swapped.channel(c)[y * crop.width + x] as f64;
            }
        }
        let blended = blend_planes(&a, &b, &m, levels);
        let n = h * w;
        for y in 0..h {
            for x in 0..w {
                let inside = y as isize >= crop.top as isize - margin
                    && (y as isize) < (crop.top + crop.height) as isize + margin
                    && x as isize >= crop.left as isize - margin
                    && (x as isize) < (crop.left + crop.width) as isize + margin;
                if inside {
                    out.data_mut()[c * n + y * w + x] = blended.v[y * w + x].clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_image(h: usize, w: usize, seed: u32) -> FloatImage {
        let mut img = FloatImage::filled(h, w, [0.0; 3]);
        let mut s = seed;
        for v in img.data_mut() {
            s = s.wrapping_mul(1664525).wrapping_add(1013904223);
            *v = (s >> 8) as f32 / (1u32 << 24) as f32;
        }
        img
    }

    #[test]
    fn pyramid_roundtrip() {
        let img = noise_image(13, 10, 1);
        let p = Plane { h: 13, w: 10, v: img.channel(0).iter().map(|&v| v as f64).collect() };
        let back = collapse(&laplacian_pyramid(&p, 4));
        for (a, b) in p.v.iter().zip(&back.v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn self_blend_is_identity() {
        let frame = noise_image(40, 40, 2);
        let crop = CropBox { top: 8, left: 10, height: 16, width: 16 };
        let mut patch = FloatImage::filled(16, 16, [0.0; 3]);
        for y in 0..16 {
            for x in 0..16 {
                patch.set_pixel(y, x, frame.pixel(8 + y, 10 + x));
            }
        }
        assert_eq!(paste_back(&patch, &frame, &crop, 4, 3).unwrap(), frame);
        assert!(paste_back(&patch, &frame, &CropBox { top: 30, ..crop }, 4, 3).is_err());
    }

    #[test]
    fn single_level_is_masked_copy() {
        let frame = noise_image(20, 20, 3);
        let patch = noise_image(6, 6, 4);
        let crop = CropBox { top: 5, left: 7, height: 6, width: 6 };
        let out = paste_back(&patch, &frame, &crop, 1, 0).unwrap();
        for y in 0..20 {
            for x in 0..20 {
                let inside = (5..11).contains(&y) && (7..13).contains(&x);
                let want = if inside { patch.pixel(y - 5, x - 7) } else { frame.pixel(y, x) };
                assert_eq!(out.pixel(y, x), want);
            }
        }
    }

    #[test]
    fn far_pixels_untouched_and_seam_is_bounded() {
        let frame = FloatImage::filled(64, 64, [0.2; 3]);
        let patch = FloatImage::filled(64, 32, [0.8; 3]);
        let crop = CropBox { top: 0, left: 32, height: 64, width: 32 };
        let out = paste_back(&patch, &frame, &crop, 3, 0).unwrap();
        let row: Vec<f32> = (0..64).map(|x| out.pixel(32, x)[0]).collect();
        assert!(row.iter().all(|&v| (0.2 - 1e-6..=0.8 + 1e-6).contains(&v)), "{row:?}");
        assert!(row[16] < 0.21 && row[48] > 0.79);
        assert_eq!(row[0], 0.2);
        assert!((row[63] - 0.8).abs() < 1e-6);
        let a = Plane { h: 64, w: 64, v: (0..64 * 64).map(|p| if p % 64 >= 32 { 0.8 } else { 0.2 }).collect() };
        let b = Plane { h: 64, w: 64, v: vec![0.2; 64 * 64] };
        // Classic per-band convex combination, collapsed.
        let m = feathered_box(64, 64, &crop, 0);
        let (la, lb, gm) = (laplacian_pyramid(&a, 3), laplacian_pyramid(&b, 3), gaussian_pyramid(&m, 3));
        let bands: Vec<Plane> = (0..3)
            .map(|l| Plane {
                h: la[l].h,
                w: la[l].w,
                v: (0..la[l].v.len()).map(|i| gm[l].v[i] * la[l].v[i] + (1.0 - gm[l].v[i]) * lb[l].v[i]).collect(),
            })
            .collect();
        let oracle = collapse(&bands);
        for x in 0..64 {
            assert!((oracle.v[32 * 64 + x] as f32 - row[x]).abs() < 1e-6);
        }
    }
}
