//! Label masks over the facial taxonomy and the deterministic mask algebra
//! used by swapping: downsampling, region indicators, recomposition of the
//! swapped mask and extraction of mismatch regions.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

pub type CategoryId = u8;

const DEFAULT_TAXONOMY_JSON: &str = include_str!("../data/taxonomy.json");

/// An H×W map assigning exactly one category id in `[0, C)` to each pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    num_categories: usize,
    labels: Vec<CategoryId>,
}

impl LabelMask {
    pub fn new(
        height: usize,
        width: usize,
        num_categories: usize,
        labels: Vec<CategoryId>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return arg_err("mask dimensions must be nonzero");
        }
        if num_categories == 0 || num_categories > 256 {
            return arg_err(format!("num_categories {num_categories} out of range"));
        }
        if labels.len() != height * width {
            return arg_err(format!(
                "mask has {} labels, expected {height}x{width}",
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_categories) {
            return Err(Error::Taxonomy(format!(
                "label {bad} outside [0, {num_categories})"
            )));
        }
        Ok(Self { height, width, num_categories, labels })
    }

    pub fn filled(height: usize, width: usize, num_categories: usize, label: CategoryId) -> Result<Self> {
        Self::new(height, width, num_categories, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn labels(&self) -> &[CategoryId] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> CategoryId {
        self.labels[y * self.width + x]
    }

    pub fn same_shape(&self, other: &LabelMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Categories with at least one pixel.
    pub fn present_categories(&self) -> Vec<bool> {
        let mut present = vec![false; self.num_categories];
        for &l in &self.labels {
            present[l as usize] = true;
        }
        present
    }

    pub fn count(&self, category: CategoryId) -> usize {
        self.labels.iter().filter(|&&l| l == category).count()
    }

    /// Nearest-neighbour downsampling to `height`×`width`. Each output pixel
    /// samples the centre of its source block, so output ids are a subset of
    /// input ids.
    pub fn downsample_to(&self, height: usize, width: usize) -> Result<LabelMask> {
        if height == 0 || width == 0 || self.height % height != 0 || self.width % width != 0 {
            return arg_err(format!(
                "cannot downsample {}x{} mask to {height}x{width}",
                self.height, self.width
            ));
        }
        let fy = self.height / height;
        let fx = self.width / width;
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = y * fy + fy / 2;
            for x in 0..width {
                labels.push(self.get(sy, x * fx + fx / 2));
            }
        }
        Ok(LabelMask { height, width, num_categories: self.num_categories, labels })
    }

    /// Square downsampling; `size` must divide both dimensions.
    pub fn downsample(&self, size: usize) -> Result<LabelMask> {
        self.downsample_to(size, size)
    }

    pub fn flip_horizontal(&self) -> LabelMask {
        let mut labels = Vec::with_capacity(self.labels.len());
        for row in self.labels.chunks(self.width) {
            labels.extend(row.iter().rev());
        }
        LabelMask { labels, ..self.clone() }
    }

    /// Applies a category permutation: pixel label `l` becomes `perm[l]`.
    pub fn relabel(&self, perm: &[CategoryId]) -> Result<LabelMask> {
        if perm.len() != self.num_categories {
            return arg_err("permutation length must equal the category count");
        }
        let labels = self.labels.iter().map(|&l| perm[l as usize]).collect();
        LabelMask::new(self.height, self.width, self.num_categories, labels)
    }

    /// Indicator of pixels carrying `category`.
    pub fn region_indicator(&self, category: CategoryId) -> Vec<bool> {
        self.labels.iter().map(|&l| l == category).collect()
    }

    /// Indicator of pixels whose label is in the taxonomy's inner-face set.
    pub fn inner_face_mask(&self, taxonomy: &CategoryTaxonomy) -> Vec<bool> {
        self.labels.iter().map(|&l| taxonomy.is_inner(l)).collect()
    }
}

/// Boolean H×W map of mismatch pixels: inner in the target, non-inner in
/// the driven face.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MismatchMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl MismatchMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return arg_err("mismatch bit count does not match dimensions");
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Fraction of true pixels, in `[0, 1]`.
    pub fn area_ratio(&self) -> f64 {
        self.count() as f64 / (self.height * self.width) as f64
    }
}

pub fn mismatch_area_ratio(m: &MismatchMask) -> f64 {
    m.area_ratio()
}

#[derive(Debug, Deserialize)]
struct TaxonomyFile {
    categories: Vec<String>,
    inner: Vec<String>,
    exchange_from_driven: Vec<String>,
    stitch_target_first: Vec<String>,
    stitch_target_last: Vec<String>,
    source_labels: BTreeMap<String, String>,
    source_order: Vec<String>,
}

/// Category names plus the subsets that drive recomposition and exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTaxonomy {
    names: Vec<String>,
    inner: Vec<bool>,
    exchange: Vec<bool>,
    stitch_first: Vec<bool>,
    stitch_last: Vec<bool>,
}

impl CategoryTaxonomy {
    /// Builds a taxonomy from id sets. The two target stitch sets must be
    /// disjoint and together cover exactly the non-inner categories.
    pub fn new(
        names: Vec<String>,
        inner: &[CategoryId],
        exchange: &[CategoryId],
        stitch_first: &[CategoryId],
        stitch_last: &[CategoryId],
    ) -> Result<Self> {
        let c = names.len();
        if c == 0 || c > 256 {
            return Err(Error::Taxonomy(format!("category count {c} out of range")));
        }
        let to_flags = |ids: &[CategoryId], what: &str| -> Result<Vec<bool>> {
            let mut f = vec![false; c];
            for &id in ids {
                if id as usize >= c {
                    return Err(Error::Taxonomy(format!("{what} id {id} outside [0, {c})")));
                }
                f[id as usize] = true;
            }
            Ok(f)
        };
        let inner = to_flags(inner, "inner")?;
        let exchange = to_flags(exchange, "exchange")?;
        let stitch_first = to_flags(stitch_first, "stitch_target_first")?;
        let stitch_last = to_flags(stitch_last, "stitch_target_last")?;
        for id in 0..c {
            let covered = stitch_first[id] as u8 + stitch_last[id] as u8;
            if inner[id] && covered != 0 {
                return Err(Error::Taxonomy(format!(
                    "inner category `{}` appears in a target stitch set",
                    names[id]
                )));
            }
            if !inner[id] && covered != 1 {
                return Err(Error::Taxonomy(format!(
                    "non-inner category `{}` must appear in exactly one target stitch set",
                    names[id]
                )));
            }
        }
        Ok(Self { names, inner, exchange, stitch_first, stitch_last })
    }

    /// The 12-category facial taxonomy shipped in `data/taxonomy.json`.
    pub fn default_faces() -> Self {
        let (tax, _) = parse_taxonomy_file(DEFAULT_TAXONOMY_JSON).expect("bundled taxonomy is valid");
        tax
    }

    pub fn from_json(text: &str) -> Result<(Self, LabelMapping)> {
        parse_taxonomy_file(text)
    }

    pub fn num_categories(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<CategoryId> {
        self.names.iter().position(|n| n == name).map(|i| i as CategoryId)
    }

    pub fn is_inner(&self, id: CategoryId) -> bool {
        self.inner[id as usize]
    }

    pub fn inner_ids(&self) -> Vec<CategoryId> {
        ids_of(&self.inner)
    }

    pub fn non_inner_ids(&self) -> Vec<CategoryId> {
        (0..self.names.len() as u16)
            .map(|i| i as CategoryId)
            .filter(|&i| !self.inner[i as usize])
            .collect()
    }

    /// Categories whose texture codes come from the driven face when swapping.
    pub fn exchange_ids(&self) -> Vec<CategoryId> {
        ids_of(&self.exchange)
    }

    pub fn in_stitch_first(&self, id: CategoryId) -> bool {
        self.stitch_first[id as usize]
    }

    pub fn in_stitch_last(&self, id: CategoryId) -> bool {
        self.stitch_last[id as usize]
    }

    /// Label used when a hole has no non-inner pixel to borrow from.
    pub fn fallback_label(&self) -> CategoryId {
        self.id_of("background").unwrap_or(0)
    }
}

fn ids_of(flags: &[bool]) -> Vec<CategoryId> {
    flags
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| i as CategoryId)
        .collect()
}

/// Lookup table mapping source-dataset label ids onto taxonomy ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMapping {
    pub source_names: Vec<String>,
    pub table: Vec<CategoryId>,
}

impl LabelMapping {
    pub fn default_faces() -> Self {
        let (_, m) = parse_taxonomy_file(DEFAULT_TAXONOMY_JSON).expect("bundled taxonomy is valid");
        m
    }
}

fn parse_taxonomy_file(text: &str) -> Result<(CategoryTaxonomy, LabelMapping)> {
    let file: TaxonomyFile = serde_json::from_str(text)?;
    let lookup = |names: &[String]| -> Result<Vec<CategoryId>> {
        names
            .iter()
            .map(|n| {
                file.categories
                    .iter()
                    .position(|c| c == n)
                    .map(|i| i as CategoryId)
                    .ok_or_else(|| Error::Taxonomy(format!("unknown category `{n}`")))
            })
            .collect()
    };
    let taxonomy = CategoryTaxonomy::new(
        file.categories.clone(),
        &lookup(&file.inner)?,
        &lookup(&file.exchange_from_driven)?,
        &lookup(&file.stitch_target_first)?,
        &lookup(&file.stitch_target_last)?,
    )?;
    let mut table = Vec::with_capacity(file.source_order.len());
    for src in &file.source_order {
        let target = file
            .source_labels
            .get(src)
            .ok_or_else(|| Error::Taxonomy(format!("source label `{src}` has no mapping")))?;
        table.push(lookup(std::slice::from_ref(target))?[0]);
    }
    Ok((taxonomy, LabelMapping { source_names: file.source_order, table }))
}

/// Maps raw source-dataset ids onto the taxonomy through `mapping`.
pub fn aggregate_labels(
    raw: &[u8],
    height: usize,
    width: usize,
    mapping: &LabelMapping,
    num_categories: usize,
) -> Result<LabelMask> {
    let mut labels = Vec::with_capacity(raw.len());
    for &r in raw {
        let id = mapping
            .table
            .get(r as usize)
            .ok_or_else(|| Error::Taxonomy(format!("raw label {r} has no mapping entry")))?;
        labels.push(*id);
    }
    LabelMask::new(height, width, num_categories, labels)
}

fn check_pair(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if !a.same_shape(b) {
        return arg_err(format!(
            "mask size mismatch: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        ));
    }
    if a.num_categories != b.num_categories {
        return arg_err("masks use different category counts");
    }
    Ok(())
}

/// Pixels that are inner in `target` but not inner in `driven`.
pub fn mismatch_mask(
    driven: &LabelMask,
    target: &LabelMask,
    taxonomy: &CategoryTaxonomy,
) -> Result<MismatchMask> {
    check_pair(driven, target)?;
    let bits = driven
        .labels
        .iter()
        .zip(&target.labels)
        .map(|(&d, &t)| !taxonomy.is_inner(d) && taxonomy.is_inner(t))
        .collect();
    MismatchMask::new(driven.height, driven.width, bits)
}

/// Recomposes the swapped mask on an empty canvas: target neck and
/// background first, then the driven inner face, then target hair, glasses,
/// ears and earrings on top. Pixels left unassigned form the mismatch
/// region; they are filled with the nearest assigned non-inner label
/// (4-connected breadth-first distance, ties to the smaller id).
pub fn recompose_swap_mask(
    driven: &LabelMask,
    target: &LabelMask,
    taxonomy: &CategoryTaxonomy,
) -> Result<(LabelMask, MismatchMask)> {
    check_pair(driven, target)?;
    if taxonomy.num_categories() != target.num_categories {
        return arg_err("taxonomy and masks disagree on category count");
    }
    let n = target.labels.len();
    let mut canvas: Vec<Option<CategoryId>> = vec![None; n];
    for (slot, &t) in canvas.iter_mut().zip(&target.labels) {
        if taxonomy.in_stitch_first(t) {
            *slot = Some(t);
        }
    }
    for (slot, &d) in canvas.iter_mut().zip(&driven.labels) {
        if taxonomy.is_inner(d) {
            *slot = Some(d);
        }
    }
    for (slot, &t) in canvas.iter_mut().zip(&target.labels) {
        if taxonomy.in_stitch_last(t) {
            *slot = Some(t);
        }
    }
    let holes: Vec<bool> = canvas.iter().map(Option::is_none).collect();
    let filled = fill_nearest_non_inner(&canvas, target.height, target.width, taxonomy);
    let mask = LabelMask::new(target.height, target.width, target.num_categories, filled)?;
    Ok((mask, MismatchMask::new(target.height, target.width, holes)?))
}

fn fill_nearest_non_inner(
    canvas: &[Option<CategoryId>],
    height: usize,
    width: usize,
    taxonomy: &CategoryTaxonomy,
) -> Vec<CategoryId> {
    let n = canvas.len();
    let mut dist = vec![usize::MAX; n];
    let mut label = vec![0 as CategoryId; n];
    let mut queue = VecDeque::new();
    for (i, slot) in canvas.iter().enumerate() {
        if let Some(l) = *slot {
            if !taxonomy.is_inner(l) {
                dist[i] = 0;
                label[i] = l;
                queue.push_back(i);
            }
        }
    }
    // Every node at distance d-1 is popped before any node at distance d, so
    // the min-label relaxation below is final by the time a node is popped.
    while let Some(p) = queue.pop_front() {
        let (y, x) = (p / width, p % width);
        let mut visit = |q: usize| {
            if dist[q] == usize::MAX {
                dist[q] = dist[p] + 1;
                label[q] = label[p];
                queue.push_back(q);
            } else if dist[q] == dist[p] + 1 && label[p] < label[q] {
                label[q] = label[p];
            }
        };
        if y > 0 {
            visit(p - width);
        }
        if y + 1 < height {
            visit(p + width);
        }
        if x > 0 {
            visit(p - 1);
        }
        if x + 1 < width {
            visit(p + 1);
        }
    }
    canvas
        .iter()
        .enumerate()
        .map(|(i, slot)| match slot {
            Some(l) => *l,
            None if dist[i] == usize::MAX => taxonomy.fallback_label(),
            None => label[i],
        })
        .collect()
}

/// Parameters for synthetic mismatch masks around the face contour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MismatchParams {
    /// Half-width of the contour band in pixels (Chebyshev distance).
    pub band_width: usize,
    pub blob_count: usize,
    pub blob_radius_min: f64,
    pub blob_radius_max: f64,
}

impl Default for MismatchParams {
    fn default() -> Self {
        Self { band_width: 3, blob_count: 4, blob_radius_min: 3.0, blob_radius_max: 8.0 }
    }
}

/// Random blobs of the band `dilate(inner) XOR erode(inner)` around the
/// inner-face boundary. Deterministic for a fixed seed.
pub fn random_mismatch_mask(
    mask: &LabelMask,
    taxonomy: &CategoryTaxonomy,
    seed: u64,
    params: &MismatchParams,
) -> Result<MismatchMask> {
    let inner = mask.inner_face_mask(taxonomy);
    if !inner.iter().any(|&b| b) {
        return Err(Error::Precondition("mask has no inner-face pixels".into()));
    }
    let (h, w) = (mask.height, mask.width);
    if params.band_width == 0 || params.blob_count == 0 {
        return Ok(MismatchMask::empty(h, w));
    }
    if params.blob_radius_min < 0.0 || params.blob_radius_max < params.blob_radius_min {
        return arg_err("blob radius range is invalid");
    }
    let band = contour_band(&inner, h, w, params.band_width);
    let band_pixels: Vec<usize> = (0..h * w).filter(|&i| band[i]).collect();
    let mut bits = vec![false; h * w];
    if band_pixels.is_empty() {
        return MismatchMask::new(h, w, bits);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<(f64, f64, f64)> = (0..params.blob_count)
        .map(|_| {
            let c = band_pixels[rng.random_range(0..band_pixels.len())];
            let r = if params.blob_radius_max > params.blob_radius_min {
                rng.random_range(params.blob_radius_min..=params.blob_radius_max)
            } else {
                params.blob_radius_min
            };
            ((c / w) as f64, (c % w) as f64, r)
        })
        .collect();
    for &p in &band_pixels {
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        if blobs.iter().any(|&(cy, cx, r)| (y - cy).powi(2) + (x - cx).powi(2) <= r * r) {
            bits[p] = true;
        }
    }
    MismatchMask::new(h, w, bits)
}

/// Pixels within Chebyshev distance `radius` of a pixel with the opposite
/// indicator value (windows clipped to the image).
fn contour_band(ind: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let mut band = vec![false; h * w];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            let me = ind[y * w + x];
            'win: for yy in y0..=y1 {
                for xx in x0..=x1 {
                    if ind[yy * w + xx] != me {
                        band[y * w + x] = true;
                        break 'win;
                    }
                }
            }
        }
    }
    band
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tax() -> CategoryTaxonomy {
        CategoryTaxonomy::default_faces()
    }

    fn id(name: &str) -> CategoryId {
        tax().id_of(name).unwrap()
    }

    fn mask(h: usize, w: usize, labels: Vec<u8>) -> LabelMask {
        LabelMask::new(h, w, 12, labels).unwrap()
    }

    #[test]
    fn default_taxonomy_names_and_partition() {
        let t = tax();
        let expected = [
            "background", "eyebrows", "eyes", "nose", "mouth", "lips", "face skin", "neck", "hair",
            "ears", "eyeglass", "ear rings",
        ];
        assert_eq!(t.names(), expected.map(String::from));
        let inner = t.inner_ids();
        let outer = t.non_inner_ids();
        assert_eq!(inner, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(inner.len() + outer.len(), 12);
        assert!(inner.iter().all(|i| !outer.contains(i)));
        assert!(!t.is_inner(id("eyeglass")));
    }

    #[test]
    fn taxonomy_rejects_incomplete_stitch_sets() {
        let names: Vec<String> = ["bg", "skin", "hair"].map(String::from).to_vec();
        assert!(CategoryTaxonomy::new(names.clone(), &[1], &[1], &[0], &[]).is_err());
        assert!(CategoryTaxonomy::new(names.clone(), &[1], &[1], &[0, 1], &[2]).is_err());
        assert!(CategoryTaxonomy::new(names, &[1], &[1], &[0], &[2]).is_ok());
    }

    #[test]
    fn aggregate_merges_symmetric_parts() {
        let m = LabelMapping::default_faces();
        assert_eq!(m.table.len(), 19);
        let raw = vec![0u8; 16];
        assert!(aggregate_labels(&raw, 4, 4, &m, 12).unwrap().labels().iter().all(|&l| l == 0));

        let src = |n: &str| m.source_names.iter().position(|s| s == n).unwrap() as u8;
        let out = aggregate_labels(&[src("l_brow"), src("r_brow")], 1, 2, &m, 12).unwrap();
        assert_eq!(out.labels(), &[id("eyebrows"), id("eyebrows")]);

        // per-pixel lookup oracle over 8 raw ids
        let raw_ids = ["skin", "l_eye", "r_eye", "u_lip", "l_lip", "l_ear", "hat", "neck"];
        let mut raw = vec![0u8; 16];
        for (i, n) in raw_ids.iter().enumerate() {
            raw[i * 2] = src(n);
        }
        let out = aggregate_labels(&raw, 4, 4, &m, 12).unwrap();
        let expected_name = |r: u8| -> &str {
            match m.source_names[r as usize].as_str() {
                "skin" => "face skin",
                "l_eye" | "r_eye" => "eyes",
                "u_lip" | "l_lip" => "lips",
                "l_ear" => "ears",
                "neck" => "neck",
                _ => "background",
            }
        };
        for (p, &r) in raw.iter().enumerate() {
            assert_eq!(out.labels()[p], id(expected_name(r)), "pixel {p}");
        }
        assert!(matches!(aggregate_labels(&[19], 1, 1, &m, 12), Err(Error::Taxonomy(_))));
    }

    #[test]
    fn downsample_cases() {
        let c = LabelMask::filled(8, 8, 12, 5).unwrap();
        assert_eq!(c.downsample(2).unwrap(), LabelMask::filled(2, 2, 12, 5).unwrap());
        let m = mask(2, 2, vec![1, 2, 3, 4]);
        assert_eq!(m.downsample(2).unwrap(), m);
        #[rustfmt::skip]
        let blocks = mask(4, 4, vec![
            1, 1, 2, 2,
            1, 1, 2, 2,
            3, 3, 4, 4,
            3, 3, 4, 4,
        ]);
        let d = blocks.downsample(2).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                // index oracle: output (y, x) reads source pixel (2y + 1, 2x + 1)
                assert_eq!(d.get(y, x), blocks.get(2 * y + 1, 2 * x + 1));
            }
        }
        assert_eq!(d.labels(), &[1, 2, 3, 4]);
        assert!(blocks.downsample(3).is_err());
    }

    #[test]
    fn region_and_inner_indicators() {
        let c = LabelMask::filled(3, 3, 12, 4).unwrap();
        assert!(c.region_indicator(4).iter().all(|&b| b));
        assert!(c.region_indicator(2).iter().all(|&b| !b));
        let m = mask(3, 3, vec![0, 1, 2, 2, 1, 0, 8, 8, 6]);
        let ind = m.region_indicator(2);
        for (i, b) in ind.iter().enumerate() {
            assert_eq!(*b, m.labels()[i] == 2);
        }

        let t = tax();
        assert!(LabelMask::filled(4, 4, 12, 0).unwrap().inner_face_mask(&t).iter().all(|&b| !b));
        assert!(LabelMask::filled(4, 4, 12, id("face skin")).unwrap().inner_face_mask(&t).iter().all(|&b| b));
        let all = mask(3, 4, (0..12).collect());
        let inner = all.inner_face_mask(&t);
        let expected: Vec<bool> = (0..12u8)
            .map(|l| ["eyebrows", "eyes", "nose", "mouth", "lips", "face skin"].contains(&t.names()[l as usize].as_str()))
            .collect();
        assert_eq!(inner, expected);
        assert_eq!(inner.iter().filter(|&&b| b).count(), 6);
    }

    #[test]
    fn recompose_fixed_points() {
        let t = tax();
        let m = mask(3, 3, vec![0, 8, 0, 9, 6, 9, 7, 5, 7]);
        let (r, mm) = recompose_swap_mask(&m, &m, &t).unwrap();
        assert_eq!(r, m);
        assert!(mm.is_empty());
        let bg = LabelMask::filled(4, 4, 12, 0).unwrap();
        let (r, mm) = recompose_swap_mask(&bg, &bg, &t).unwrap();
        assert_eq!(r, bg);
        assert!(mm.is_empty());
        let other = LabelMask::filled(4, 5, 12, 0).unwrap();
        assert!(recompose_swap_mask(&bg, &other, &t).is_err());
    }

    /// Independent rule oracle: explicit stitch order, then nearest assigned
    /// non-inner pixel by brute-force Manhattan distance, ties to smaller id.
    fn recompose_oracle(d: &LabelMask, t: &LabelMask) -> (Vec<u8>, Vec<bool>) {
        let tax = tax();
        let (h, w) = (t.height(), t.width());
        let mut canvas = vec![None; h * w];
        for p in 0..h * w {
            let tl = t.labels()[p];
            let name = tax.names()[tl as usize].as_str();
            if name == "neck" || name == "background" {
                canvas[p] = Some(tl);
            }
        }
        for p in 0..h * w {
            let dl = d.labels()[p];
            if tax.is_inner(dl) {
                canvas[p] = Some(dl);
            }
        }
        for p in 0..h * w {
            let tl = t.labels()[p];
            let name = tax.names()[tl as usize].as_str();
            if ["hair", "eyeglass", "ears", "ear rings"].contains(&name) {
                canvas[p] = Some(tl);
            }
        }
        let holes: Vec<bool> = canvas.iter().map(|c| c.is_none()).collect();
        let mut out = vec![0u8; h * w];
        for p in 0..h * w {
            out[p] = match canvas[p] {
                Some(l) => l,
                None => {
                    let mut best: Option<(usize, u8)> = None;
                    for q in 0..h * w {
                        if let Some(l) = canvas[q] {
                            if tax.is_inner(l) {
                                continue;
                            }
                            let dist = (p / w).abs_diff(q / w) + (p % w).abs_diff(q % w);
                            if best.map_or(true, |b| (dist, l) < b) {
                                best = Some((dist, l));
                            }
                        }
                    }
                    best.map_or(0, |b| b.1)
                }
            };
        }
        (out, holes)
    }

    #[test]
    fn recompose_wider_target_skin_strip() {
        let (bg, skin, hair, eyes) = (0u8, id("face skin"), id("hair"), id("eyes"));
        // 6x6: target skin columns 1..=4, driven skin columns 2..=3.
        let mut t = vec![bg; 36];
        let mut d = vec![bg; 36];
        for y in 0..6 {
            for x in 1..=4 {
                t[y * 6 + x] = skin;
            }
            for x in 2..=3 {
                d[y * 6 + x] = skin;
            }
        }
        t[0] = hair;
        t[1] = hair;
        d[2 * 6 + 2] = eyes;
        let (t, d) = (mask(6, 6, t), mask(6, 6, d));
        let (r, mm) = recompose_swap_mask(&d, &t, &tax()).unwrap();
        let (expected, holes) = recompose_oracle(&d, &t);
        assert_eq!(r.labels(), expected.as_slice());
        assert_eq!(mm.bits(), holes.as_slice());
        // two 1-pixel columns (x = 1 and x = 4), minus the hair pixel at (0, 1)
        assert_eq!(mm.count(), 11);
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(mm.get(y, x), (x == 1 || x == 4) && !(y == 0 && x == 1));
            }
        }
        assert_eq!(mm.bits(), mismatch_mask(&d, &t, &tax()).unwrap().bits());
    }

    #[test]
    fn hole_without_non_inner_sources_uses_background() {
        let t = mask(2, 2, vec![6; 4]);
        let d = mask(2, 2, vec![0; 4]);
        let (r, mm) = recompose_swap_mask(&d, &t, &tax()).unwrap();
        assert_eq!(mm.count(), 4);
        assert!(r.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn mismatch_cases() {
        let t = tax();
        let m = mask(2, 2, vec![0, 6, 8, 2]);
        assert!(mismatch_mask(&m, &m, &t).unwrap().is_empty());
        let driven = mask(2, 2, vec![6, 6, 6, 6]);
        assert!(mismatch_mask(&driven, &m, &t).unwrap().is_empty());
    }

    #[test]
    fn area_ratio_cases() {
        assert_eq!(MismatchMask::empty(4, 4).area_ratio(), 0.0);
        assert_eq!(MismatchMask::new(2, 2, vec![true; 4]).unwrap().area_ratio(), 1.0);
        let mut bits = vec![false; 16];
        for b in bits.iter_mut().take(4) {
            *b = true;
        }
        assert_eq!(mismatch_area_ratio(&MismatchMask::new(4, 4, bits).unwrap()), 0.25);
    }

    fn circle_mask(n: usize, r: f64) -> LabelMask {
        let c = (n as f64 - 1.0) / 2.0;
        let labels = (0..n * n)
            .map(|p| {
                let (y, x) = ((p / n) as f64, (p % n) as f64);
                if (y - c).powi(2) + (x - c).powi(2) <= r * r { 6 } else { 0 }
            })
            .collect();
        mask(n, n, labels)
    }

    #[test]
    fn random_mismatch_contracts() {
        let t = tax();
        let m = circle_mask(32, 9.0);
        let p = MismatchParams::default();
        assert_eq!(
            random_mismatch_mask(&m, &t, 11, &p).unwrap(),
            random_mismatch_mask(&m, &t, 11, &p).unwrap()
        );
        let zero = MismatchParams { band_width: 0, ..p };
        assert!(random_mismatch_mask(&m, &t, 11, &zero).unwrap().is_empty());
        let bg = LabelMask::filled(8, 8, 12, 0).unwrap();
        assert!(matches!(random_mismatch_mask(&bg, &t, 1, &p), Err(Error::Precondition(_))));
    }

    #[test]
    fn random_mismatch_stays_within_band() {
        let t = tax();
        let m = circle_mask(32, 9.0);
        let inner = m.inner_face_mask(&t);
        let p = MismatchParams { band_width: 3, blob_count: 6, blob_radius_min: 2.0, blob_radius_max: 10.0 };
        for seed in 0..10 {
            let mm = random_mismatch_mask(&m, &t, seed, &p).unwrap();
            assert!(!mm.is_empty());
            for y in 0..32usize {
                for x in 0..32usize {
                    if !mm.get(y, x) {
                        continue;
                    }
                    // brute-force distance to the nearest pixel of opposite status
                    let me = inner[y * 32 + x];
                    let mut best = usize::MAX;
                    for yy in 0..32usize {
                        for xx in 0..32usize {
                            if inner[yy * 32 + xx] != me {
                                best = best.min(y.abs_diff(yy).max(x.abs_diff(xx)));
                            }
                        }
                    }
                    assert!(best <= 3, "pixel ({y},{x}) at distance {best}");
                }
            }
        }
    }

    fn arb_mask(n: usize) -> impl Strategy<Value = LabelMask> {
        proptest::collection::vec(0u8..12, n * n).prop_map(move |l| LabelMask::new(n, n, 12, l).unwrap())
    }

    proptest! {
        #[test]
        fn recompose_partition_and_mismatch(d in arb_mask(6), t in arb_mask(6)) {
            let tax = tax();
            let (r, mm) = recompose_swap_mask(&d, &t, &tax).unwrap();
            prop_assert!(r.labels().iter().all(|&l| l < 12));
            let direct = mismatch_mask(&d, &t, &tax).unwrap();
            prop_assert_eq!(mm.bits(), direct.bits());
            for (p, &hole) in mm.bits().iter().enumerate() {
                if hole {
                    prop_assert!(!tax.is_inner(r.labels()[p]));
                }
            }
            let (expected, _) = recompose_oracle(&d, &t);
            prop_assert_eq!(r.labels(), expected.as_slice());
        }

        #[test]
        fn self_swap_fixed_point(m in arb_mask(7)) {
            let (r, mm) = recompose_swap_mask(&m, &m, &tax()).unwrap();
            prop_assert_eq!(r, m);
            prop_assert!(mm.is_empty());
        }
    }

    #[test]
    fn mismatch_exhaustive_strip() {
        // every inner/non-inner assignment of an 8-pixel strip for both masks
        let t = tax();
        let (inner, outer) = (id("face skin"), id("hair"));
        let n = 8;
        for code in 0u32..(1 << (2 * n)) {
            let d: Vec<u8> = (0..n).map(|i| if code >> i & 1 == 1 { inner } else { outer }).collect();
            let tg: Vec<u8> = (0..n).map(|i| if code >> (n + i) & 1 == 1 { inner } else { outer }).collect();
            let mm = mismatch_mask(&mask(1, n, d.clone()), &mask(1, n, tg.clone()), &t).unwrap();
            for i in 0..n {
                assert_eq!(mm.bits()[i], d[i] != inner && tg[i] == inner);
            }
        }
    }
}
