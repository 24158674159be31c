//! Reference-guided recoloring of the naive swap.
//!
//! A shared feature pyramid embeds the grayscale query and the colour
//! reference at a quarter of the input resolution. For each inner facial
//! region, query pixels attend to reference pixels of the same region and
//! pick up a softmax-weighted reference colour. The resulting guidance map,
//! both images and both label masks feed a U-Net that predicts a colour
//! residual on top of the grayscale query.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::io::Write;

use crate::config::{RecolorConfig, RunConfig};
use crate::error::{arg_err, Result};
use crate::imaging::FloatImage;
use crate::mask::{CategoryId, CategoryTaxonomy, LabelMask};
use crate::losses::{loss_l2_lpips, RandomCnnBackend};
use crate::nn::{self, Adam, Init, ParamStore};
use crate::toy::Sample;
use crate::train::{log_line, schedule_lr, AuxStep, BACKEND_SEED};

pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Luma replicated into all three channels.
pub fn to_grayscale(image: &FloatImage) -> FloatImage {
    let n = image.height() * image.width();
    let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
    let y: Vec<f32> = (0..n).map(|i| LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i]).collect();
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..3 {
        data.extend_from_slice(&y);
    }
    FloatImage::new(image.height(), image.width(), data).expect("same size")
}

/// Ranges of the random colour augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Additive brightness offset drawn from [-b, b].
    pub brightness: f64,
    /// Contrast factor drawn from [1 - c, 1 + c].
    pub contrast: f64,
    pub flip_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { brightness: 0.2, contrast: 0.2, flip_prob: 0.5 }
    }
}

/// One self-supervised training example.
#[derive(Debug, Clone)]
pub struct RecolorPair {
    pub query_gray: FloatImage,
    pub query_mask: LabelMask,
    pub reference: FloatImage,
    pub ref_mask: LabelMask,
    pub flipped: bool,
}

/// Grayscale + jittered query and a possibly mirrored colour reference.
pub fn augment_pair(image: &FloatImage, mask: &LabelMask, seed: u64, p: &AugmentParams) -> RecolorPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = if p.brightness > 0.0 { rng.random_range(-p.brightness..=p.brightness) } else { 0.0 };
    let c = if p.contrast > 0.0 { rng.random_range(1.0 - p.contrast..=1.0 + p.contrast) } else { 1.0 };
    let flipped = p.flip_prob > 0.0 && rng.random_bool(p.flip_prob);
    let mut gray = to_grayscale(image);
    if b != 0.0 || c != 1.0 {
        for v in gray.data_mut() {
            *v = (((*v as f64 - 0.5) * c + 0.5 + b).clamp(0.0, 1.0)) as f32;
        }
    }
    let (reference, ref_mask) = if flipped {
        (image.flip_horizontal(), mask.flip_horizontal())
    } else {
        (image.clone(), mask.clone())
    };
    RecolorPair { query_gray: gray, query_mask: mask.clone(), reference, ref_mask, flipped }
}

/// Attention of `fq` (Nq, C) over `fr` (Nr, C): row-softmax of the
/// correlation, applied to reference colours (Nr, 3). Returns
/// (guidance (Nq, 3), attention (Nq, Nr)).
pub fn region_attention_guidance(fq: &Tensor, fr: &Tensor, colors: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = fq.matmul(&fr.t()?)?;
    let a = nn::softmax_last_dim(&s)?;
    Ok((a.matmul(colors)?, a))
}

/// Full guidance map at feature resolution.
#[derive(Debug, Clone)]
pub struct Guidance {
    /// (3, h, w); zero outside the attended regions.
    pub map: Tensor,
    /// Regions that were present in only one of the two masks.
    pub skipped: Vec<CategoryId>,
}

fn pixel_index(ids: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, ids.len(), &Device::Cpu)?)
}

/// Per-region attention over `regions`, scattered into one map. Feature
/// maps are (C, h, w); masks and reference colours are at (h, w).
pub fn compute_guidance(
    fq: &Tensor,
    fr: &Tensor,
    query_mask: &LabelMask,
    ref_mask: &LabelMask,
    ref_colors: &Tensor,
    regions: &[CategoryId],
) -> Result<Guidance> {
    let (c, h, w) = fq.dims3()?;
    if fr.dims3()? != (c, h, w) || query_mask.height() != h || ref_mask.height() != h || ref_colors.dims3()? != (3, h, w) {
        return arg_err("guidance inputs must share the feature resolution");
    }
    let n = h * w;
    let fq_rows = fq.reshape((c, n))?.t()?.contiguous()?;
    let fr_rows = fr.reshape((c, n))?.t()?.contiguous()?;
    let col_rows = ref_colors.reshape((3, n))?.t()?.contiguous()?;
    let mut blocks = vec![Tensor::zeros((1, 3), fq.dtype(), &Device::Cpu)?];
    let mut slot = vec![0u32; n];
    let mut next = 1u32;
    let mut skipped = Vec::new();
    for &r in regions {
        let q: Vec<usize> = (0..n).filter(|&p| query_mask.labels()[p] == r).collect();
        let rf: Vec<usize> = (0..n).filter(|&p| ref_mask.labels()[p] == r).collect();
        if q.is_empty() || rf.is_empty() {
            if q.is_empty() != rf.is_empty() {
                skipped.push(r);
            }
            continue;
        }
        let (qi, ri) = (pixel_index(&q)?, pixel_index(&rf)?);
        let (g, _) = region_attention_guidance(
            &fq_rows.index_select(&qi, 0)?,
            &fr_rows.index_select(&ri, 0)?,
            &col_rows.index_select(&ri, 0)?,
        )?;
        for &p in &q {
            slot[p] = next;
            next += 1;
        }
        blocks.push(g);
    }
    let stacked = Tensor::cat(&blocks, 0)?;
    let map = stacked.index_select(&Tensor::from_vec(slot, n, &Device::Cpu)?, 0)?.t()?.reshape((3, h, w))?;
    Ok(Guidance { map, skipped })
}

#[derive(Debug, Clone)]
pub struct Recolorer {
    cfg: RecolorConfig,
    params: ParamStore,
    regions: Vec<CategoryId>,
}

impl Recolorer {
    fn unet_width(&self, level: usize) -> usize {
        self.cfg.unet_channels << level.min(2)
    }

    pub fn init(cfg: &RecolorConfig, taxonomy: &CategoryTaxonomy, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        if taxonomy.num_categories() != cfg.num_categories {
            return arg_err("recolor config and taxonomy disagree on category count");
        }
        let mut params = ParamStore::new(dtype);
        let mut init = Init::new(&mut params, seed);
        let f = cfg.fpn_channels;
        init.conv("fpn.stem", f, 3, 3, 0.0)?;
        init.conv("fpn.d1", f, f, 3, 0.0)?;
        init.conv("fpn.d2", 2 * f, f, 3, 0.0)?;
        init.conv("fpn.d3", 2 * f, 2 * f, 3, 0.0)?;
        init.linear("fpn.lat2", f, 2 * f, 0.0)?;
        init.linear("fpn.lat3", f, 2 * f, 0.0)?;
        init.conv("fpn.out", cfg.feature_dim, f, 3, 0.0)?;
        let mut me = Self { cfg: cfg.clone(), params: ParamStore::new(dtype), regions: taxonomy.inner_ids() };
        let cin = 9 + 2 * cfg.num_categories;
        init.conv("unet.e0", me.unet_width(0), cin, 3, 0.0)?;
        for i in 1..=4 {
            init.conv(&format!("unet.e{i}"), me.unet_width(i), me.unet_width(i - 1), 3, 0.0)?;
        }
        for i in (0..4).rev() {
            init.conv(&format!("unet.u{i}"), me.unet_width(i), me.unet_width(i + 1) + me.unet_width(i), 3, 0.0)?;
        }
        init.constant("unet.out.weight", &[3, me.unet_width(0)], 0.0)?;
        init.constant("unet.out.bias", &[3], 0.0)?;
        me.params = params;
        Ok(me)
    }

    pub fn from_params(cfg: &RecolorConfig, taxonomy: &CategoryTaxonomy, params: ParamStore) -> Result<Self> {
        let mut r = Self::init(cfg, taxonomy, 0, params.dtype())?;
        for name in r.params.names() {
            if r.params.get(name)?.dims() != params.get(name)?.dims() {
                return arg_err(format!("recolor parameter `{name}` has the wrong shape"));
            }
        }
        r.params = params;
        Ok(r)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn config(&self) -> &RecolorConfig {
        &self.cfg
    }

    fn conv(&self, name: &str, x: &Tensor, act: bool) -> Result<Tensor> {
        let y = nn::conv3x3(x, self.params.get(&format!("{name}.weight"))?, None, None)?;
        let y = nn::add_bias(&y, self.params.get(&format!("{name}.bias"))?)?;
        if act {
            nn::lrelu(&y, 0.2)
        } else {
            Ok(y)
        }
    }

    fn lateral(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let y = nn::conv1x1(x, self.params.get(&format!("{name}.weight"))?, None)?;
        nn::add_bias(&y, self.params.get(&format!("{name}.bias"))?)
    }

    /// Features at a quarter of the input resolution, (feature_dim, H/4, W/4).
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let x = ((image * 2.0)? - 1.0)?;
        let s = self.conv("fpn.stem", &x, true)?;
        let d1 = self.conv("fpn.d1", &nn::avg_pool(&s, 2)?, true)?;
        let d2 = self.conv("fpn.d2", &nn::avg_pool(&d1, 2)?, true)?;
        let d3 = self.conv("fpn.d3", &nn::avg_pool(&d2, 2)?, true)?;
        let p2 = (self.lateral("fpn.lat2", &d2)? + nn::upsample2x(&self.lateral("fpn.lat3", &d3)?)?)?;
        self.conv("fpn.out", &p2, false)
    }

    fn check(&self, t: &Tensor, m: &LabelMask, what: &str) -> Result<()> {
        let r = self.cfg.resolution;
        if t.dims() != [3, r, r] || m.height() != r || m.width() != r {
            return arg_err(format!("{what} must be {r}x{r}"));
        }
        Ok(())
    }

    /// Guidance at feature resolution for a grayscale query and colour reference.
    pub fn guidance(&self, query_gray: &Tensor, query_mask: &LabelMask, reference: &Tensor, ref_mask: &LabelMask) -> Result<Guidance> {
        let fq = self.features(query_gray)?;
        let fr = self.features(reference)?;
        let q = self.cfg.resolution / 4;
        compute_guidance(
            &fq,
            &fr,
            &query_mask.downsample(q)?,
            &ref_mask.downsample(q)?,
            &nn::downsize(reference, q)?,
            &self.regions,
        )
    }

    /// Recolored (3, H, W) image in [0, 1].
    pub fn forward(&self, query_gray: &Tensor, query_mask: &LabelMask, reference: &Tensor, ref_mask: &LabelMask) -> Result<Tensor> {
        self.check(query_gray, query_mask, "query")?;
        self.check(reference, ref_mask, "reference")?;
        let r = self.cfg.resolution;
        let dtype = self.params.dtype();
        let (query_gray, reference) = (query_gray.to_dtype(dtype)?, reference.to_dtype(dtype)?);
        let g = self.guidance(&query_gray, query_mask, &reference, ref_mask)?;
        let pi = nn::resize_bilinear(&g.map, r, r)?;
        let c = self.cfg.num_categories;
        let x = Tensor::cat(
            &[
                query_gray.clone(),
                reference,
                pi,
                nn::one_hot(query_mask.labels(), r, r, c, dtype)?,
                nn::one_hot(ref_mask.labels(), r, r, c, dtype)?,
            ],
            0,
        )?;
        let mut skips = vec![self.conv("unet.e0", &x, true)?];
        for i in 1..=4 {
            let prev = nn::avg_pool(skips.last().expect("non-empty"), 2)?;
            skips.push(self.conv(&format!("unet.e{i}"), &prev, true)?);
        }
        let mut y = skips[4].clone();
        for i in (0..4).rev() {
            y = self.conv(&format!("unet.u{i}"), &Tensor::cat(&[nn::upsample2x(&y)?, skips[i].clone()], 0)?, true)?;
        }
        let delta = nn::add_bias(&nn::conv1x1(&y, self.params.get("unet.out.weight")?, None)?, self.params.get("unet.out.bias")?)?;
        Ok((query_gray + delta)?.clamp(0.0, 1.0)?)
    }

    pub fn recolor(&self, query_gray: &FloatImage, query_mask: &LabelMask, reference: &FloatImage, ref_mask: &LabelMask) -> Result<FloatImage> {
        let dtype = self.params.dtype();
        FloatImage::from_tensor(&self.forward(&query_gray.to_tensor(dtype)?, query_mask, &reference.to_tensor(dtype)?, ref_mask)?)
    }
}

pub struct RecolorTraining {
    pub model: Recolorer,
    pub steps: Vec<AuxStep>,
}

/// Self-supervised training: each step recolors an augmented grayscale copy
/// of a face from its (possibly mirrored) colour original.
pub fn train_recolor(
    data: &[Sample],
    run: &RunConfig,
    taxonomy: &CategoryTaxonomy,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<RecolorTraining> {
    if data.is_empty() {
        return arg_err("training dataset is empty");
    }
    let sched = &run.recolor_schedule;
    sched.validate()?;
    let dtype = DType::F32;
    let model = Recolorer::init(&run.recolor, taxonomy, seed, dtype)?;
    let r = run.recolor.resolution;
    if data.iter().any(|s| s.image.height() != r || s.image.width() != r) {
        return arg_err(format!("recolor samples must be {r}x{r}"));
    }
    let backend = RandomCnnBackend::new(BACKEND_SEED ^ 0x1111)?;
    let scales = run.lpips_scales_for(r);
    let aug = AugmentParams { flip_prob: sched.flip_prob, ..AugmentParams::default() };
    let mut opt = Adam::new(model.params.all_vars(), sched.lr, sched.betas)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let mut steps = Vec::with_capacity(sched.iterations);
    for t in 1..=sched.iterations {
        let lr = schedule_lr(&mut opt, sched, t);
        let mut total = Tensor::zeros((), dtype, &Device::Cpu)?;
        let (mut l2_sum, mut lp_sum) = (0.0, 0.0);
        for _ in 0..sched.batch_size {
            let s = &data[rng.random_range(0..data.len())];
            let pair = augment_pair(&s.image, &s.mask, rng.random(), &aug);
            let out = model.forward(&pair.query_gray.to_tensor(dtype)?, &pair.query_mask, &pair.reference.to_tensor(dtype)?, &pair.ref_mask)?;
            let w = &run.weights;
            let (loss, l2, lp) = loss_l2_lpips(&out, &s.image.to_tensor(dtype)?, w.recolor_l2, w.recolor_lpips, &backend, &scales)?;
            total = (total + loss)?;
            l2_sum += l2;
            lp_sum += lp;
        }
        let inv = 1.0 / sched.batch_size as f64;
        let total = (total * inv)?;
        let record = AuxStep { step: t, lr, loss: crate::losses::scalar(&total)?, l2: l2_sum * inv, lpips: lp_sum * inv };
        opt.backward_step(&total)?;
        log_line(&mut log, &record)?;
        steps.push(record);
    }
    Ok(RecolorTraining { model, steps })
}

/// Unnormalised Sobel gradient magnitude of the luma, replicate padded.
pub fn sobel_magnitude(image: &FloatImage) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let y = crate::metrics::grayscale(image);
    let at = |r: isize, c: isize| y[r.clamp(0, h as isize - 1) as usize * w + c.clamp(0, w as isize - 1) as usize];
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1)) - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
            let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1)) - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
            out[r as usize * w + c as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Low-gradient pixels of `naive`, where the recolored image is used.
pub fn lowpass_mask(naive: &FloatImage, threshold: f64) -> Vec<bool> {
    sobel_magnitude(naive).into_iter().map(|g| g < threshold).collect()
}

/// Recolored pixels on the low-pass mask, naive pixels elsewhere.
pub fn lowpass_paste(recolored: &FloatImage, naive: &FloatImage, threshold: f64) -> Result<FloatImage> {
    if !recolored.same_shape(naive) {
        return arg_err("lowpass_paste operands differ in size");
    }
    naive.select(recolored, &lowpass_mask(naive, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luma_hand_values() {
        let red = FloatImage::filled(1, 1, [1.0, 0.0, 0.0]);
        assert!(to_grayscale(&red).data().iter().all(|&v| (v - 0.299).abs() < 1e-7));
        let white = FloatImage::filled(2, 2, [1.0; 3]);
        assert!(to_grayscale(&white).data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn sobel_step_band() {
        let mut img = FloatImage::filled(6, 8, [0.0; 3]);
        for y in 0..6 {
            for x in 4..8 {
                img.set_pixel(y, x, [1.0; 3]);
            }
        }
        let m = lowpass_mask(&img, 0.05);
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(m[y * 8 + x], !(x == 3 || x == 4));
            }
        }
        let flat = FloatImage::filled(4, 4, [0.3; 3]);
        let other = FloatImage::filled(4, 4, [0.9; 3]);
        assert_eq!(lowpass_paste(&other, &flat, 0.05).unwrap(), other);
        assert_eq!(lowpass_paste(&other, &flat, 0.0).unwrap(), flat);
    }
}
