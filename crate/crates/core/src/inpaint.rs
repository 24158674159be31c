//! Mismatch-region inpainting with decoder gains driven by the mismatch
//! area ratio.

use std::io::Write;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{InpaintConfig, RunConfig};
use crate::error::{arg_err, Error, Result};
use crate::generator::DEMOD_EPS;
use crate::imaging::FloatImage;
use crate::mask::{random_mismatch_mask, CategoryTaxonomy, LabelMask, MismatchMask, MismatchParams};
use crate::losses::{loss_l2_lpips, scalar, RandomCnnBackend};
use crate::nn::{self, Adam, Init, ParamStore};
use crate::toy::Sample;
use crate::train::{log_line, schedule_lr, AuxStep, RgiModel, BACKEND_SEED};

pub const ERASE_FILL: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    Erase,
    /// Re-render the mismatch pixels with perturbed skin codes.
    RgiEdit,
}

#[derive(Debug, Clone)]
pub struct InpaintSample {
    pub input: FloatImage,
    pub mismatch: MismatchMask,
    pub ratio: f64,
    pub truth: FloatImage,
}

/// Builds a training pair by corrupting random contour blobs.
pub fn synthesize_training_pair(
    image: &FloatImage,
    mask: &LabelMask,
    taxonomy: &CategoryTaxonomy,
    seed: u64,
    params: &MismatchParams,
    mode: PairMode,
    model: Option<&RgiModel>,
) -> Result<InpaintSample> {
    let mismatch = random_mismatch_mask(mask, taxonomy, seed, params)?;
    let input = match mode {
        PairMode::Erase => {
            let gray = FloatImage::filled(image.height(), image.width(), [ERASE_FILL; 3]);
            image.select(&gray, mismatch.bits())?
        }
        PairMode::RgiEdit => {
            let model = model.ok_or_else(|| Error::Precondition("rgi-edit pairs need an RGI model".into()))?;
            let skin = taxonomy.id_of("face skin").ok_or_else(|| Error::Taxonomy("no `face skin` category".into()))?;
            let styles = model.invert(image, mask)?;
            let (c, l, d) = styles.shape();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
            let noise: Vec<f32> = (0..c * l * d)
                .map(|i| if i / (l * d) == skin as usize { rng.random_range(-1.0f32..1.0) } else { 0.0 })
                .collect();
            let noise = Tensor::from_vec(noise, (c, l, d), &candle_core::Device::Cpu)?.to_dtype(styles.codes().dtype())?;
            let edited = styles.with_codes((styles.codes() + noise)?)?;
            let render = FloatImage::from_tensor(&model.generator.synthesize(&edited, mask)?)?;
            image.select(&render, mismatch.bits())?
        }
    };
    Ok(InpaintSample { ratio: mismatch.area_ratio(), input, mismatch, truth: image.clone() })
}

#[derive(Debug, Clone)]
pub struct Inpainter {
    cfg: InpaintConfig,
    params: ParamStore,
}

/// One decoder step: `a1 * Mod(x_in, style(x_skip)) + a2 * x_skip`, where
/// the style is the channel mean of `x_skip` through an affine map and
/// Mod is a demodulated 3x3 conv with bias and activation.
pub fn modulated_decode_layer(params: &ParamStore, prefix: &str, x_in: &Tensor, x_skip: &Tensor, a1: &Tensor, a2: &Tensor) -> Result<Tensor> {
    let cout = x_skip.dim(0)?;
    let w = params.get(&format!("{prefix}.weight"))?;
    let cin = w.dim(1)?;
    let pooled = x_skip.mean_keepdim(2)?.mean_keepdim(1)?.reshape((1, cout))?;
    let scales = nn::linear(&pooled, params.get(&format!("{prefix}.affine.weight"))?, Some(params.get(&format!("{prefix}.affine.bias"))?))?;
    let wsq = (w.sqr()?.sum((2, 3))? * nn::he_scale(cin * 9).powi(2))?;
    let demod = (scales.sqr()?.matmul(&wsq.t()?)? + DEMOD_EPS)?.sqrt()?.recip()?;
    let y = nn::conv3x3(x_in, w, Some(&scales.t()?), Some(&demod.t()?))?;
    let y = nn::lrelu_gain(&nn::add_bias(&y, params.get(&format!("{prefix}.bias"))?)?)?;
    Ok((y.broadcast_mul(a1)? + x_skip.broadcast_mul(a2)?)?)
}

impl Inpainter {
    pub fn num_decoder_layers(&self) -> usize {
        self.cfg.levels - 1
    }

    pub fn init(cfg: &InpaintConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        if cfg.levels < 2 {
            return arg_err("inpainting needs at least two levels");
        }
        let mut params = ParamStore::new(dtype);
        let mut init = Init::new(&mut params, seed);
        init.conv("enc0", cfg.channels_at(0), 4, 3, 0.0)?;
        for i in 1..cfg.levels {
            init.conv(&format!("enc{i}"), cfg.channels_at(i), cfg.channels_at(i - 1), 3, 0.0)?;
        }
        for i in 0..cfg.levels - 1 {
            let (cin, cout) = (cfg.channels_at(i + 1), cfg.channels_at(i));
            init.conv(&format!("dec{i}"), cout, cin, 3, 0.0)?;
            init.linear(&format!("dec{i}.affine"), cin, cout, 1.0)?;
        }
        init.conv("out", 3, cfg.channels_at(0), 1, 0.0)?;
        init.linear("ratio.fc0", cfg.ratio_hidden, 1, 0.0)?;
        init.constant("ratio.fc1.weight", &[2 * (cfg.levels - 1), cfg.ratio_hidden], 0.0)?;
        init.constant("ratio.fc1.bias", &[2 * (cfg.levels - 1)], 1.0)?;
        Ok(Self { cfg: cfg.clone(), params })
    }

    pub fn from_params(cfg: &InpaintConfig, params: ParamStore) -> Result<Self> {
        let mut me = Self::init(cfg, 0, params.dtype())?;
        for name in me.params.names() {
            if me.params.get(name)?.dims() != params.get(name)?.dims() {
                return arg_err(format!("inpaint parameter `{name}` has the wrong shape"));
            }
        }
        me.params = params;
        Ok(me)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn config(&self) -> &InpaintConfig {
        &self.cfg
    }

    /// Per-decoder-layer (a1, a2) as an (n_dec, 2) tensor.
    pub fn ratio_gains(&self, ratio: f64) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&ratio) {
            return arg_err(format!("mismatch ratio {ratio} outside [0, 1]"));
        }
        let s = Tensor::full(ratio, (1, 1), &candle_core::Device::Cpu)?.to_dtype(self.params.dtype())?;
        let p = &self.params;
        let h = nn::lrelu(&nn::linear(&s, p.get("ratio.fc0.weight")?, Some(p.get("ratio.fc0.bias")?))?, 0.2)?;
        let w = p.get("ratio.fc1.weight")?;
        let g = h.matmul(&w.t()?)?.broadcast_add(p.get("ratio.fc1.bias")?)?;
        Ok(g.reshape((self.num_decoder_layers(), 2))?)
    }

    fn conv(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let y = nn::conv3x3(x, self.params.get(&format!("{name}.weight"))?, None, None)?;
        nn::lrelu(&nn::add_bias(&y, self.params.get(&format!("{name}.bias"))?)?, 0.2)
    }

    /// Unmasked network prediction in [0, 1].
    pub fn raw_forward(&self, image: &Tensor, mismatch: &MismatchMask, gains: &Tensor) -> Result<Tensor> {
        let (_, h, w) = image.dims3()?;
        let dtype = self.params.dtype();
        let m: Vec<f32> = mismatch.bits().iter().map(|&b| b as u8 as f32).collect();
        let m = Tensor::from_vec(m, (1, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        let x = Tensor::cat(&[((image * 2.0)? - 1.0)?, m], 0)?;
        let mut skips = vec![self.conv("enc0", &x)?];
        for i in 1..self.cfg.levels {
            let prev = nn::avg_pool(skips.last().expect("non-empty"), 2)?;
            skips.push(self.conv(&format!("enc{i}"), &prev)?);
        }
        let mut y = skips[self.cfg.levels - 1].clone();
        for i in (0..self.cfg.levels - 1).rev() {
            let g = gains.get(i)?;
            let (a1, a2) = (g.get(0)?, g.get(1)?);
            y = modulated_decode_layer(&self.params, &format!("dec{i}"), &nn::upsample2x(&y)?, &skips[i], &a1, &a2)?;
        }
        let delta = nn::add_bias(&nn::conv1x1(&y, self.params.get("out.weight")?, None)?, self.params.get("out.bias")?)?;
        Ok((image + delta)?.clamp(0.0, 1.0)?)
    }

    /// Inpainted image: network output inside the mismatch, input elsewhere.
    pub fn forward(&self, image: &Tensor, mismatch: &MismatchMask) -> Result<Tensor> {
        let (_, h, w) = image.dims3()?;
        let r = self.cfg.resolution;
        if (h, w) != (r, r) || mismatch.height() != h || mismatch.width() != w {
            return arg_err(format!("inpainting expects {r}x{r} image and mismatch mask"));
        }
        let image = image.to_dtype(self.params.dtype())?;
        let gains = self.ratio_gains(mismatch.area_ratio())?;
        let raw = self.raw_forward(&image, mismatch, &gains)?;
        let sel: Vec<u8> = mismatch.bits().iter().map(|&b| b as u8).collect();
        let sel = Tensor::from_vec(sel, (1, h, w), &candle_core::Device::Cpu)?.broadcast_as((3, h, w))?;
        Ok(sel.where_cond(&raw, &image)?)
    }

    pub fn inpaint(&self, image: &FloatImage, mismatch: &MismatchMask) -> Result<FloatImage> {
        FloatImage::from_tensor(&self.forward(&image.to_tensor(self.params.dtype())?, mismatch)?)
    }
}

pub struct InpaintTraining {
    pub model: Inpainter,
    pub steps: Vec<AuxStep>,
}

/// Trains the inpainter on freshly corrupted copies of the dataset faces;
/// the loss is taken on the composited output.
pub fn train_inpaint(
    data: &[Sample],
    run: &RunConfig,
    taxonomy: &CategoryTaxonomy,
    mode: PairMode,
    rgi: Option<&RgiModel>,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<InpaintTraining> {
    if data.is_empty() {
        return arg_err("training dataset is empty");
    }
    let sched = &run.inpaint_schedule;
    sched.validate()?;
    let dtype = DType::F32;
    let model = Inpainter::init(&run.inpaint, seed, dtype)?;
    let backend = RandomCnnBackend::new(BACKEND_SEED ^ 0x1111)?;
    let scales = run.lpips_scales_for(run.inpaint.resolution);
    let mut opt = Adam::new(model.params.all_vars(), sched.lr, sched.betas)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let mut steps = Vec::with_capacity(sched.iterations);
    for t in 1..=sched.iterations {
        let lr = schedule_lr(&mut opt, sched, t);
        let mut total = Tensor::zeros((), dtype, &candle_core::Device::Cpu)?;
        let (mut l2_sum, mut lp_sum) = (0.0, 0.0);
        for _ in 0..sched.batch_size {
            let s = &data[rng.random_range(0..data.len())];
            let pair = synthesize_training_pair(&s.image, &s.mask, taxonomy, rng.random(), &run.mismatch, mode, rgi)?;
            let out = model.forward(&pair.input.to_tensor(dtype)?, &pair.mismatch)?;
            let w = &run.weights;
            let (loss, l2, lp) = loss_l2_lpips(&out, &pair.truth.to_tensor(dtype)?, w.inpaint_l2, w.inpaint_lpips, &backend, &scales)?;
            total = (total + loss)?;
            l2_sum += l2;
            lp_sum += lp;
        }
        let inv = 1.0 / sched.batch_size as f64;
        let total = (total * inv)?;
        let record = AuxStep { step: t, lr, loss: scalar(&total)?, l2: l2_sum * inv, lpips: lp_sum * inv };
        opt.backward_step(&total)?;
        log_line(&mut log, &record)?;
        steps.push(record);
    }
    Ok(InpaintTraining { model, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn cfg() -> InpaintConfig {
        InpaintConfig { resolution: 16, channels: 4, max_channels: 8, levels: 3, ratio_hidden: 8 }
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn init_gains_are_one_and_deterministic() {
        let net = Inpainter::init(&cfg(), 1, DType::F64).unwrap();
        for s in [0.0, 0.3, 1.0] {
            assert!(vals(&net.ratio_gains(s).unwrap()).iter().all(|&g| g == 1.0));
        }
        assert!(net.ratio_gains(1.5).is_err());
        net.params().set("ratio.fc1.weight", &Tensor::randn(0f64, 1.0, (4, 8), &Device::Cpu).unwrap()).unwrap();
        net.params().set("ratio.fc0.bias", &Tensor::randn(0f64, 1.0, 8, &Device::Cpu).unwrap()).unwrap();
        let (g0, g1) = (vals(&net.ratio_gains(0.0).unwrap()), vals(&net.ratio_gains(1.0).unwrap()));
        assert_ne!(g0, g1);
        assert_eq!(g0, vals(&net.ratio_gains(0.0).unwrap()));
        let near = vals(&net.ratio_gains(1e-6).unwrap());
        assert!(g0.iter().zip(&near).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn gain_collapse_and_hand_arithmetic() {
        let mut params = ParamStore::new(DType::F64);
        let mut init = Init::new(&mut params, 0);
        init.constant("d.weight", &[1, 1, 3, 3], 0.0).unwrap();
        init.constant("d.bias", &[1], 0.25).unwrap();
        init.constant("d.affine.weight", &[1, 1], 1.0).unwrap();
        init.constant("d.affine.bias", &[1], 0.0).unwrap();
        params.set("d.weight", &Tensor::new(&[[[[0.0f64, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 0.0]]]], &Device::Cpu).unwrap()).unwrap();
        let x_in = Tensor::new(&[[[2.0f64]]], &Device::Cpu).unwrap();
        let x_skip = Tensor::new(&[[[0.5f64]]], &Device::Cpu).unwrap();
        let one = Tensor::new(1.0f64, &Device::Cpu).unwrap();
        let zero = Tensor::new(0.0f64, &Device::Cpu).unwrap();
        let only_skip = modulated_decode_layer(&params, "d", &x_in, &x_skip, &zero, &one).unwrap();
        assert_eq!(vals(&only_skip), vec![0.5]);
        // Style 0.5 and a unit centre tap: demodulation gives 1/sqrt(0.25 + eps).
        let i = modulated_decode_layer(&params, "d", &x_in, &x_skip, &one, &zero).unwrap();
        let expected = std::f64::consts::SQRT_2 * (2.0 / (1.0 + 4.0 * DEMOD_EPS).sqrt() + 0.25);
        assert!((vals(&i)[0] - expected).abs() < 1e-6, "{:?}", vals(&i));
        let mixed = modulated_decode_layer(
            &params,
            "d",
            &x_in,
            &x_skip,
            &Tensor::new(0.3f64, &Device::Cpu).unwrap(),
            &Tensor::new(2.0f64, &Device::Cpu).unwrap(),
        )
        .unwrap();
        assert!((vals(&mixed)[0] - (0.3 * vals(&i)[0] + 2.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn copy_rule_outside_mismatch() {
        let net = Inpainter::init(&cfg(), 2, DType::F32).unwrap();
        net.params().set("out.weight", &Tensor::randn(0f32, 1.0, (3, 4, 1, 1), &Device::Cpu).unwrap()).unwrap();
        let img = Tensor::rand(0f32, 1.0, (3, 16, 16), &Device::Cpu).unwrap();
        let empty = MismatchMask::empty(16, 16);
        assert_eq!(vals(&net.forward(&img, &empty).unwrap()), vals(&img));
        let half = MismatchMask::new(16, 16, (0..256).map(|p| p % 16 < 8).collect()).unwrap();
        let out = vals(&net.forward(&img, &half).unwrap());
        let raw = vals(&net.raw_forward(&img, &half, &net.ratio_gains(0.5).unwrap()).unwrap());
        let src = vals(&img);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(*v, if i % 16 < 8 { raw[i] } else { src[i] });
        }
        let all = MismatchMask::new(16, 16, vec![true; 256]).unwrap();
        let raw_all = vals(&net.raw_forward(&img, &all, &net.ratio_gains(1.0).unwrap()).unwrap());
        assert_eq!(vals(&net.forward(&img, &all).unwrap()), raw_all);
    }
}
