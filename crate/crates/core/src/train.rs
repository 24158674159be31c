//! Training loops and code optimisation.

use std::io::Write;

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{RunConfig, TrainSchedule};
use crate::discriminator::Discriminator;
use crate::encoder::{Encoder, RegionalStyles};
use crate::error::{arg_err, Result};
use crate::generator::{Generator, NoisePolicy};
use crate::imaging::FloatImage;
use crate::losses::{self, AdvSide, LossTerms, Perceptual, RgiWeights};
use crate::mask::LabelMask;
use crate::nn::{self, Adam};
use crate::toy::Sample;

/// Seed of the frozen feature extractors used by every loss.
pub const BACKEND_SEED: u64 = 0x5eed;

/// Encoder and generator trained together on reconstruction.
#[derive(Debug, Clone)]
pub struct RgiModel {
    pub encoder: Encoder,
    pub generator: Generator,
}

impl RgiModel {
    pub fn init(cfg: &crate::config::ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        Ok(Self { encoder: Encoder::init(cfg, seed, dtype)?, generator: Generator::init(cfg, seed.wrapping_add(1), dtype)? })
    }

    pub fn dtype(&self) -> DType {
        self.generator.params().dtype()
    }

    pub fn invert(&self, image: &FloatImage, mask: &LabelMask) -> Result<RegionalStyles> {
        self.encoder.encode_styles(&image.to_tensor(self.dtype())?, mask)
    }

    pub fn reconstruct(&self, image: &FloatImage, mask: &LabelMask) -> Result<FloatImage> {
        let styles = self.invert(image, mask)?;
        FloatImage::from_tensor(&self.generator.synthesize(&styles, mask)?)
    }
}

pub fn log_line<T: Serialize>(log: &mut Option<&mut dyn Write>, record: &T) -> Result<()> {
    if let Some(w) = log.as_mut() {
        serde_json::to_writer(&mut **w, record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct RgiStep {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub terms: LossTerms,
    pub d_updated: bool,
    pub d_loss: Option<f64>,
    pub d_checksum: f64,
}

pub struct RgiTraining {
    pub model: RgiModel,
    pub discriminator: Discriminator,
    pub steps: Vec<RgiStep>,
}

/// Prepared tensors for one sample and its mirror image.
struct Prepared {
    image: [Tensor; 2],
    mask: [LabelMask; 2],
}

fn prepare(data: &[Sample], size: usize, dtype: DType) -> Result<Vec<Prepared>> {
    data.iter()
        .map(|s| {
            if s.mask.height() != size || s.image.height() != size || s.image.width() != size {
                return arg_err(format!("training samples must be {size}x{size}"));
            }
            let t = s.image.to_tensor(dtype)?;
            Ok(Prepared { image: [t.clone(), nn::flip_horizontal(&t)?], mask: [s.mask.clone(), s.mask.flip_horizontal()] })
        })
        .collect()
}

fn draw(rng: &mut ChaCha8Rng, n: usize, flip_prob: f64) -> (usize, usize) {
    let i = rng.random_range(0..n);
    let f = rng.random_bool(flip_prob) as usize;
    (i, f)
}

/// Reconstruction-proxy training of encoder and generator with a
/// periodically updated discriminator. With `pretrained`, the generator
/// starts from it and only its mask-guided layers are optimised.
pub fn train_rgi(
    data: &[Sample],
    run: &RunConfig,
    pretrained: Option<&Generator>,
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<RgiTraining> {
    if data.is_empty() {
        return arg_err("training dataset is empty");
    }
    let cfg = &run.model;
    let sched = &run.rgi_schedule;
    cfg.validate()?;
    sched.validate()?;
    let dtype = DType::F32;
    let mut model = RgiModel::init(cfg, seed, dtype)?;
    if let Some(g) = pretrained {
        model.generator = Generator::from_params(cfg, g.params().deep_clone(dtype)?)?;
    }
    let disc = Discriminator::init(cfg, seed.wrapping_add(2), dtype)?;
    let samples = prepare(data, cfg.image_size, dtype)?;
    let backends = Perceptual::seeded(BACKEND_SEED)?;
    let weights = RgiWeights::from(&run.weights);
    let scales = run.lpips_scales_for(cfg.image_size);

    let mut g_vars = model.encoder.params().all_vars();
    let gen = &model.generator;
    g_vars.extend(gen.params().vars_where(|n| pretrained.is_none() || gen.masked_layer_param(n)));
    let mut g_opt = Adam::new(g_vars, sched.lr, sched.betas)?;
    let mut d_opt = Adam::new(disc.params().all_vars(), sched.lr, sched.betas)?;
    model.generator.set_noise(NoisePolicy::Fresh { seed: seed.wrapping_add(4) })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3));
    let use_adv = weights.adv > 0.0;
    let mut steps = Vec::with_capacity(sched.iterations);

    for t in 1..=sched.iterations {
        let lr = sched.lr_at(t);
        g_opt.set_lr(lr);
        d_opt.set_lr(lr);
        let mut batch = Vec::with_capacity(sched.batch_size);
        let mut total = Tensor::zeros((), dtype, &candle_core::Device::Cpu)?;
        let mut terms_acc: Option<LossTerms> = None;
        for _ in 0..sched.batch_size {
            let (i, f) = draw(&mut rng, samples.len(), sched.flip_prob);
            let (img, mask) = (&samples[i].image[f], &samples[i].mask[f]);
            let styles = model.encoder.encode_styles(img, mask)?;
            let recon = model.generator.synthesize(&styles, mask)?;
            let fake_logit = if use_adv { Some(disc.forward(&recon)?) } else { None };
            let (loss, terms) = losses::loss_rgi_total(&recon, img, &weights, &backends, &scales, fake_logit.as_ref())?;
            total = (total + loss)?;
            terms_acc = Some(match terms_acc {
                None => terms,
                Some(a) => add_terms(&a, &terms),
            });
            batch.push((img.clone(), recon));
        }
        let inv = 1.0 / sched.batch_size as f64;
        g_opt.backward_step(&(total * inv)?)?;

        let d_updated = use_adv && t % sched.d_period == 0;
        let mut d_loss = None;
        if d_updated {
            let mut dl = Tensor::zeros((), dtype, &candle_core::Device::Cpu)?;
            for (real, fake) in &batch {
                let l = losses::loss_adversarial(Some(&disc.forward(real)?), &disc.forward(&fake.detach())?, AdvSide::Discriminator)?;
                dl = (dl + l)?;
            }
            let dl = (dl * inv)?;
            d_loss = Some(losses::scalar(&dl)?);
            d_opt.backward_step(&dl)?;
        }
        let record = RgiStep {
            step: t,
            lr,
            terms: scale_terms(&terms_acc.expect("batch_size >= 1"), inv),
            d_updated,
            d_loss,
            d_checksum: disc.checksum()?,
        };
        log_line(&mut log, &record)?;
        steps.push(record);
    }
    model.generator.set_noise(NoisePolicy::Zero)?;
    Ok(RgiTraining { model, discriminator: disc, steps })
}

fn add_terms(a: &LossTerms, b: &LossTerms) -> LossTerms {
    LossTerms {
        mse: a.mse + b.mse,
        lpips: a.lpips + b.lpips,
        id: a.id + b.id,
        parsing: a.parsing + b.parsing,
        adv: a.adv.zip(b.adv).map(|(x, y)| x + y),
        recon: a.recon + b.recon,
        total: a.total + b.total,
    }
}

fn scale_terms(a: &LossTerms, s: f64) -> LossTerms {
    LossTerms {
        mse: a.mse * s,
        lpips: a.lpips * s,
        id: a.id * s,
        parsing: a.parsing * s,
        adv: a.adv.map(|x| x * s),
        recon: a.recon * s,
        total: a.total * s,
    }
}

/// Reconstruction loss (no adversarial term) of synthesizing `styles`.
pub fn recon_loss(
    generator: &Generator,
    styles: &RegionalStyles,
    mask: &LabelMask,
    target: &Tensor,
    run: &RunConfig,
    backends: &Perceptual,
) -> Result<(Tensor, LossTerms)> {
    let recon = generator.synthesize(styles, mask)?;
    let scales = run.lpips_scales_for(recon.dim(1)?);
    losses::loss_rgi_total(&recon, target, &RgiWeights::from(&run.weights), backends, &scales, None)
}

/// Refines style codes by Adam on the reconstruction loss with the
/// generator frozen and noise disabled.
pub fn optimize_codes(
    generator: &Generator,
    image: &FloatImage,
    mask: &LabelMask,
    init: &RegionalStyles,
    steps: usize,
    lr: f64,
    run: &RunConfig,
) -> Result<RegionalStyles> {
    if steps == 0 {
        return Ok(init.clone());
    }
    let mut generator = generator.clone();
    generator.set_noise(NoisePolicy::Zero)?;
    let dtype = generator.params().dtype();
    let target = image.to_tensor(dtype)?;
    let backends = Perceptual::seeded(BACKEND_SEED)?;
    let codes = Var::from_tensor(&init.codes().to_dtype(dtype)?.copy()?)?;
    let mut opt = Adam::new(vec![codes.clone()], lr, (0.9, 0.999))?;
    for _ in 0..steps {
        let styles = init.with_codes(codes.as_tensor().clone())?;
        let (loss, _) = recon_loss(&generator, &styles, mask, &target, run, &backends)?;
        let grads = loss.backward()?;
        opt.step(&grads)?;
    }
    init.with_codes(codes.as_tensor().detach().to_dtype(init.codes().dtype())?)
}

/// Fine-tunes the generator on driven frames, visiting frames round-robin
/// `steps_per_frame` times each.
pub fn finetune_video(
    model: &RgiModel,
    frames: &[Sample],
    steps_per_frame: usize,
    lr: f64,
    run: &RunConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<RgiModel> {
    if frames.is_empty() {
        return arg_err("finetune_video needs at least one frame");
    }
    let mut out = RgiModel {
        encoder: model.encoder.clone(),
        generator: Generator::from_params(model.generator.config(), model.generator.params().deep_clone(model.dtype())?)?,
    };
    if steps_per_frame == 0 {
        return Ok(out);
    }
    out.generator.set_noise(NoisePolicy::Zero)?;
    let dtype = out.dtype();
    let backends = Perceptual::seeded(BACKEND_SEED)?;
    let prepared: Vec<(Tensor, RegionalStyles)> = frames
        .iter()
        .map(|f| Ok((f.image.to_tensor(dtype)?, out.invert(&f.image, &f.mask)?.detach())))
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(out.generator.params().all_vars(), lr, (0.9, 0.999))?;
    let mut step = 0;
    for _ in 0..steps_per_frame {
        for (i, f) in frames.iter().enumerate() {
            step += 1;
            let (target, styles) = &prepared[i];
            let (loss, terms) = recon_loss(&out.generator, styles, &f.mask, target, run, &backends)?;
            opt.backward_step(&loss)?;
            log_line(&mut log, &serde_json::json!({ "step": step, "frame": i, "recon": terms.recon }))?;
        }
    }
    Ok(out)
}

/// One step of the recoloring or inpainting trainer.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AuxStep {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub l2: f64,
    pub lpips: f64,
}

/// Shared learning-rate update for auxiliary trainers.
pub(crate) fn schedule_lr(opt: &mut Adam, sched: &TrainSchedule, t: usize) -> f64 {
    let lr = sched.lr_at(t);
    opt.set_lr(lr);
    lr
}
