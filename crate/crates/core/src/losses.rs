//! Reconstruction, perceptual, identity, parsing and adversarial losses.
//!
//! Perceptual-family losses run on a pluggable five-stage feature
//! extractor. The built-in one is a fixed random-weight CNN so every loss
//! stays differentiable and deterministic without external weights.

use std::sync::Arc;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{arg_err, Result};
use crate::nn;

pub const NUM_STAGES: usize = 5;
pub const COSINE_EPS: f64 = 1e-8;
const UNIT_EPS: f64 = 1e-10;

/// Five-stage feature extractor over (3, h, w) images in [0, 1].
pub trait FeatureBackend: Send + Sync {
    fn stages(&self, image: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Debug, Clone)]
struct StageWeights {
    f32: Vec<(Tensor, Tensor)>,
    f64: Vec<(Tensor, Tensor)>,
}

impl StageWeights {
    fn random(seed: u64, shapes: &[Vec<usize>]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f64s = Vec::new();
        for shape in shapes {
            let w = nn::randn(&mut rng, shape, DType::F64)?;
            let b = (nn::randn(&mut rng, &[shape[0]], DType::F64)? * 0.1)?;
            f64s.push((w, b));
        }
        let f32 = f64s
            .iter()
            .map(|(w, b)| Ok((w.to_dtype(DType::F32)?, b.to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        Ok(Self { f32, f64: f64s })
    }

    fn get(&self, dtype: DType) -> &[(Tensor, Tensor)] {
        if dtype == DType::F64 {
            &self.f64
        } else {
            &self.f32
        }
    }
}

fn pool_if_possible(x: &Tensor) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    if h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0 {
        nn::avg_pool(x, 2)
    } else {
        Ok(x.clone())
    }
}

/// Frozen random CNN: 3x3 conv + leaky ReLU per stage, 2x pooling between
/// stages while the map is large enough.
#[derive(Debug, Clone)]
pub struct RandomCnnBackend {
    weights: StageWeights,
}

impl RandomCnnBackend {
    pub const CHANNELS: [usize; NUM_STAGES] = [8, 16, 16, 32, 32];

    pub fn new(seed: u64) -> Result<Self> {
        let mut shapes = Vec::new();
        let mut cin = 3;
        for c in Self::CHANNELS {
            shapes.push(vec![c, cin, 3, 3]);
            cin = c;
        }
        Ok(Self { weights: StageWeights::random(seed, &shapes)? })
    }
}

impl FeatureBackend for RandomCnnBackend {
    fn stages(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = ((image * 2.0)? - 1.0)?;
        let mut out = Vec::with_capacity(NUM_STAGES);
        for (i, (w, b)) in self.weights.get(image.dtype()).iter().enumerate() {
            if i > 0 {
                x = pool_if_possible(&x)?;
            }
            x = nn::lrelu(&nn::add_bias(&nn::conv3x3(&x, w, None, None)?, b)?, 0.2)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Purely linear stages (1x1 maps and average pooling, no bias), so the
/// features are odd in the input. Used as an analytic test backend.
#[derive(Debug, Clone)]
pub struct LinearBackend {
    weights: StageWeights,
}

impl LinearBackend {
    pub fn new(seed: u64, channels: usize) -> Result<Self> {
        let shapes: Vec<Vec<usize>> = (0..NUM_STAGES).map(|i| vec![channels, if i == 0 { 3 } else { channels }]).collect();
        Ok(Self { weights: StageWeights::random(seed, &shapes)? })
    }
}

impl FeatureBackend for LinearBackend {
    fn stages(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = image.clone();
        let mut out = Vec::with_capacity(NUM_STAGES);
        for (i, (w, _)) in self.weights.get(image.dtype()).iter().enumerate() {
            if i > 0 {
                x = pool_if_possible(&x)?;
            }
            x = nn::conv1x1(&x, w, None)?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Backends for the perceptual, identity and parsing roles.
#[derive(Clone)]
pub struct Perceptual {
    pub lpips: Arc<dyn FeatureBackend>,
    pub id: Arc<dyn FeatureBackend>,
    pub parsing: Arc<dyn FeatureBackend>,
}

impl Perceptual {
    /// Three independent random CNNs derived from one seed.
    pub fn seeded(seed: u64) -> Result<Self> {
        Ok(Self {
            lpips: Arc::new(RandomCnnBackend::new(seed ^ 0x1111)?),
            id: Arc::new(RandomCnnBackend::new(seed ^ 0x2222)?),
            parsing: Arc::new(RandomCnnBackend::new(seed ^ 0x3333)?),
        })
    }
}

impl Default for Perceptual {
    fn default() -> Self {
        Self::seeded(0).expect("static backend init")
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return arg_err(format!("loss operands differ in shape: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn loss_mse(recon: &Tensor, input: &Tensor) -> Result<Tensor> {
    check_same(recon, input)?;
    Ok((recon - input)?.sqr()?.mean_all()?)
}

/// Distance between unit-normalised feature stacks, averaged over space
/// and summed over stages.
pub fn perceptual_distance(a: &Tensor, b: &Tensor, backend: &dyn FeatureBackend) -> Result<Tensor> {
    check_same(a, b)?;
    let fa = backend.stages(a)?;
    let fb = backend.stages(b)?;
    let mut total = Tensor::zeros((), a.dtype(), a.device())?;
    for (x, y) in fa.iter().zip(&fb) {
        let nx = x.broadcast_div(&(x.sqr()?.sum_keepdim(0)? + UNIT_EPS)?.sqrt()?)?;
        let ny = y.broadcast_div(&(y.sqr()?.sum_keepdim(0)? + UNIT_EPS)?.sqrt()?)?;
        total = (total + (nx - ny)?.sqr()?.sum(0)?.mean_all()?)?;
    }
    Ok(total)
}

/// Multi-scale perceptual loss; scales larger than the image are skipped.
pub fn loss_ms_lpips(recon: &Tensor, input: &Tensor, backend: &dyn FeatureBackend, scales: &[usize]) -> Result<Tensor> {
    check_same(recon, input)?;
    let (_, h, _) = recon.dims3()?;
    let mut total = Tensor::zeros((), recon.dtype(), recon.device())?;
    let mut used = 0;
    for &s in scales.iter().filter(|&&s| s <= h) {
        if h % s != 0 {
            return arg_err(format!("scale {s} does not divide image size {h}"));
        }
        let a = nn::downsize(recon, s)?;
        let b = nn::downsize(input, s)?;
        total = (total + perceptual_distance(&a, &b, backend)?)?;
        used += 1;
    }
    if used == 0 {
        total = perceptual_distance(recon, input, backend)?;
    }
    Ok(total)
}

/// Cosine similarity of flattened features, with the norm product
/// clamped below by [`COSINE_EPS`].
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let a = a.flatten_all()?;
    let b = b.flatten_all()?;
    let dot = (&a * &b)?.sum_all()?;
    let na = a.sqr()?.sum_all()?;
    let nb = b.sqr()?.sum_all()?;
    let denom = (na * nb)?.sqrt()?.maximum(COSINE_EPS)?;
    Ok((dot / denom)?)
}

fn stage_cosine_loss(recon: &Tensor, input: &Tensor, backend: &dyn FeatureBackend) -> Result<Tensor> {
    check_same(recon, input)?;
    let fr = backend.stages(recon)?;
    let fi = backend.stages(input)?;
    if fr.len() != NUM_STAGES || fi.len() != NUM_STAGES {
        return arg_err(format!("backend must expose {NUM_STAGES} stages"));
    }
    let mut total = Tensor::zeros((), recon.dtype(), recon.device())?;
    for (a, b) in fi.iter().zip(&fr) {
        total = (total + (1.0 - cosine(a, b)?)?)?;
    }
    Ok(total)
}

pub fn loss_ms_id(recon: &Tensor, input: &Tensor, backend: &dyn FeatureBackend) -> Result<Tensor> {
    stage_cosine_loss(recon, input, backend)
}

pub fn loss_ms_parsing(recon: &Tensor, input: &Tensor, backend: &dyn FeatureBackend) -> Result<Tensor> {
    stage_cosine_loss(recon, input, backend)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvSide {
    Generator,
    Discriminator,
}

/// Logistic GAN loss on raw logits. The discriminator side needs real
/// logits; the generator side uses the non-saturating form.
pub fn loss_adversarial(real: Option<&Tensor>, fake: &Tensor, side: AdvSide) -> Result<Tensor> {
    match side {
        AdvSide::Generator => Ok(nn::softplus(&fake.neg()?)?.mean_all()?),
        AdvSide::Discriminator => {
            let real = match real {
                Some(r) => r,
                None => return arg_err("discriminator loss needs real logits"),
            };
            Ok((nn::softplus(&real.neg()?)?.mean_all()? + nn::softplus(fake)?.mean_all()?)?)
        }
    }
}

/// Unweighted term values of one total-loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerms {
    pub mse: f64,
    pub lpips: f64,
    pub id: f64,
    pub parsing: f64,
    pub adv: Option<f64>,
    pub recon: f64,
    pub total: f64,
}

pub struct RgiWeights {
    pub lpips: f64,
    pub id: f64,
    pub parsing: f64,
    pub adv: f64,
}

impl From<&crate::config::LossWeights> for RgiWeights {
    fn from(w: &crate::config::LossWeights) -> Self {
        Self { lpips: w.lpips, id: w.id, parsing: w.parsing, adv: w.adv }
    }
}

/// Reconstruction loss plus, when generator-side logits are given, the
/// weighted adversarial term.
pub fn loss_rgi_total(
    recon: &Tensor,
    input: &Tensor,
    weights: &RgiWeights,
    backends: &Perceptual,
    scales: &[usize],
    d_fake_logits: Option<&Tensor>,
) -> Result<(Tensor, LossTerms)> {
    let mse = loss_mse(recon, input)?;
    let lpips = loss_ms_lpips(recon, input, backends.lpips.as_ref(), scales)?;
    let id = loss_ms_id(recon, input, backends.id.as_ref())?;
    let parsing = loss_ms_parsing(recon, input, backends.parsing.as_ref())?;
    let recon_loss = (((&mse + (&lpips * weights.lpips)?)? + (&id * weights.id)?)? + (&parsing * weights.parsing)?)?;
    let (total, adv) = match d_fake_logits {
        Some(logits) => {
            let adv = loss_adversarial(None, logits, AdvSide::Generator)?;
            ((&recon_loss + (&adv * weights.adv)?)?, Some(adv))
        }
        None => (recon_loss.clone(), None),
    };
    let terms = LossTerms {
        mse: scalar(&mse)?,
        lpips: scalar(&lpips)?,
        id: scalar(&id)?,
        parsing: scalar(&parsing)?,
        adv: adv.as_ref().map(scalar).transpose()?,
        recon: scalar(&recon_loss)?,
        total: scalar(&total)?,
    };
    Ok((total, terms))
}

/// Weighted L2 + perceptual loss shared by the recoloring and inpainting
/// networks.
pub fn loss_l2_lpips(
    out: &Tensor,
    target: &Tensor,
    l2_weight: f64,
    lpips_weight: f64,
    backend: &dyn FeatureBackend,
    scales: &[usize],
) -> Result<(Tensor, f64, f64)> {
    let l2 = loss_mse(out, target)?;
    let lp = loss_ms_lpips(out, target, backend, scales)?;
    let total = ((&l2 * l2_weight)? + (&lp * lpips_weight)?)?;
    Ok((total, scalar(&l2)?, scalar(&lp)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn img(seed: u64, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = nn::randn(&mut rng, &[3, size, size], DType::F64).unwrap();
        ((t.tanh().unwrap() * 0.5).unwrap() + 0.5).unwrap()
    }

    #[test]
    fn mse_hand_values() {
        let a = Tensor::full(0.2f64, (3, 4, 4), &Device::Cpu).unwrap();
        let b = Tensor::full(0.7f64, (3, 4, 4), &Device::Cpu).unwrap();
        assert!((scalar(&loss_mse(&a, &b).unwrap()).unwrap() - 0.25).abs() < 1e-12);
        assert_eq!(scalar(&loss_mse(&a, &a).unwrap()).unwrap(), 0.0);
        assert!(loss_mse(&a, &img(0, 8)).is_err());
    }

    #[test]
    fn lpips_composes_from_single_scale_distances() {
        let backend = LinearBackend::new(3, 4).unwrap();
        let (a, b) = (img(1, 16), img(2, 16));
        let got = scalar(&loss_ms_lpips(&a, &b, &backend, &[8, 16]).unwrap()).unwrap();
        let fine = scalar(&perceptual_distance(&a, &b, &backend).unwrap()).unwrap();
        let coarse = scalar(
            &perceptual_distance(&nn::avg_pool(&a, 2).unwrap(), &nn::avg_pool(&b, 2).unwrap(), &backend).unwrap(),
        )
        .unwrap();
        assert!((got - fine - coarse).abs() < 1e-12);
        let single = scalar(&loss_ms_lpips(&a, &b, &backend, &[16, 32]).unwrap()).unwrap();
        assert!((single - fine).abs() < 1e-12);
        assert_eq!(scalar(&loss_ms_lpips(&a, &a, &backend, &[8, 16]).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn id_loss_sign_flip_is_ten() {
        let backend = LinearBackend::new(5, 4).unwrap();
        let a = img(3, 16);
        let v = scalar(&loss_ms_id(&a.neg().unwrap(), &a, &backend).unwrap()).unwrap();
        assert!((v - 10.0).abs() < 1e-9, "{v}");
        assert_eq!(scalar(&loss_ms_id(&a, &a, &backend).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn cosine_guard_on_zero_features() {
        let z = Tensor::zeros(6, DType::F64, &Device::Cpu).unwrap();
        assert_eq!(scalar(&cosine(&z, &z).unwrap()).unwrap(), 0.0);
    }

    fn oracle_cos_sum(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(a, b)| {
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let na: f64 = a.iter().map(|p| p * p).sum();
                let nb: f64 = b.iter().map(|p| p * p).sum();
                1.0 - dot / (na * nb).sqrt().max(COSINE_EPS)
            })
            .sum()
    }

    #[test]
    fn parsing_loss_matches_scalar_oracle() {
        let backend = RandomCnnBackend::new(9).unwrap();
        for seed in 0..4 {
            let (a, b) = (img(10 + seed, 16), img(20 + seed, 16));
            let flat = |t: &Tensor| -> Vec<Vec<f64>> {
                backend
                    .stages(t)
                    .unwrap()
                    .iter()
                    .map(|s| s.flatten_all().unwrap().to_vec1::<f64>().unwrap())
                    .collect()
            };
            let want = oracle_cos_sum(&flat(&b), &flat(&a));
            let got = scalar(&loss_ms_parsing(&a, &b, &backend).unwrap()).unwrap();
            assert!((got - want).abs() < 1e-12);
            assert!((0.0..=10.0).contains(&got));
        }
    }

    #[test]
    fn adversarial_hand_values() {
        let zero = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        let d = scalar(&loss_adversarial(Some(&zero), &zero, AdvSide::Discriminator).unwrap()).unwrap();
        let g = scalar(&loss_adversarial(None, &zero, AdvSide::Generator).unwrap()).unwrap();
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g - 2f64.ln()).abs() < 1e-12);
        // Logits of +-ln((1-eps)/eps) with eps = 1e-6.
        let big = ((1.0f64 - 1e-6) / 1e-6).ln();
        let real = Tensor::full(big, 4, &Device::Cpu).unwrap();
        let fake = Tensor::full(-big, 4, &Device::Cpu).unwrap();
        assert!(scalar(&loss_adversarial(Some(&real), &fake, AdvSide::Discriminator).unwrap()).unwrap() < 1e-5);
        let mut prev = f64::INFINITY;
        for p in [0.2f64, 0.5, 0.9] {
            let logit = Tensor::full((p / (1.0 - p)).ln(), 1, &Device::Cpu).unwrap();
            let v = scalar(&loss_adversarial(None, &logit, AdvSide::Generator).unwrap()).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(loss_adversarial(None, &zero, AdvSide::Discriminator).is_err());
    }

    #[test]
    fn total_is_weighted_sum_and_linear() {
        let backends = Perceptual::seeded(4).unwrap();
        let (a, b) = (img(30, 16), img(31, 16));
        let logits = Tensor::new(&[0.3f64, -1.2], &Device::Cpu).unwrap();
        let w = RgiWeights::from(&crate::config::LossWeights::default());
        let (_, t) = loss_rgi_total(&a, &b, &w, &backends, &[8, 16], Some(&logits)).unwrap();
        let sum = t.mse + 0.8 * t.lpips + 0.1 * t.id + 0.1 * t.parsing + 0.01 * t.adv.unwrap();
        assert!((t.total - sum).abs() < 1e-9);
        let w2 = RgiWeights { lpips: 1.6, ..w };
        let (_, t2) = loss_rgi_total(&a, &b, &w2, &backends, &[8, 16], Some(&logits)).unwrap();
        assert!(((t2.total - t.total) - 0.8 * t.lpips).abs() < 1e-9);
        let (zero, tz) = loss_rgi_total(&a, &a, &w2, &backends, &[8, 16], None).unwrap();
        assert_eq!(scalar(&zero).unwrap(), 0.0);
        assert_eq!((tz.mse, tz.lpips, tz.id, tz.parsing), (0.0, 0.0, 0.0, 0.0));
    }
}
