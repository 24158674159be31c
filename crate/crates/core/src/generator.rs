//! Mask-guided style-based generator.
//!
//! A learned 4×4 constant is refined by L−1 modulated 3×3 convolutions
//! (two per resolution after the first, with bilinear ×2 upsampling in
//! between) and RGB skip outputs. Code `l` drives conv layer `l`; the RGB
//! head at a resolution uses the code following its last conv, so the final
//! code feeds the last RGB head.
//!
//! For the first K codes every region gets its own modulated kernel and the
//! outputs are composited through the downsized label mask. Because
//! modulation scales input channels and demodulation scales output
//! channels, compositing per-region convolutions is the same as one
//! convolution with per-output-pixel scales, which is how it is computed.
//! Later layers use a single global code: the mean over regions present in
//! the synthesis mask.

use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoder::RegionalStyles;
use crate::error::{arg_err, Error, Result};
use crate::mask::LabelMask;
use crate::nn::{self, Init, ParamStore};

pub const DEMOD_EPS: f64 = 1e-8;

/// How noise is injected after each conv layer.
#[derive(Debug, Clone)]
pub enum NoisePolicy {
    Zero,
    /// A new draw per synthesis call from a seeded stream.
    Fresh { seed: u64 },
    /// Fixed buffers, one (1, h, w) map per conv layer.
    Frozen(Vec<Tensor>),
}

impl NoisePolicy {
    pub fn frozen_from_seed(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let buffers = (0..cfg.num_layers - 1)
            .map(|l| {
                let r = cfg.layer_resolution(l);
                nn::randn(&mut rng, &[1, r, r], dtype)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NoisePolicy::Frozen(buffers))
    }
}

#[derive(Debug)]
enum NoiseState {
    Zero,
    Fresh(ChaCha8Rng),
    Frozen(Vec<Tensor>),
}

/// Explicitly modulated and demodulated kernel: input channel `i` scaled by
/// `scales[i]`, then every output filter normalised to unit L2 norm
/// (up to `eps`). `weight` is (cout, cin, k, k), `scales` has length cin.
pub fn modulate_demodulate(weight: &Tensor, scales: &Tensor, eps: f64) -> Result<Tensor> {
    let cin = weight.dim(1)?;
    let w = weight.broadcast_mul(&scales.reshape((1, cin, 1, 1))?)?;
    let norm = (w.sqr()?.sum_keepdim((1, 2, 3))? + eps)?.sqrt()?;
    Ok(w.broadcast_div(&norm)?)
}

fn layer_in_channels(cfg: &ModelConfig, l: usize) -> usize {
    let r = cfg.layer_resolution(l);
    if l == 0 {
        cfg.channels_at(4)
    } else {
        cfg.channels_at(if l % 2 == 1 { r / 2 } else { r })
    }
}

/// Per-channel modulation for one layer, either per pixel or global.
struct Modulation {
    in_scale: Tensor,
    out_scale: Option<Tensor>,
}

pub struct Generator {
    cfg: ModelConfig,
    params: ParamStore,
    noise: Mutex<NoiseState>,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator").field("cfg", &self.cfg).field("params", &self.params.len()).finish()
    }
}

impl Clone for Generator {
    fn clone(&self) -> Self {
        let noise = match &*self.noise.lock().expect("noise lock") {
            NoiseState::Zero => NoiseState::Zero,
            NoiseState::Fresh(r) => NoiseState::Fresh(r.clone()),
            NoiseState::Frozen(b) => NoiseState::Frozen(b.clone()),
        };
        Self { cfg: self.cfg.clone(), params: self.params.clone(), noise: Mutex::new(noise) }
    }
}

impl Generator {
    pub fn init(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut init = Init::new(&mut params, seed);
        let d = cfg.style_dim;
        init.normal("const", &[cfg.channels_at(4), 4, 4], 1.0)?;
        for l in 0..cfg.num_layers - 1 {
            let r = cfg.layer_resolution(l);
            let cin = layer_in_channels(cfg, l);
            let cout = cfg.channels_at(r);
            init.conv(&format!("conv{l}"), cout, cin, 3, 0.0)?;
            init.linear(&format!("conv{l}.affine"), cin, d, 1.0)?;
            init.constant(&format!("conv{l}.noise_gain"), &[1], 0.0)?;
        }
        for r in 0..cfg.num_resolutions() {
            let cin = cfg.channels_at(4 << r);
            init.normal(&format!("rgb{r}.weight"), &[3, cin], 1.0)?;
            init.constant(&format!("rgb{r}.bias"), &[3], 0.0)?;
            init.linear(&format!("rgb{r}.affine"), cin, d, 1.0)?;
        }
        init.constant("default_codes", &[cfg.num_categories, cfg.num_layers, d], 0.0)?;
        Ok(Self { cfg: cfg.clone(), params, noise: Mutex::new(NoiseState::Zero) })
    }

    pub fn from_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(cfg, 0, params.dtype())?;
        for name in reference.params.names() {
            let expected = reference.params.get(name)?.dims();
            let got = params.get(name)?.dims();
            if expected != got {
                return arg_err(format!("generator parameter `{name}` has shape {got:?}, expected {expected:?}"));
            }
        }
        Ok(Self { cfg: cfg.clone(), params, noise: Mutex::new(NoiseState::Zero) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// (channels, height, width) of the features entering conv layer `l`.
    pub fn layer_input_dims(&self, l: usize) -> (usize, usize, usize) {
        let r = self.cfg.layer_resolution(l);
        (layer_in_channels(&self.cfg, l), r, r)
    }

    /// Parameters belonging to the first K (mask-guided) layers, including
    /// the constant input and absent-region default codes.
    pub fn masked_layer_param(&self, name: &str) -> bool {
        let k = self.cfg.masked_layers;
        if name == "const" || name == "default_codes" {
            return true;
        }
        let index = |prefix: &str| -> Option<usize> {
            name.strip_prefix(prefix)?.split('.').next()?.parse().ok()
        };
        if let Some(l) = index("conv") {
            return l < k;
        }
        if let Some(r) = index("rgb") {
            return 2 * r + 1 < k;
        }
        false
    }

    pub fn set_noise(&mut self, policy: NoisePolicy) -> Result<()> {
        let state = match policy {
            NoisePolicy::Zero => NoiseState::Zero,
            NoisePolicy::Fresh { seed } => NoiseState::Fresh(ChaCha8Rng::seed_from_u64(seed)),
            NoisePolicy::Frozen(buffers) => {
                if buffers.len() != self.cfg.num_layers - 1 {
                    return arg_err(format!(
                        "frozen noise needs {} buffers, got {}",
                        self.cfg.num_layers - 1,
                        buffers.len()
                    ));
                }
                for (l, b) in buffers.iter().enumerate() {
                    let r = self.cfg.layer_resolution(l);
                    if b.dims() != [1, r, r] {
                        return arg_err(format!("noise buffer {l} must be 1x{r}x{r}, got {:?}", b.dims()));
                    }
                }
                NoiseState::Frozen(buffers.into_iter().map(|b| b.to_dtype(self.params.dtype())).collect::<candle_core::Result<_>>()?)
            }
        };
        *self.noise.get_mut().map_err(|_| Error::Precondition("noise lock poisoned".into()))? = state;
        Ok(())
    }

    fn draw_noise(&self) -> Result<Vec<Option<Tensor>>> {
        let mut state = self.noise.lock().map_err(|_| Error::Precondition("noise lock poisoned".into()))?;
        let n = self.cfg.num_layers - 1;
        Ok(match &mut *state {
            NoiseState::Zero => vec![None; n],
            NoiseState::Frozen(b) => b.iter().cloned().map(Some).collect(),
            NoiseState::Fresh(rng) => (0..n)
                .map(|l| {
                    let r = self.cfg.layer_resolution(l);
                    nn::randn(rng, &[1, r, r], self.params.dtype()).map(Some)
                })
                .collect::<Result<_>>()?,
        })
    }

    /// Codes with absent rows replaced by the learned defaults: (C, L, D).
    pub fn effective_codes(&self, styles: &RegionalStyles) -> Result<Tensor> {
        let (c, l, d) = styles.shape();
        if (c, l, d) != (self.cfg.num_categories, self.cfg.num_layers, self.cfg.style_dim) {
            return arg_err(format!(
                "styles shape {c}x{l}x{d} does not match {}x{}x{}",
                self.cfg.num_categories, self.cfg.num_layers, self.cfg.style_dim
            ));
        }
        if styles.present().iter().all(|&p| p) {
            return Ok(styles.codes().to_dtype(self.params.dtype())?);
        }
        let pool = Tensor::cat(&[styles.codes().to_dtype(self.params.dtype())?, self.params.get("default_codes")?.clone()], 0)?;
        let idx: Vec<u32> = styles
            .present()
            .iter()
            .enumerate()
            .map(|(j, &p)| if p { j as u32 } else { (c + j) as u32 })
            .collect();
        Ok(pool.index_select(&Tensor::from_vec(idx, c, &Device::Cpu)?, 0)?)
    }

    fn global_weights(&self, mask: &LabelMask) -> Result<Tensor> {
        let present = mask.present_categories();
        let n = present.iter().filter(|&&p| p).count() as f64;
        let w: Vec<f64> = present.iter().map(|&p| if p { 1.0 / n } else { 0.0 }).collect();
        Ok(Tensor::from_vec(w, (1, present.len()), &Device::Cpu)?.to_dtype(self.params.dtype())?)
    }

    fn modulation(
        &self,
        prefix: &str,
        codes_l: &Tensor,
        layer_mask: Option<&LabelMask>,
        global_w: &Tensor,
        demod_weight: Option<&Tensor>,
    ) -> Result<Modulation> {
        let aw = self.params.get(&format!("{prefix}.affine.weight"))?;
        let ab = self.params.get(&format!("{prefix}.affine.bias"))?;
        let codes = match layer_mask {
            Some(_) => codes_l.clone(),
            None => global_w.matmul(codes_l)?,
        };
        let scales = nn::linear(&codes, aw, Some(ab))?;
        let demod = match demod_weight {
            Some(w) => {
                let (cout, cin) = (w.dim(0)?, w.dim(1)?);
                let wsq = (w.sqr()?.sum((2, 3))? * (nn::he_scale(cin * 9).powi(2)))?;
                debug_assert_eq!(wsq.dims(), &[cout, cin]);
                Some((scales.sqr()?.matmul(&wsq.t()?)? + DEMOD_EPS)?.sqrt()?.recip()?)
            }
            None => None,
        };
        Ok(match layer_mask {
            Some(m) => {
                let idx = nn::label_index(m.labels())?;
                Modulation {
                    in_scale: scales.index_select(&idx, 0)?.t()?,
                    out_scale: demod.map(|d| d.index_select(&idx, 0)?.t()).transpose()?,
                }
            }
            None => Modulation { in_scale: scales.t()?, out_scale: demod.map(|d| d.t()).transpose()? },
        })
    }

    /// One mask-guided style block: per-region modulated convolution
    /// composited by `mask` downsized to the feature resolution, plus bias
    /// and optional noise, then activation. `codes_l` is (C, D).
    pub fn mask_guided_layer(
        &self,
        layer: usize,
        x: &Tensor,
        codes_l: &Tensor,
        mask: &LabelMask,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (_, h, w) = x.dims3()?;
        let small = mask.downsample_to(h, w)?;
        let gw = self.global_weights(mask)?;
        self.style_block(layer, x, codes_l, Some(&small), &gw, noise)
    }

    fn style_block(
        &self,
        layer: usize,
        x: &Tensor,
        codes_l: &Tensor,
        layer_mask: Option<&LabelMask>,
        global_w: &Tensor,
        noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        let prefix = format!("conv{layer}");
        let weight = self.params.get(&format!("{prefix}.weight"))?;
        let m = self.modulation(&prefix, codes_l, layer_mask, global_w, Some(weight))?;
        let y = nn::conv3x3(x, weight, Some(&m.in_scale), m.out_scale.as_ref())?;
        let mut y = nn::add_bias(&y, self.params.get(&format!("{prefix}.bias"))?)?;
        if let Some(n) = noise {
            let gain = self.params.get(&format!("{prefix}.noise_gain"))?;
            y = y.broadcast_add(&n.broadcast_mul(gain)?)?;
        }
        nn::lrelu_gain(&y)
    }

    fn to_rgb(&self, r: usize, x: &Tensor, codes_l: &Tensor, layer_mask: Option<&LabelMask>, global_w: &Tensor) -> Result<Tensor> {
        let prefix = format!("rgb{r}");
        let m = self.modulation(&prefix, codes_l, layer_mask, global_w, None)?;
        let y = nn::conv1x1(x, self.params.get(&format!("{prefix}.weight"))?, Some(&m.in_scale))?;
        nn::add_bias(&y, self.params.get(&format!("{prefix}.bias"))?)
    }

    /// Renders a (3, H, W) image (nominally in [0, 1], unclamped) from
    /// regional styles and a label mask at the model resolution.
    pub fn synthesize(&self, styles: &RegionalStyles, mask: &LabelMask) -> Result<Tensor> {
        let size = self.cfg.image_size;
        if mask.height() != size || mask.width() != size || mask.num_categories() != self.cfg.num_categories {
            return arg_err(format!("synthesis mask must be {size}x{size} over {} categories", self.cfg.num_categories));
        }
        let codes = self.effective_codes(styles)?;
        let noise = self.draw_noise()?;
        let gw = self.global_weights(mask)?;
        let k = self.cfg.masked_layers;
        let masks: Vec<LabelMask> = (0..self.cfg.num_resolutions())
            .map(|r| mask.downsample(4 << r))
            .collect::<Result<_>>()?;
        let code = |l: usize| -> Result<Tensor> { Ok(codes.narrow(1, l, 1)?.squeeze(1)?) };
        let guide = |l: usize, r: usize| if l < k { Some(&masks[r]) } else { None };

        let mut x = self.params.get("const")?.clone();
        x = self.style_block(0, &x, &code(0)?, guide(0, 0), &gw, noise[0].as_ref())?;
        let mut rgb = self.to_rgb(0, &x, &code(1)?, guide(1, 0), &gw)?;
        for r in 1..self.cfg.num_resolutions() {
            x = nn::upsample2x(&x)?;
            for l in [2 * r - 1, 2 * r] {
                x = self.style_block(l, &x, &code(l)?, guide(l, r), &gw, noise[l].as_ref())?;
            }
            rgb = (nn::upsample2x(&rgb)? + self.to_rgb(r, &x, &code(2 * r + 1)?, guide(2 * r + 1, r), &gw)?)?;
        }
        Ok(((rgb + 1.0)? * 0.5)?)
    }

    /// Plain single-style forward: one code per layer, (L, D), applied by
    /// modulating the kernels themselves rather than per pixel.
    pub fn synthesize_global(&self, codes: &Tensor) -> Result<Tensor> {
        let (l_n, d) = codes.dims2()?;
        if (l_n, d) != (self.cfg.num_layers, self.cfg.style_dim) {
            return arg_err(format!("global codes must be {}x{}", self.cfg.num_layers, self.cfg.style_dim));
        }
        let codes = codes.to_dtype(self.params.dtype())?;
        let noise = self.draw_noise()?;
        let scales = |prefix: &str, l: usize| -> Result<Tensor> {
            let code = codes.narrow(0, l, 1)?;
            let aw = self.params.get(&format!("{prefix}.affine.weight"))?;
            let ab = self.params.get(&format!("{prefix}.affine.bias"))?;
            Ok(nn::linear(&code, aw, Some(ab))?.squeeze(0)?)
        };
        let conv = |l: usize, x: &Tensor| -> Result<Tensor> {
            let prefix = format!("conv{l}");
            let w = self.params.get(&format!("{prefix}.weight"))?;
            let w = (w * nn::he_scale(w.dim(1)? * 9))?;
            let k = modulate_demodulate(&w, &scales(&prefix, l)?, DEMOD_EPS)?;
            let y = x.unsqueeze(0)?.conv2d(&k, 1, 1, 1, 1)?.squeeze(0)?;
            let mut y = nn::add_bias(&y, self.params.get(&format!("{prefix}.bias"))?)?;
            if let Some(n) = &noise[l] {
                y = y.broadcast_add(&n.broadcast_mul(self.params.get(&format!("{prefix}.noise_gain"))?)?)?;
            }
            nn::lrelu_gain(&y)
        };
        let rgb_of = |r: usize, x: &Tensor| -> Result<Tensor> {
            let prefix = format!("rgb{r}");
            let w = self.params.get(&format!("{prefix}.weight"))?;
            let s = scales(&prefix, 2 * r + 1)?;
            let w = (w.broadcast_mul(&s.unsqueeze(0)?)? * nn::he_scale(w.dim(1)?))?;
            let (c, h, wd) = x.dims3()?;
            let y = w.matmul(&x.reshape((c, h * wd))?)?.reshape((3, h, wd))?;
            nn::add_bias(&y, self.params.get(&format!("{prefix}.bias"))?)
        };
        let mut x = conv(0, self.params.get("const")?)?;
        let mut rgb = rgb_of(0, &x)?;
        for r in 1..self.cfg.num_resolutions() {
            x = nn::upsample2x(&x)?;
            for l in [2 * r - 1, 2 * r] {
                x = conv(l, &x)?;
            }
            rgb = (nn::upsample2x(&rgb)? + rgb_of(r, &x)?)?;
        }
        Ok(((rgb + 1.0)? * 0.5)?)
    }
}
