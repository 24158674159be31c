//! Multi-scale mask-guided texture encoder.
//!
//! The image passes through a strided residual conv stack; the label mask,
//! downsized to each pyramid level, selects pixels whose features are
//! averaged into one vector per region and scale. Concatenated vectors go
//! through one MLP head per generator layer, giving a C×L×D style tensor.

use candle_core::{DType, Device, Tensor};

use crate::config::ModelConfig;
use crate::error::{arg_err, Result};
use crate::mask::LabelMask;
use crate::nn::{self, Init, ParamStore};

/// Per-region, per-layer style codes (C×L×D) with region presence flags.
#[derive(Debug, Clone)]
pub struct RegionalStyles {
    codes: Tensor,
    present: Vec<bool>,
}

impl RegionalStyles {
    pub fn new(codes: Tensor, present: Vec<bool>) -> Result<Self> {
        let (c, _, _) = codes.dims3()?;
        if present.len() != c {
            return arg_err(format!("presence flags ({}) do not match {c} regions", present.len()));
        }
        Ok(Self { codes, present })
    }

    pub fn zeros(c: usize, l: usize, d: usize, dtype: DType) -> Result<Self> {
        Self::new(Tensor::zeros((c, l, d), dtype, &Device::Cpu)?, vec![false; c])
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn num_categories(&self) -> usize {
        self.present.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.codes.dims3().expect("codes are rank 3")
    }

    pub fn detach(&self) -> Self {
        Self { codes: self.codes.detach(), present: self.present.clone() }
    }

    pub fn with_codes(&self, codes: Tensor) -> Result<Self> {
        if codes.dims() != self.codes.dims() {
            return arg_err("replacement codes have a different shape");
        }
        Ok(Self { codes, present: self.present.clone() })
    }

    /// Codes as nested f32 rows `[c][l][d]`.
    pub fn to_vec3(&self) -> Result<Vec<Vec<Vec<f32>>>> {
        Ok(self.codes.to_dtype(DType::F32)?.to_vec3::<f32>()?)
    }
}

/// Encoder feature maps ordered coarse to fine, each (channels, h, w).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub maps: Vec<Tensor>,
}

/// Region-pooled features: one (C, channels_i) matrix per scale.
#[derive(Debug, Clone)]
pub struct RegionFeatures {
    pub per_scale: Vec<Tensor>,
    pub present: Vec<bool>,
}

impl RegionFeatures {
    pub fn concat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&self.per_scale, 1)?)
    }
}

/// Averages each map over the pixels of every region of the downsized mask.
/// Regions absent at a scale get a zero vector; a region is flagged absent
/// only when it is missing at every scale.
pub fn region_average_pool(pyramid: &FeaturePyramid, mask: &LabelMask) -> Result<RegionFeatures> {
    let c = mask.num_categories();
    let mut present = vec![false; c];
    let mut per_scale = Vec::with_capacity(pyramid.maps.len());
    for map in &pyramid.maps {
        let (ch, h, w) = map.dims3()?;
        let small = mask.downsample_to(h, w)?;
        let mut counts = vec![0usize; c];
        for &l in small.labels() {
            counts[l as usize] += 1;
        }
        let mut pool = vec![0f64; c * h * w];
        for (p, &l) in small.labels().iter().enumerate() {
            pool[l as usize * h * w + p] = 1.0 / counts[l as usize] as f64;
        }
        for (j, &n) in counts.iter().enumerate() {
            present[j] |= n > 0;
        }
        let pool = Tensor::from_vec(pool, (c, h * w), &Device::Cpu)?.to_dtype(map.dtype())?;
        let flat = map.reshape((ch, h * w))?;
        per_scale.push(pool.matmul(&flat.t()?)?);
    }
    Ok(RegionFeatures { per_scale, present })
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: ModelConfig,
    params: ParamStore,
}

impl Encoder {
    pub fn init(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut init = Init::new(&mut params, seed);
        let size = cfg.image_size;
        init.conv("stem", cfg.channels_at(size), 3, 3, 0.0)?;
        for d in 1..=Self::depth(cfg) {
            let (cin, cout) = (cfg.channels_at(size >> (d - 1)), cfg.channels_at(size >> d));
            init.conv(&format!("down{d}.conv1"), cout, cin, 3, 0.0)?;
            init.conv(&format!("down{d}.conv2"), cout, cout, 3, 0.0)?;
            init.normal(&format!("down{d}.skip.weight"), &[cout, cin], 1.0)?;
        }
        let in_dim = Self::pooled_dim(cfg);
        let hidden = 2 * cfg.style_dim;
        for l in 0..cfg.num_layers {
            init.linear(&format!("head{l}.fc0"), hidden, in_dim, 0.0)?;
            init.linear(&format!("head{l}.fc1"), hidden, hidden, 0.0)?;
            init.linear(&format!("head{l}.fc2"), cfg.style_dim, hidden, 0.0)?;
        }
        Ok(Self { cfg: cfg.clone(), params })
    }

    pub fn from_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let reference = Self::init(cfg, 0, params.dtype())?;
        for name in reference.params.names() {
            let expected = reference.params.get(name)?.dims();
            let got = params.get(name)?.dims();
            if expected != got {
                return arg_err(format!("encoder parameter `{name}` has shape {got:?}, expected {expected:?}"));
            }
        }
        Ok(Self { cfg: cfg.clone(), params })
    }

    fn depth(cfg: &ModelConfig) -> usize {
        cfg.coarsest_stride().trailing_zeros() as usize
    }

    fn pooled_dim(cfg: &ModelConfig) -> usize {
        cfg.encoder_strides().iter().map(|s| cfg.channels_at(cfg.image_size / s)).sum()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn conv(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        let y = nn::conv3x3(x, self.params.get(&format!("{name}.weight"))?, None, None)?;
        nn::add_bias(&y, self.params.get(&format!("{name}.bias"))?)
    }

    /// Feature maps at the configured strides for a (3, H, W) image in [0, 1].
    pub fn extract_pyramid(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let size = self.cfg.image_size;
        if image.dims() != [3, size, size] {
            return arg_err(format!("encoder expects a 3x{size}x{size} image, got {:?}", image.dims()));
        }
        let strides = self.cfg.encoder_strides();
        let x = ((image.to_dtype(self.params.dtype())? * 2.0)? - 1.0)?;
        let mut x = nn::lrelu(&self.conv("stem", &x)?, 0.2)?;
        let mut maps = Vec::with_capacity(strides.len());
        if strides.contains(&1) {
            maps.push(x.clone());
        }
        for d in 1..=Self::depth(&self.cfg) {
            let pooled = nn::avg_pool(&x, 2)?;
            let h = nn::lrelu(&self.conv(&format!("down{d}.conv1"), &pooled)?, 0.2)?;
            let h = self.conv(&format!("down{d}.conv2"), &h)?;
            let skip = nn::conv1x1(&pooled, self.params.get(&format!("down{d}.skip.weight"))?, None)?;
            x = nn::lrelu(&((h + skip)? * std::f64::consts::FRAC_1_SQRT_2)?, 0.2)?;
            if strides.contains(&(1 << d)) {
                maps.push(x.clone());
            }
        }
        maps.reverse();
        Ok(FeaturePyramid { maps })
    }

    /// MLP heads over concatenated pooled vectors (C, in) → codes (C, L, D).
    pub fn heads(&self, pooled: &Tensor) -> Result<Tensor> {
        let mut layers = Vec::with_capacity(self.cfg.num_layers);
        for l in 0..self.cfg.num_layers {
            let mut h = pooled.clone();
            for (k, act) in [(0, true), (1, true), (2, false)] {
                let p = format!("head{l}.fc{k}");
                h = nn::linear(&h, self.params.get(&format!("{p}.weight"))?, Some(self.params.get(&format!("{p}.bias"))?))?;
                if act {
                    h = nn::lrelu(&h, 0.2)?;
                }
            }
            layers.push(h);
        }
        Ok(Tensor::stack(&layers, 1)?)
    }

    pub fn encode_styles(&self, image: &Tensor, mask: &LabelMask) -> Result<RegionalStyles> {
        let size = self.cfg.image_size;
        if mask.height() != size || mask.width() != size {
            return arg_err(format!("mask must be {size}x{size}"));
        }
        if mask.num_categories() != self.cfg.num_categories {
            return arg_err("mask category count differs from the model's");
        }
        let pyramid = self.extract_pyramid(image)?;
        let pooled = region_average_pool(&pyramid, mask)?;
        let codes = self.heads(&pooled.concat()?)?;
        let c = self.cfg.num_categories;
        let keep: Vec<u8> = pooled.present.iter().map(|&p| p as u8).collect();
        let keep = Tensor::from_vec(keep, (c, 1, 1), &Device::Cpu)?.broadcast_as(codes.shape())?;
        let codes = keep.where_cond(&codes, &codes.zeros_like()?)?;
        RegionalStyles::new(codes, pooled.present)
    }
}
