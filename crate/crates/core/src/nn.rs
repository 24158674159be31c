//! Parameter storage and the small set of differentiable building blocks
//! shared by every network: 3x3 convolutions lowered to im2col + matmul
//! (so per-pixel modulation costs one matmul), bilinear resizing through
//! interpolation matrices, pooling and equalized-learning-rate linears.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Named, ordered set of trainable tensors for one network.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?;
        self.vars.insert(name.into(), Var::from_tensor(&value)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn vars_where(&self, mut keep: impl FnMut(&str) -> bool) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Overwrites an existing parameter in place, keeping its identity.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: {:?} vs {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Deep copy with fresh variables (optionally converting dtype).
    pub fn deep_clone(&self, dtype: DType) -> Result<Self> {
        let mut out = ParamStore::new(dtype);
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    pub fn map_values(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            let nv = f(k, v.as_tensor())?;
            v.set(&nv)?;
        }
        Ok(())
    }

    /// Flattened f32 values per parameter, sorted by name.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let t = v.as_tensor();
                let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                Ok((k.clone(), t.dims().to_vec(), data))
            })
            .collect()
    }
}

/// Seeded initializer writing into a [`ParamStore`].
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        self.store.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let t = Tensor::full(value, shape, &Device::Cpu)?;
        self.store.insert(name, t)
    }

    /// Equalized-lr weight (unit normal, scaled at use) plus bias.
    pub fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize, bias: f64) -> Result<()> {
        self.normal(&format!("{prefix}.weight"), &[cout, cin, k, k], 1.0)?;
        self.constant(&format!("{prefix}.bias"), &[cout], bias)
    }

    pub fn linear(&mut self, prefix: &str, out: usize, inp: usize, bias: f64) -> Result<()> {
        self.normal(&format!("{prefix}.weight"), &[out, inp], 1.0)?;
        self.constant(&format!("{prefix}.bias"), &[out], bias)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Runtime scale of an equalized-lr weight with the given fan-in.
pub fn he_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub fn lrelu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Leaky ReLU with the sqrt(2) gain used throughout StyleGAN-type nets.
pub fn lrelu_gain(x: &Tensor) -> Result<Tensor> {
    Ok((lrelu(x, 0.2)? * std::f64::consts::SQRT_2)?)
}

/// `x`: (N, in). Weight (out, in) stored equalized; bias (out).
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let fan_in = weight.dim(1)?;
    let w = (weight * he_scale(fan_in))?;
    let y = x.matmul(&w.t()?)?;
    Ok(match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

/// Unfolds a (cin, h, w) map into 3x3 patches: (cin, 9, h·w), zero padded.
pub fn im2col3x3(x: &Tensor) -> Result<Tensor> {
    let (cin, h, w) = x.dims3()?;
    let padded = x.pad_with_zeros(1, 1, 1)?.pad_with_zeros(2, 1, 1)?;
    let mut taps = Vec::with_capacity(9);
    for ky in 0..3 {
        for kx in 0..3 {
            taps.push(padded.narrow(1, ky, h)?.narrow(2, kx, w)?);
        }
    }
    Ok(Tensor::stack(&taps, 1)?.reshape((cin, 9, h * w))?)
}

/// 3x3 same-padding convolution of a single (cin, h, w) map with an
/// equalized weight (cout, cin, 3, 3). Optional per-pixel input scales
/// (cin, h·w) or (cin, 1) and per-pixel output scales (cout, h·w) or
/// (cout, 1) realise regional modulation/demodulation exactly.
pub fn conv3x3(
    x: &Tensor,
    weight: &Tensor,
    in_scale: Option<&Tensor>,
    out_scale: Option<&Tensor>,
) -> Result<Tensor> {
    let (cin, h, w) = x.dims3()?;
    let cout = weight.dim(0)?;
    let mut cols = im2col3x3(x)?;
    if let Some(s) = in_scale {
        cols = cols.broadcast_mul(&s.unsqueeze(1)?)?;
    }
    let cols = cols.reshape((cin * 9, h * w))?;
    let wmat = (weight.reshape((cout, cin * 9))? * he_scale(cin * 9))?;
    let mut y = wmat.matmul(&cols)?;
    if let Some(s) = out_scale {
        y = y.broadcast_mul(s)?;
    }
    Ok(y.reshape((cout, h, w))?)
}

/// 1x1 convolution of (cin, h, w) with weight (cout, cin).
pub fn conv1x1(x: &Tensor, weight: &Tensor, in_scale: Option<&Tensor>) -> Result<Tensor> {
    let (cin, h, w) = x.dims3()?;
    let cout = weight.dim(0)?;
    let mut flat = x.reshape((cin, h * w))?;
    if let Some(s) = in_scale {
        flat = flat.broadcast_mul(s)?;
    }
    let wmat = (weight.reshape((cout, cin))? * he_scale(cin))?;
    Ok(wmat.matmul(&flat)?.reshape((cout, h, w))?)
}

pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_add(&bias.reshape((bias.dim(0)?, 1, 1))?)?)
}

/// Interpolation matrix (out × in) for half-pixel-centred linear resampling.
pub fn linear_resample_matrix(out: usize, inp: usize, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0f64; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let frac = src - lo as f64;
        m[i * inp + lo] += 1.0 - frac;
        m[i * inp + hi] += frac;
    }
    Ok(Tensor::from_vec(m, (out, inp), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Bilinear resize of a (c, h, w) map.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let mh = linear_resample_matrix(out_h, h, x.dtype())?;
    let mw = linear_resample_matrix(out_w, w, x.dtype())?;
    let y = x.reshape((c * h, w))?.matmul(&mw.t()?)?.reshape((c, h, out_w))?;
    // Batched matmul against a broadcast operand is unreliable in candle, so
    // fold channels into columns instead.
    let y = y.transpose(0, 1)?.contiguous()?.reshape((h, c * out_w))?;
    let z = mh.matmul(&y)?.reshape((out_h, c, out_w))?;
    Ok(z.transpose(0, 1)?.contiguous()?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, h, w) = x.dims3()?;
    resize_bilinear(x, 2 * h, 2 * w)
}

/// Box average over non-overlapping `factor`×`factor` blocks of (c, h, w).
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 1 {
        return Ok(x.clone());
    }
    let (c, h, w) = x.dims3()?;
    let y = x.reshape((c, h / factor, factor, w / factor, factor))?;
    Ok(y.mean(4)?.mean(2)?)
}

/// Area downsizing of a (c, h, w) image to `size`×`size` (size divides h, w).
pub fn downsize(x: &Tensor, size: usize) -> Result<Tensor> {
    let (_, h, _) = x.dims3()?;
    avg_pool(x, h / size)
}

pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let w = x.dim(D::Minus1)?;
    let idx: Vec<u32> = (0..w as u32).rev().collect();
    let idx = Tensor::from_vec(idx, w, x.device())?;
    Ok(x.index_select(&idx, x.rank() - 1)?)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// log(1 + exp(x)), stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok((pos + tail)?)
}

/// Label indices of a mask as a u32 tensor of length h·w.
pub fn label_index(labels: &[u8]) -> Result<Tensor> {
    let v: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let n = v.len();
    Ok(Tensor::from_vec(v, n, &Device::Cpu)?)
}

/// One-hot (C, h, w) encoding of a label map.
pub fn one_hot(labels: &[u8], height: usize, width: usize, num_categories: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0f32; num_categories * height * width];
    for (p, &l) in labels.iter().enumerate() {
        data[l as usize * height * width + p] = 1.0;
    }
    Ok(Tensor::from_vec(data, (num_categories, height, width), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Thin wrapper over candle's AdamW with zero weight decay (plain Adam).
pub struct Adam {
    inner: candle_nn::AdamW,
    base_lr: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, betas: (f64, f64)) -> Result<Self> {
        use candle_nn::Optimizer;
        let params = candle_nn::ParamsAdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        Ok(Self { inner: candle_nn::AdamW::new(vars, params)?, base_lr: lr })
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        use candle_nn::Optimizer;
        self.inner.set_learning_rate(lr);
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        use candle_nn::Optimizer;
        self.inner.backward_step(loss)?;
        Ok(())
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        use candle_nn::Optimizer;
        self.inner.step(grads)?;
        Ok(())
    }
}

/// Deterministic standard-normal tensor from an explicit rng.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}
