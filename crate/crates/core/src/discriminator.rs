//! Residual critic producing one realness logit per image.

use candle_core::{DType, Tensor};

use crate::config::ModelConfig;
use crate::error::{arg_err, Result};
use crate::nn::{self, Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Discriminator {
    size: usize,
    params: ParamStore,
    blocks: Vec<usize>,
}

fn width(cfg: &ModelConfig, res: usize) -> usize {
    (cfg.channels_at(res) / 2).max(4)
}

impl Discriminator {
    pub fn init(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut params = ParamStore::new(dtype);
        let mut init = Init::new(&mut params, seed);
        let size = cfg.image_size;
        init.linear("from_rgb", width(cfg, size), 3, 0.0)?;
        let mut blocks = Vec::new();
        let mut res = size;
        while res > 4 {
            let (cin, cout) = (width(cfg, res), width(cfg, res / 2));
            init.conv(&format!("b{res}.conv1"), cin, cin, 3, 0.0)?;
            init.conv(&format!("b{res}.conv2"), cout, cin, 3, 0.0)?;
            init.normal(&format!("b{res}.skip.weight"), &[cout, cin], 1.0)?;
            blocks.push(res);
            res /= 2;
        }
        let c4 = width(cfg, 4);
        init.conv("out.conv", c4, c4, 3, 0.0)?;
        init.linear("out.fc", c4, c4 * 16, 0.0)?;
        init.linear("out.logit", 1, c4, 0.0)?;
        Ok(Self { size, params, blocks })
    }

    pub fn from_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let mut d = Self::init(cfg, 0, params.dtype())?;
        for name in d.params.names() {
            if d.params.get(name)?.dims() != params.get(name)?.dims() {
                return arg_err(format!("discriminator parameter `{name}` has the wrong shape"));
            }
        }
        d.params = params;
        Ok(d)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Logit of shape (1,) for a (3, S, S) image in [0, 1].
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (_, h, w) = image.dims3()?;
        if h != self.size || w != self.size {
            return arg_err(format!("discriminator expects {0}x{0} images", self.size));
        }
        let p = &self.params;
        let x = ((image * 2.0)? - 1.0)?;
        let mut x = nn::lrelu_gain(&nn::add_bias(
            &nn::conv1x1(&x, p.get("from_rgb.weight")?, None)?,
            p.get("from_rgb.bias")?,
        )?)?;
        for res in &self.blocks {
            let conv = |x: &Tensor, name: &str| -> Result<Tensor> {
                let y = nn::conv3x3(x, p.get(&format!("b{res}.{name}.weight"))?, None, None)?;
                nn::lrelu_gain(&nn::add_bias(&y, p.get(&format!("b{res}.{name}.bias"))?)?)
            };
            let main = nn::avg_pool(&conv(&conv(&x, "conv1")?, "conv2")?, 2)?;
            let skip = nn::conv1x1(&nn::avg_pool(&x, 2)?, p.get(&format!("b{res}.skip.weight"))?, None)?;
            x = ((main + skip)? * std::f64::consts::FRAC_1_SQRT_2)?;
        }
        let y = nn::conv3x3(&x, p.get("out.conv.weight")?, None, None)?;
        let y = nn::lrelu_gain(&nn::add_bias(&y, p.get("out.conv.bias")?)?)?;
        let flat = y.flatten_all()?.unsqueeze(0)?;
        let h = nn::lrelu_gain(&nn::linear(&flat, p.get("out.fc.weight")?, Some(p.get("out.fc.bias")?))?)?;
        Ok(nn::linear(&h, p.get("out.logit.weight")?, Some(p.get("out.logit.bias")?))?.flatten_all()?)
    }

    /// Order-sensitive digest of all parameter values, for logging.
    pub fn checksum(&self) -> Result<f64> {
        let mut acc = 0.0;
        for (i, (_, _, data)) in self.params.export()?.iter().enumerate() {
            for (j, v) in data.iter().enumerate() {
                acc += *v as f64 * (1.0 + ((i * 31 + j) % 97) as f64 / 97.0);
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_shape_and_size_check() {
        let cfg = ModelConfig { base_channels: 4, max_channels: 8, ..ModelConfig::for_size(16, 4, 2) };
        let d = Discriminator::init(&cfg, 1, DType::F32).unwrap();
        let img = Tensor::full(0.5f32, (3, 16, 16), &candle_core::Device::Cpu).unwrap();
        assert_eq!(d.forward(&img).unwrap().dims(), &[1]);
        let small = Tensor::full(0.5f32, (3, 8, 8), &candle_core::Device::Cpu).unwrap();
        assert!(d.forward(&small).is_err());
        let again = Discriminator::init(&cfg, 1, DType::F32).unwrap();
        assert_eq!(d.checksum().unwrap(), again.checksum().unwrap());
    }
}
