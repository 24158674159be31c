//! Model scale, training schedules, loss weights and run presets.
//!
//! A run configuration is a single JSON document. Files may be partial:
//! they are deep-merged over the named preset before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::mask::MismatchParams;

/// Environment variable consulted when no `--config` path is given.
pub const CONFIG_ENV: &str = "RGI_E4S_CONFIG";

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

/// Shared scale of the encoder and mask-guided generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub style_dim: usize,
    pub num_layers: usize,
    pub masked_layers: usize,
    pub num_categories: usize,
    pub encoder_scales: usize,
    /// Stride of the finest encoder feature map; coarser maps double it.
    pub encoder_finest_stride: usize,
    pub base_channels: usize,
    pub max_channels: usize,
}

pub fn layers_for_size(image_size: usize) -> usize {
    2 * image_size.trailing_zeros() as usize - 2
}

pub fn default_masked_layers(num_layers: usize) -> usize {
    num_layers.saturating_sub(5).max(1)
}

impl ModelConfig {
    /// Config with every derived quantity at its default.
    pub fn for_size(image_size: usize, style_dim: usize, num_categories: usize) -> Self {
        let num_layers = layers_for_size(image_size);
        Self {
            image_size,
            style_dim,
            num_layers,
            masked_layers: default_masked_layers(num_layers),
            num_categories,
            encoder_scales: 3.min(1 + (image_size / 8.min(image_size)).trailing_zeros() as usize),
            encoder_finest_stride: 8.min(image_size),
            base_channels: 16,
            max_channels: 64,
        }
    }

    pub fn paper() -> Self {
        Self {
            base_channels: 32,
            max_channels: 512,
            ..Self::for_size(1024, 512, 12)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size;
        if !s.is_power_of_two() || !(4..=1024).contains(&s) {
            return cfg_err(format!("image_size {s} must be a power of two in [4, 1024]"));
        }
        if self.num_layers != layers_for_size(s) {
            return cfg_err(format!(
                "num_layers must be 2*log2(image_size)-2 = {}",
                layers_for_size(s)
            ));
        }
        if self.masked_layers < 1 || self.masked_layers > self.num_layers {
            return cfg_err("masked_layers must lie in [1, num_layers]");
        }
        if self.style_dim == 0 || self.num_categories == 0 || self.num_categories > 256 {
            return cfg_err("style_dim and num_categories must be positive (C <= 256)");
        }
        if self.encoder_scales == 0 || !self.encoder_finest_stride.is_power_of_two() {
            return cfg_err("encoder_scales must be >= 1 and encoder_finest_stride a power of two");
        }
        if self.coarsest_stride() > s {
            return cfg_err("coarsest encoder stride exceeds image size");
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return cfg_err("channel schedule requires 0 < base_channels <= max_channels");
        }
        Ok(())
    }

    pub fn coarsest_stride(&self) -> usize {
        self.encoder_finest_stride << (self.encoder_scales - 1)
    }

    /// Channel width at a spatial resolution, doubling per halving of
    /// resolution up to `max_channels`.
    pub fn channels_at(&self, resolution: usize) -> usize {
        let depth = (self.image_size / resolution).trailing_zeros();
        (self.base_channels << depth).min(self.max_channels)
    }

    /// Encoder feature strides ordered coarse to fine.
    pub fn encoder_strides(&self) -> Vec<usize> {
        (0..self.encoder_scales)
            .rev()
            .map(|i| self.encoder_finest_stride << i)
            .collect()
    }

    /// Number of generator resolutions 4, 8, ..., image_size.
    pub fn num_resolutions(&self) -> usize {
        self.image_size.trailing_zeros() as usize - 1
    }

    /// Spatial size of the conv layer consuming code `layer`.
    pub fn layer_resolution(&self, layer: usize) -> usize {
        4 << layer.div_ceil(2).min(self.num_resolutions() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub lr: f64,
    pub betas: (f64, f64),
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub flip_prob: f64,
    /// The discriminator is updated after every `d_period`-th generator step.
    pub d_period: usize,
    pub iterations: usize,
    pub batch_size: usize,
}

impl TrainSchedule {
    pub fn paper_rgi() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            milestones: vec![100_000, 150_000],
            lr_decay: 0.1,
            flip_prob: 0.5,
            d_period: 15,
            iterations: 200_000,
            batch_size: 16,
        }
    }

    /// Learning rate at (1-based) step `t`: `lr * decay^(#milestones <= t)`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= t).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.d_period == 0 || self.batch_size == 0 {
            return cfg_err("schedule needs lr > 0, d_period >= 1, batch_size >= 1");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return cfg_err("milestones must be strictly increasing");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return cfg_err("flip_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lpips: f64,
    pub id: f64,
    pub parsing: f64,
    pub adv: f64,
    pub recolor_l2: f64,
    pub recolor_lpips: f64,
    pub inpaint_l2: f64,
    pub inpaint_lpips: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lpips: 0.8,
            id: 0.1,
            parsing: 0.1,
            adv: 0.01,
            recolor_l2: 1.0,
            recolor_lpips: 1.0,
            inpaint_l2: 1.0,
            inpaint_lpips: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lpips,
            self.id,
            self.parsing,
            self.adv,
            self.recolor_l2,
            self.recolor_lpips,
            self.inpaint_l2,
            self.inpaint_lpips,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return cfg_err("loss weights must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecolorConfig {
    pub resolution: usize,
    pub feature_dim: usize,
    pub fpn_channels: usize,
    pub unet_channels: usize,
    pub num_categories: usize,
}

impl RecolorConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 16 {
            return cfg_err("recolor resolution must be a power of two >= 16");
        }
        if self.feature_dim == 0 || self.fpn_channels == 0 || self.unet_channels == 0 || self.num_categories == 0 {
            return cfg_err("recolor widths must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintConfig {
    pub resolution: usize,
    pub channels: usize,
    pub max_channels: usize,
    pub levels: usize,
    pub ratio_hidden: usize,
}

impl InpaintConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.levels == 0 || (self.resolution >> self.levels) < 1 {
            return cfg_err("inpaint resolution must be a power of two divisible by 2^levels");
        }
        if self.channels == 0 || self.max_channels < self.channels || self.ratio_hidden == 0 {
            return cfg_err("inpaint widths must be positive");
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        (self.channels << level).min(self.max_channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    Zero,
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps_per_frame: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendConfig {
    pub levels: usize,
    pub feather: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub rgi_checkpoint: Option<PathBuf>,
    pub recolor_checkpoint: Option<PathBuf>,
    pub inpaint_checkpoint: Option<PathBuf>,
    pub training_log: Option<PathBuf>,
}

/// External commands; `None` selects the identity / unsupported default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hooks {
    /// `cmd SOURCE TARGET OUT`, writing the driven face to OUT.
    pub reenactment: Option<String>,
    /// `cmd IN OUT`, writing an enhanced copy of IN to OUT.
    pub enhancer: Option<String>,
    /// `cmd IMAGE`, printing a JSON array of floats on stdout.
    pub embedder: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub rgi_schedule: TrainSchedule,
    pub recolor: RecolorConfig,
    pub recolor_schedule: TrainSchedule,
    pub inpaint: InpaintConfig,
    pub inpaint_schedule: TrainSchedule,
    pub weights: LossWeights,
    /// LPIPS scales; entries above the working resolution are dropped.
    pub lpips_scales: Vec<usize>,
    pub optimize: OptimizeConfig,
    pub finetune: FinetuneConfig,
    pub mismatch: MismatchParams,
    pub blend: BlendConfig,
    pub sobel_threshold: f64,
    pub noise: NoiseMode,
    pub paths: Paths,
    pub hooks: Hooks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Small,
    Paper,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Preset::Toy),
            "small" => Ok(Preset::Small),
            "paper" => Ok(Preset::Paper),
            other => cfg_err(format!("unknown preset `{other}` (expected toy, small or paper)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Small => "small",
            Preset::Paper => "paper",
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Toy => Self::toy(),
            Preset::Small => Self::small(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn paper() -> Self {
        let rgi = TrainSchedule::paper_rgi();
        let aux = TrainSchedule { d_period: 1, ..rgi.clone() };
        Self {
            preset: "paper".into(),
            seed: 0,
            model: ModelConfig::paper(),
            rgi_schedule: rgi,
            recolor: RecolorConfig {
                resolution: 256,
                feature_dim: 64,
                fpn_channels: 64,
                unet_channels: 32,
                num_categories: 12,
            },
            recolor_schedule: aux.clone(),
            inpaint: InpaintConfig { resolution: 256, channels: 32, max_channels: 256, levels: 4, ratio_hidden: 64 },
            inpaint_schedule: aux,
            weights: LossWeights::default(),
            lpips_scales: vec![256, 512, 1024],
            optimize: OptimizeConfig { steps: 50, lr: 1e-2 },
            finetune: FinetuneConfig { steps_per_frame: 200, lr: 1e-3 },
            mismatch: MismatchParams { band_width: 24, blob_count: 6, blob_radius_min: 24.0, blob_radius_max: 96.0 },
            blend: BlendConfig { levels: 5, feather: 8 },
            sobel_threshold: 0.05,
            noise: NoiseMode::Zero,
            paths: Paths::default(),
            hooks: Hooks::default(),
        }
    }

    pub fn small() -> Self {
        let mut c = Self::paper();
        c.preset = "small".into();
        c.model = ModelConfig { base_channels: 16, max_channels: 128, ..ModelConfig::for_size(256, 128, 12) };
        c.rgi_schedule.iterations = 20_000;
        c.rgi_schedule.milestones = vec![10_000, 15_000];
        c.rgi_schedule.batch_size = 4;
        for s in [&mut c.recolor_schedule, &mut c.inpaint_schedule] {
            s.iterations = 10_000;
            s.milestones = vec![];
            s.batch_size = 4;
        }
        c.lpips_scales = vec![64, 128, 256];
        c.mismatch = MismatchParams { band_width: 6, blob_count: 5, blob_radius_min: 6.0, blob_radius_max: 24.0 };
        c
    }

    /// Desk-scale preset for CPU experiments and CI on 64x64 toy faces.
    pub fn toy() -> Self {
        let mut c = Self::paper();
        c.preset = "toy".into();
        c.model = ModelConfig {
            encoder_finest_stride: 2,
            masked_layers: layers_for_size(64),
            base_channels: 16,
            max_channels: 64,
            ..ModelConfig::for_size(64, 32, 12)
        };
        c.rgi_schedule = TrainSchedule {
            lr: 2e-3,
            milestones: vec![1_500],
            iterations: 2_000,
            batch_size: 1,
            ..TrainSchedule::paper_rgi()
        };
        c.recolor = RecolorConfig { resolution: 64, feature_dim: 32, fpn_channels: 16, unet_channels: 16, num_categories: 12 };
        c.recolor_schedule = TrainSchedule {
            lr: 1e-2,
            milestones: vec![],
            iterations: 300,
            batch_size: 1,
            d_period: 1,
            ..TrainSchedule::paper_rgi()
        };
        c.inpaint = InpaintConfig { resolution: 64, channels: 16, max_channels: 32, levels: 4, ratio_hidden: 64 };
        c.inpaint_schedule = TrainSchedule { lr: 2e-3, ..c.recolor_schedule.clone() };
        c.lpips_scales = vec![16, 32, 64];
        c.mismatch = MismatchParams { band_width: 3, blob_count: 4, blob_radius_min: 3.0, blob_radius_max: 8.0 };
        c.blend = BlendConfig { levels: 4, feather: 4 };
        c
    }

    pub fn validate(&self) -> Result<()> {
        Preset::parse(&self.preset)?;
        self.model.validate()?;
        self.rgi_schedule.validate()?;
        self.recolor.validate()?;
        self.recolor_schedule.validate()?;
        self.inpaint.validate()?;
        self.inpaint_schedule.validate()?;
        self.weights.validate()?;
        if self.recolor.num_categories != self.model.num_categories {
            return cfg_err("recolor.num_categories must match model.num_categories");
        }
        if self.lpips_scales.is_empty() || self.lpips_scales.iter().any(|s| !s.is_power_of_two()) {
            return cfg_err("lpips_scales must be non-empty powers of two");
        }
        if !(self.sobel_threshold >= 0.0) {
            return cfg_err("sobel_threshold must be non-negative");
        }
        if self.blend.levels == 0 {
            return cfg_err("blend.levels must be >= 1");
        }
        Ok(())
    }

    /// Preset (explicit or from the file's `preset` key, default toy) with
    /// the JSON document merged over it.
    pub fn from_json_str(text: &str, preset: Option<Preset>) -> Result<Self> {
        let overlay: Value = serde_json::from_str(text)?;
        let file_preset = overlay.get("preset").and_then(Value::as_str).map(Preset::parse).transpose()?;
        let base = Self::preset(preset.or(file_preset).unwrap_or(Preset::Toy));
        let mut merged = serde_json::to_value(&base)?;
        merge(&mut merged, overlay);
        if let Some(p) = preset {
            merged["preset"] = Value::String(p.name().into());
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolves the configuration: `--config` path, else the environment
    /// fallback, else the preset alone.
    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self> {
        let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        match path.map(Path::to_path_buf).or(env_path) {
            Some(p) => {
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_json_str(&text, preset)
            }
            None => {
                let cfg = Self::preset(preset.unwrap_or(Preset::Toy));
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    /// LPIPS scales clipped to the working resolution (never empty).
    pub fn lpips_scales_for(&self, resolution: usize) -> Vec<usize> {
        clip_scales(&self.lpips_scales, resolution)
    }
}

pub fn clip_scales(scales: &[usize], resolution: usize) -> Vec<usize> {
    let v: Vec<usize> = scales.iter().copied().filter(|&s| s <= resolution).collect();
    if v.is_empty() {
        vec![resolution]
    } else {
        v
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_arithmetic() {
        assert_eq!(layers_for_size(1024), 18);
        assert_eq!(default_masked_layers(18), 13);
        assert_eq!(default_masked_layers(2), 1);
        let p = ModelConfig::paper();
        p.validate().unwrap();
        assert_eq!((p.num_layers, p.masked_layers, p.style_dim, p.num_categories), (18, 13, 512, 12));
        assert_eq!(p.encoder_strides(), vec![32, 16, 8]);
        let t = RunConfig::toy().model;
        assert_eq!(t.num_layers, 10);
        assert_eq!(t.layer_resolution(0), 4);
        assert_eq!(t.layer_resolution(1), 8);
        assert_eq!(t.layer_resolution(2), 8);
        assert_eq!(t.layer_resolution(8), 64);
        assert_eq!(t.layer_resolution(9), 64);
        assert_eq!(t.channels_at(64), 16);
        assert_eq!(t.channels_at(4), 64);
    }

    #[test]
    fn invalid_model_configs() {
        let mut c = ModelConfig::for_size(64, 8, 4);
        c.masked_layers = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::for_size(64, 8, 4);
        c.num_layers = 9;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::for_size(64, 8, 4);
        c.image_size = 48;
        assert!(c.validate().is_err());
    }

    #[test]
    fn milestone_schedule() {
        let s = TrainSchedule { milestones: vec![10, 20], ..TrainSchedule::paper_rgi() };
        assert_eq!(s.lr_at(1), 1e-4);
        assert_eq!(s.lr_at(9), 1e-4);
        assert_eq!(s.lr_at(10), 1e-4 * 0.1);
        assert_eq!(s.lr_at(25), 1e-4 * 0.1 * 0.1);
        let bad = TrainSchedule { milestones: vec![5, 5], ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn presets_validate_and_merge() {
        for p in [Preset::Toy, Preset::Small, Preset::Paper] {
            RunConfig::preset(p).validate().unwrap();
        }
        let c = RunConfig::from_json_str(r#"{"preset":"toy","seed":9,"rgi_schedule":{"iterations":5}}"#, None).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.rgi_schedule.iterations, 5);
        assert_eq!(c.rgi_schedule.d_period, 15);
        assert!(RunConfig::from_json_str(r#"{"bogus":1}"#, None).is_err());
        assert!(RunConfig::from_json_str(r#"{"model":{"masked_layers":99}}"#, None).is_err());
        assert_eq!(clip_scales(&[256, 512, 1024], 64), vec![64]);
        assert_eq!(clip_scales(&[16, 32, 64], 64), vec![16, 32, 64]);
    }

    #[test]
    fn paper_defaults() {
        let w = LossWeights::default();
        assert_eq!((w.lpips, w.id, w.parsing, w.adv), (0.8, 0.1, 0.1, 0.01));
        assert_eq!((w.recolor_l2, w.recolor_lpips), (1.0, 1.0));
        assert_eq!((w.inpaint_l2, w.inpaint_lpips), (1.0, 5.0));
        let p = RunConfig::paper();
        assert_eq!(p.rgi_schedule.lr, 1e-4);
        assert_eq!(p.rgi_schedule.betas, (0.9, 0.999));
        assert_eq!(p.rgi_schedule.d_period, 15);
        assert_eq!(p.rgi_schedule.milestones, vec![100_000, 150_000]);
        assert_eq!(p.optimize.steps, 50);
        assert_eq!(p.optimize.lr, 1e-2);
        assert_eq!(p.finetune.steps_per_frame, 200);
        assert_eq!(p.finetune.lr, 1e-3);
    }
}
