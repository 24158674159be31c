//! Face swapping by regional style exchange and mask recomposition, plus
//! mask-driven editing.

use std::path::PathBuf;
use std::process::Command;

use candle_core::{Device, Tensor};

use crate::encoder::RegionalStyles;
use crate::error::{arg_err, Error, Result};
use crate::imaging::FloatImage;
use crate::mask::{recompose_swap_mask, CategoryTaxonomy, CategoryId, LabelMask, MismatchMask};
use crate::inpaint::Inpainter;
use crate::recolor::{lowpass_paste, to_grayscale, Recolorer};
use crate::train::RgiModel;

/// Which rows of the swapped style tensor come from the driven face.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapPlan {
    from_driven: Vec<bool>,
}

impl SwapPlan {
    pub fn new(num_categories: usize, from_driven: &[CategoryId]) -> Result<Self> {
        let mut flags = vec![false; num_categories];
        for &id in from_driven {
            if id as usize >= num_categories {
                return arg_err(format!("swap plan category {id} out of range"));
            }
            flags[id as usize] = true;
        }
        Ok(Self { from_driven: flags })
    }

    /// The taxonomy's exchange list.
    pub fn from_taxonomy(tax: &CategoryTaxonomy) -> Self {
        Self::new(tax.num_categories(), &tax.exchange_ids()).expect("taxonomy ids are in range")
    }

    pub fn num_categories(&self) -> usize {
        self.from_driven.len()
    }

    pub fn takes_from_driven(&self, id: CategoryId) -> bool {
        self.from_driven[id as usize]
    }

    pub fn from_target(&self) -> Vec<CategoryId> {
        (0..self.from_driven.len()).filter(|&j| !self.from_driven[j]).map(|j| j as CategoryId).collect()
    }
}

/// Row-wise merge: driven rows where the plan says so, target rows elsewhere.
pub fn exchange_styles(driven: &RegionalStyles, target: &RegionalStyles, plan: &SwapPlan) -> Result<RegionalStyles> {
    if driven.shape() != target.shape() || driven.num_categories() != plan.num_categories() {
        return arg_err("exchange_styles operands disagree in shape or category count");
    }
    let c = plan.num_categories();
    let both = Tensor::cat(&[driven.codes(), &target.codes().to_dtype(driven.codes().dtype())?], 0)?;
    let idx: Vec<u32> = (0..c).map(|j| if plan.from_driven[j] { j as u32 } else { (c + j) as u32 }).collect();
    let codes = both.index_select(&Tensor::from_vec(idx, c, &Device::Cpu)?, 0)?;
    let present = (0..c)
        .map(|j| if plan.from_driven[j] { driven.present()[j] } else { target.present()[j] })
        .collect();
    RegionalStyles::new(codes, present)
}

/// Produces the driven face: the source re-posed to match the target.
pub trait ReenactmentHook: Send + Sync {
    fn reenact(&self, source: &FloatImage, target: &FloatImage) -> Result<FloatImage>;
}

/// Pass-through: the source is used as the driven face.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityHook;

impl ReenactmentHook for IdentityHook {
    fn reenact(&self, source: &FloatImage, _target: &FloatImage) -> Result<FloatImage> {
        Ok(source.clone())
    }
}

/// External program invoked as `COMMAND SOURCE.png TARGET.png OUT.png`.
#[derive(Debug, Clone)]
pub struct CommandHook {
    pub command: String,
    pub workdir: PathBuf,
}

impl CommandHook {
    pub fn new(command: impl Into<String>) -> Self {
        Self { command: command.into(), workdir: std::env::temp_dir() }
    }
}

/// Runs `command` with file arguments, mapping failures to hook errors.
pub fn run_command(command: &str, args: &[&std::path::Path]) -> Result<std::process::Output> {
    let mut parts = command.split_whitespace();
    let program = parts.next().ok_or_else(|| Error::Hook { command: command.into(), message: "empty command".into() })?;
    let out = Command::new(program)
        .args(parts)
        .args(args)
        .output()
        .map_err(|e| Error::Hook { command: command.into(), message: e.to_string() })?;
    if !out.status.success() {
        return Err(Error::Hook {
            command: command.into(),
            message: format!("exit status {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim()),
        });
    }
    Ok(out)
}

impl ReenactmentHook for CommandHook {
    fn reenact(&self, source: &FloatImage, target: &FloatImage) -> Result<FloatImage> {
        let dir = self.workdir.join(format!("e4s-hook-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let (s, t, o) = (dir.join("source.png"), dir.join("target.png"), dir.join("driven.png"));
        source.save_png(&s)?;
        target.save_png(&t)?;
        run_command(&self.command, &[&s, &t, &o])?;
        let driven = FloatImage::load_png(&o)?;
        let _ = std::fs::remove_dir_all(&dir);
        if !driven.same_shape(source) {
            return Err(Error::Hook { command: self.command.clone(), message: "driven image size differs from source".into() });
        }
        Ok(driven)
    }
}

#[derive(Debug, Clone)]
pub struct SwapResult {
    pub naive: FloatImage,
    pub swap_mask: LabelMask,
    pub mismatch: MismatchMask,
    pub styles: RegionalStyles,
}

/// Naive swap: encode driven and target, exchange codes, recompose masks
/// and synthesize. Under a pass-through hook the driven mask is the
/// source mask.
#[allow(clippy::too_many_arguments)]
pub fn swap(
    model: &RgiModel,
    source: &FloatImage,
    target: &FloatImage,
    source_mask: &LabelMask,
    target_mask: &LabelMask,
    hook: &dyn ReenactmentHook,
    plan: &SwapPlan,
    taxonomy: &CategoryTaxonomy,
) -> Result<SwapResult> {
    let size = model.generator.config().image_size;
    for (what, h, w) in [
        ("source", source.height(), source.width()),
        ("target", target.height(), target.width()),
        ("source mask", source_mask.height(), source_mask.width()),
        ("target mask", target_mask.height(), target_mask.width()),
    ] {
        if h != size || w != size {
            return arg_err(format!("{what} must be {size}x{size}, got {h}x{w}"));
        }
    }
    let driven = hook.reenact(source, target)?;
    let s_d = model.invert(&driven, source_mask)?;
    let s_t = model.invert(target, target_mask)?;
    let styles = exchange_styles(&s_d, &s_t, plan)?;
    let (swap_mask, mismatch) = recompose_swap_mask(source_mask, target_mask, taxonomy)?;
    let naive = FloatImage::from_tensor(&model.generator.synthesize(&styles, &swap_mask)?)?;
    Ok(SwapResult { naive, swap_mask, mismatch, styles })
}

/// Re-renders `image` with its own codes under an edited layout.
pub fn edit(model: &RgiModel, image: &FloatImage, mask: &LabelMask, edited_mask: &LabelMask) -> Result<FloatImage> {
    if !mask.same_shape(edited_mask) || mask.height() != image.height() || mask.width() != image.width() {
        return arg_err("edit requires image, mask and edited mask of one size");
    }
    let styles = model.invert(image, mask)?;
    FloatImage::from_tensor(&model.generator.synthesize(&styles, edited_mask)?)
}

/// Optional post-processing of the naive swap.
#[derive(Clone, Copy, Default)]
pub struct Refiners<'a> {
    pub recolor: Option<&'a Recolorer>,
    /// Applied to the recolored face before the low-pass paste.
    pub enhancer: Option<&'a dyn Enhancer>,
    pub inpaint: Option<&'a Inpainter>,
    pub sobel_threshold: f64,
}

/// Image-to-image enhancement hook (e.g. face super-resolution).
pub trait Enhancer: Send + Sync {
    fn enhance(&self, image: &FloatImage) -> Result<FloatImage>;
}

/// External program invoked as `COMMAND IN.png OUT.png`.
#[derive(Debug, Clone)]
pub struct CommandEnhancer {
    pub command: String,
}

impl Enhancer for CommandEnhancer {
    fn enhance(&self, image: &FloatImage) -> Result<FloatImage> {
        let dir = std::env::temp_dir().join(format!("e4s-enhance-{}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let (i, o) = (dir.join("in.png"), dir.join("out.png"));
        image.save_png(&i)?;
        run_command(&self.command, &[&i, &o])?;
        let out = FloatImage::load_png(&o)?;
        let _ = std::fs::remove_dir_all(&dir);
        if !out.same_shape(image) {
            return Err(Error::Hook { command: self.command.clone(), message: "enhanced image size differs".into() });
        }
        Ok(out)
    }
}

/// Recolors the naive swap towards the target's colours (keeping the naive
/// pixels near edges), then inpaints the mismatch region.
pub fn refine(
    result: &SwapResult,
    target: &FloatImage,
    driven_mask: &LabelMask,
    target_mask: &LabelMask,
    refiners: &Refiners<'_>,
) -> Result<FloatImage> {
    let mut out = result.naive.clone();
    if let Some(rc) = refiners.recolor {
        let mut recolored = rc.recolor(&to_grayscale(&out), driven_mask, target, target_mask)?;
        if let Some(e) = refiners.enhancer {
            recolored = e.enhance(&recolored)?;
        }
        out = lowpass_paste(&recolored, &out, refiners.sobel_threshold)?;
    }
    if let Some(ip) = refiners.inpaint {
        out = ip.inpaint(&out, &result.mismatch)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn rows(c: usize, base: f64) -> RegionalStyles {
        let data: Vec<f64> = (0..c * 2 * 3).map(|i| base + (i / 6) as f64).collect();
        RegionalStyles::new(Tensor::from_vec(data, (c, 2, 3), &Device::Cpu).unwrap(), vec![true; c]).unwrap()
    }

    #[test]
    fn exchange_gathers_rows() {
        let (d, t) = (rows(4, 0.0), rows(4, 100.0));
        let plan = SwapPlan::new(4, &[0, 2]).unwrap();
        let out = exchange_styles(&d, &t, &plan).unwrap().to_vec3().unwrap();
        let want = [0.0, 101.0, 2.0, 103.0];
        for j in 0..4 {
            assert!(out[j].iter().flatten().all(|&v| v as f64 == want[j]));
        }
        let all = SwapPlan::new(4, &[0, 1, 2, 3]).unwrap();
        assert_eq!(exchange_styles(&d, &t, &all).unwrap().to_vec3().unwrap(), d.to_vec3().unwrap());
        let back = exchange_styles(&t, &d, &plan).unwrap();
        let twice = exchange_styles(&exchange_styles(&d, &t, &plan).unwrap(), &back, &plan).unwrap();
        assert_eq!(twice.to_vec3().unwrap(), d.to_vec3().unwrap());
        assert!(exchange_styles(&d, &rows(3, 0.0), &plan).is_err());
        let _ = DType::F64;
    }

    #[test]
    fn taxonomy_plan_partitions() {
        let tax = CategoryTaxonomy::default_faces();
        let plan = SwapPlan::from_taxonomy(&tax);
        let names: Vec<&str> = plan.from_target().iter().map(|&j| tax.names()[j as usize].as_str()).collect();
        assert_eq!(names, ["background", "hair", "eyeglass", "ear rings"]);
    }
}
