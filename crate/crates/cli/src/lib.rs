//! Command-line front end. `run` parses argv, dispatches one subcommand and
//! maps the outcome to an exit code: 0 success, 2 usage error, 1 failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use e4s_core::blend::{paste_back, CropBox};
use e4s_core::checkpoint::{Checkpoint, INPAINT, RECOLOR};
use e4s_core::config::{NoiseMode, Preset, RunConfig};
use e4s_core::encoder::RegionalStyles;
use e4s_core::generator::NoisePolicy;
use e4s_core::identity::{identity_harness, CommandEmbedder, Embedder, Protocol};
use e4s_core::imaging::{load_mask_png, save_mask_png, save_mismatch_png, FloatImage};
use e4s_core::inpaint::{train_inpaint, Inpainter, PairMode};
use e4s_core::mask::{CategoryTaxonomy, LabelMask};
use e4s_core::metrics::{evaluate_pair, MetricsReport};
use e4s_core::recolor::{lowpass_paste, to_grayscale, train_recolor, Recolorer};
use e4s_core::swap::{edit, refine, swap, CommandEnhancer, CommandHook, Enhancer, IdentityHook, ReenactmentHook, Refiners, SwapPlan};
use e4s_core::toy::{load_dataset, write_toy_dataset};
use e4s_core::train::{finetune_video, optimize_codes, train_rgi, RgiModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "e4s", version, about = "Region-aware face swapping toolkit")]
pub struct Cli {
    /// JSON run config (falls back to $RGI_E4S_CONFIG, then the preset).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Toy,
    Small,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Toy => Preset::Toy,
            PresetArg::Small => Preset::Small,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train encoder and generator on reconstruction.
    TrainRgi(TrainRgiArgs),
    /// Encode an image into regional style codes.
    Invert(InvertArgs),
    /// Refine codes by gradient descent and render the result.
    Optimize(OptimizeArgs),
    /// Swap the source face onto the target.
    Swap(SwapArgs),
    /// Re-render an image under an edited mask.
    Edit(EditArgs),
    /// Recolor an image towards a reference.
    Recolor(RecolorArgs),
    /// Train the reference-guided recolorer.
    TrainRecolor(TrainAuxArgs),
    /// Train the mismatch inpainter.
    TrainInpaint(TrainInpaintArgs),
    /// Reconstruction metrics (and optional identity retrieval).
    EvalRecon(EvalArgs),
    /// Write a synthetic face dataset.
    ToyData(ToyDataArgs),
    /// Fine-tune the generator on video frames.
    FinetuneVideo(FinetuneArgs),
}

#[derive(Args, Debug)]
pub struct TrainRgiArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Start from this checkpoint's generator and train its masked layers only.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// NDJSON training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// RGI checkpoint (falls back to paths.rgi_checkpoint).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InvertArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Codes as JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the reconstruction.
    #[arg(long)]
    pub recon: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Optimized rendering.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from these codes instead of the encoder's.
    #[arg(long)]
    pub codes: Option<PathBuf>,
    #[arg(long)]
    pub codes_out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SwapArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub source_mask: PathBuf,
    #[arg(long)]
    pub target_mask: PathBuf,
    /// Swapped face; OUT.mask.png and OUT.mismatch.png are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub recolor_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub inpaint_checkpoint: Option<PathBuf>,
    /// Skip recoloring and inpainting even when checkpoints are configured.
    #[arg(long)]
    pub naive: bool,
    /// Full frame to paste the swapped face back into.
    #[arg(long, requires = "crop")]
    pub frame: Option<PathBuf>,
    /// Face crop within the frame as TOP,LEFT,HEIGHT,WIDTH.
    #[arg(long, value_parser = parse_crop)]
    pub crop: Option<CropBox>,
}

#[derive(Args, Debug)]
pub struct EditArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub edited_mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RecolorArgs {
    /// Recolor checkpoint (falls back to paths.recolor_checkpoint).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub reference_mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep the input at edges whose Sobel magnitude reaches this value.
    #[arg(long)]
    pub sobel_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainAuxArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Erase,
    RgiEdit,
}

#[derive(Args, Debug)]
pub struct TrainInpaintArgs {
    #[command(flatten)]
    pub common: TrainAuxArgs,
    #[arg(long, value_enum, default_value = "erase")]
    pub mode: ModeArg,
    /// RGI checkpoint used by the rgi-edit mode.
    #[arg(long)]
    pub rgi_checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Ground-truth images.
    #[arg(long)]
    pub reference: PathBuf,
    /// Images to score, paired with references by file name.
    #[arg(long, conflicts_with = "checkpoint")]
    pub candidates: Option<PathBuf>,
    /// Score reconstructions of the references (needs NAME.mask.png).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Source faces for identity retrieval of the candidates.
    #[arg(long, requires = "candidates")]
    pub sources: Option<PathBuf>,
    /// Embedder command (falls back to hooks.embedder).
    #[arg(long)]
    pub embedder: Option<String>,
    #[arg(long, value_enum, default_value = "all-images")]
    pub protocol: ProtocolArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProtocolArg {
    AllImages,
    OnePerIdentity,
}

#[derive(Args, Debug)]
pub struct ToyDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory of frames with NAME.mask.png masks.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps_per_frame: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn parse_crop(s: &str) -> std::result::Result<CropBox, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad crop component `{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        &[top, left, height, width] => Ok(CropBox { top, left, height, width }),
        _ => Err("crop must be TOP,LEFT,HEIGHT,WIDTH".into()),
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut run = RunConfig::load(cli.config.as_deref(), cli.preset.map(Preset::from))?;
    if let Some(seed) = cli.seed {
        run.seed = seed;
    }
    Ok(run)
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut run = load_config(&cli)?;
    let tax = CategoryTaxonomy::default_faces();
    match cli.command {
        Command::TrainRgi(a) => {
            if let Some(n) = a.iterations {
                run.rgi_schedule.iterations = n;
            }
            let data = load_dataset(&a.data, run.model.num_categories)?;
            let pretrained = a.pretrained.as_deref().map(load_rgi_from).transpose()?;
            let mut log = open_log(a.log.as_deref().or(run.paths.training_log.as_deref()))?;
            let out = train_rgi(&data, &run, pretrained.as_ref().map(|m| &m.generator), run.seed, log_ref(&mut log))?;
            flush(log)?;
            Checkpoint::from_rgi(&run, &out.model, Some(&out.discriminator))?.save(&a.out)?;
            println!("trained {} steps; checkpoint written to {}", out.steps.len(), a.out.display());
        }
        Command::Invert(a) => {
            let model = load_rgi(&run, &a.model)?;
            let (image, mask) = load_pair(&a.image, &a.mask, &run)?;
            let styles = model.invert(&image, &mask)?;
            write_json(&a.out, &CodesFile::from_styles(&styles)?)?;
            if let Some(p) = a.recon {
                FloatImage::from_tensor(&model.generator.synthesize(&styles, &mask)?)?.save_png(&p)?;
            }
        }
        Command::Optimize(a) => {
            let model = load_rgi(&run, &a.model)?;
            let (image, mask) = load_pair(&a.image, &a.mask, &run)?;
            let init = match &a.codes {
                Some(p) => read_codes(p)?,
                None => model.invert(&image, &mask)?,
            };
            let steps = a.steps.unwrap_or(run.optimize.steps);
            let lr = a.lr.unwrap_or(run.optimize.lr);
            let styles = optimize_codes(&model.generator, &image, &mask, &init, steps, lr, &run)?;
            FloatImage::from_tensor(&model.generator.synthesize(&styles, &mask)?)?.save_png(&a.out)?;
            if let Some(p) = a.codes_out {
                write_json(&p, &CodesFile::from_styles(&styles)?)?;
            }
        }
        Command::Swap(a) => cmd_swap(&run, &tax, a)?,
        Command::Edit(a) => {
            let model = load_rgi(&run, &a.model)?;
            let (image, mask) = load_pair(&a.image, &a.mask, &run)?;
            let edited = load_mask_png(&a.edited_mask, run.model.num_categories)?;
            edit(&model, &image, &mask, &edited)?.save_png(&a.out)?;
        }
        Command::Recolor(a) => {
            let path = a.checkpoint.clone().or(run.paths.recolor_checkpoint.clone()).ok_or_else(|| anyhow!("no recolor checkpoint given"))?;
            let rc = load_recolorer(&path, &tax)?;
            let (image, mask) = load_pair(&a.image, &a.mask, &run)?;
            let (reference, ref_mask) = load_pair(&a.reference, &a.reference_mask, &run)?;
            let recolored = rc.recolor(&to_grayscale(&image), &mask, &reference, &ref_mask)?;
            lowpass_paste(&recolored, &image, a.sobel_threshold.unwrap_or(run.sobel_threshold))?.save_png(&a.out)?;
        }
        Command::TrainRecolor(a) => {
            if let Some(n) = a.iterations {
                run.recolor_schedule.iterations = n;
            }
            let data = load_dataset(&a.data, run.model.num_categories)?;
            let mut log = open_log(a.log.as_deref())?;
            let out = train_recolor(&data, &run, &tax, run.seed, log_ref(&mut log))?;
            flush(log)?;
            let mut ck = Checkpoint::new(run.clone());
            ck.add_store(RECOLOR, out.model.params())?;
            ck.save(&a.out)?;
            println!("trained {} steps; checkpoint written to {}", out.steps.len(), a.out.display());
        }
        Command::TrainInpaint(a) => {
            if let Some(n) = a.common.iterations {
                run.inpaint_schedule.iterations = n;
            }
            let data = load_dataset(&a.common.data, run.model.num_categories)?;
            let mode = match a.mode {
                ModeArg::Erase => PairMode::Erase,
                ModeArg::RgiEdit => PairMode::RgiEdit,
            };
            let rgi = match (mode, &a.rgi_checkpoint) {
                (PairMode::RgiEdit, Some(p)) => Some(load_rgi_from(p)?),
                (PairMode::RgiEdit, None) => bail!("--mode rgi-edit needs --rgi-checkpoint"),
                _ => None,
            };
            let mut log = open_log(a.common.log.as_deref())?;
            let out = train_inpaint(&data, &run, &tax, mode, rgi.as_ref(), run.seed, log_ref(&mut log))?;
            flush(log)?;
            let mut ck = Checkpoint::new(run.clone());
            ck.add_store(INPAINT, out.model.params())?;
            ck.save(&a.common.out)?;
            println!("trained {} steps; checkpoint written to {}", out.steps.len(), a.common.out.display());
        }
        Command::EvalRecon(a) => cmd_eval(&run, a)?,
        Command::ToyData(a) => {
            let files = write_toy_dataset(&a.out, a.n, a.resolution, run.seed)?;
            println!("wrote {} faces to {}", files.len(), a.out.display());
        }
        Command::FinetuneVideo(a) => {
            let path = rgi_path(&run, &a.model)?;
            let ck = Checkpoint::load(&path)?;
            ck.check_model(&run.model)?;
            let model = ck.rgi_model()?;
            let frames = load_dataset(&a.frames, run.model.num_categories)?;
            let mut log = open_log(a.log.as_deref())?;
            let steps = a.steps_per_frame.unwrap_or(run.finetune.steps_per_frame);
            let lr = a.lr.unwrap_or(run.finetune.lr);
            let tuned = finetune_video(&model, &frames, steps, lr, &run, log_ref(&mut log))?;
            flush(log)?;
            Checkpoint::from_rgi(&run, &tuned, ck.discriminator()?.as_ref())?.save(&a.out)?;
        }
    }
    Ok(())
}

fn cmd_swap(run: &RunConfig, tax: &CategoryTaxonomy, a: SwapArgs) -> Result<()> {
    let path = rgi_path(run, &a.model)?;
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    ck.check_model(&run.model)?;
    let mut model = ck.rgi_model()?;
    if run.noise == NoiseMode::Fresh {
        model.generator.set_noise(NoisePolicy::Fresh { seed: run.seed })?;
    }
    let (source, source_mask) = load_pair(&a.source, &a.source_mask, run)?;
    let (target, target_mask) = load_pair(&a.target, &a.target_mask, run)?;
    let hook: Box<dyn ReenactmentHook> = match &run.hooks.reenactment {
        Some(cmd) => Box::new(CommandHook::new(cmd.clone())),
        None => Box::new(IdentityHook),
    };
    let plan = SwapPlan::from_taxonomy(tax);
    let result = swap(&model, &source, &target, &source_mask, &target_mask, hook.as_ref(), &plan, tax)?;

    let recolorer = if a.naive {
        None
    } else {
        match a.recolor_checkpoint.clone().or(run.paths.recolor_checkpoint.clone()) {
            Some(p) => Some(load_recolorer(&p, tax)?),
            None if ck.has_prefix(RECOLOR) => Some(ck.recolorer(tax)?),
            None => None,
        }
    };
    let inpainter = if a.naive {
        None
    } else {
        match a.inpaint_checkpoint.clone().or(run.paths.inpaint_checkpoint.clone()) {
            Some(p) => Some(load_inpainter(&p)?),
            None if ck.has_prefix(INPAINT) => Some(ck.inpainter()?),
            None => None,
        }
    };
    let enhancer = run.hooks.enhancer.clone().map(|command| CommandEnhancer { command });
    let refiners = Refiners {
        recolor: recolorer.as_ref(),
        enhancer: enhancer.as_ref().map(|e| e as &dyn Enhancer),
        inpaint: inpainter.as_ref(),
        sobel_threshold: run.sobel_threshold,
    };
    let face = refine(&result, &target, &source_mask, &target_mask, &refiners)?;
    face.save_png(&a.out)?;
    save_mask_png(&result.swap_mask, &sibling(&a.out, "mask"))?;
    save_mismatch_png(&result.mismatch, &sibling(&a.out, "mismatch"))?;
    if let (Some(frame), Some(crop)) = (&a.frame, a.crop) {
        let frame = FloatImage::load_png(frame)?;
        let resized = face.resize(crop.height, crop.width)?;
        paste_back(&resized, &frame, &crop, run.blend.levels, run.blend.feather)?.save_png(&sibling(&a.out, "frame"))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    metrics: MetricsReport,
    identity: Option<e4s_core::identity::RetrievalReport>,
}

fn cmd_eval(run: &RunConfig, a: EvalArgs) -> Result<()> {
    let refs = list_images(&a.reference)?;
    if refs.is_empty() {
        bail!("no images in {}", a.reference.display());
    }
    let model = a.checkpoint.as_deref().map(|p| -> Result<RgiModel> {
        let ck = Checkpoint::load(p)?;
        ck.check_model(&run.model)?;
        Ok(ck.rgi_model()?)
    });
    let model = model.transpose()?;
    let mut pairs = Vec::with_capacity(refs.len());
    for r in &refs {
        let name = r.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let truth = FloatImage::load_png(r)?;
        let candidate = match (&a.candidates, &model) {
            (Some(dir), _) => FloatImage::load_png(&dir.join(&name)).with_context(|| format!("no candidate for {name}"))?,
            (None, Some(m)) => {
                let mask = load_mask_png(&e4s_core::toy::mask_path_for(r), run.model.num_categories)?;
                m.reconstruct(&truth, &mask)?
            }
            (None, None) => bail!("give --candidates DIR or --checkpoint CKPT"),
        };
        pairs.push(evaluate_pair(&name, &candidate, &truth)?);
    }
    let identity = match (&a.sources, a.embedder.clone().or(run.hooks.embedder.clone())) {
        (Some(src), emb) => {
            let embedder = emb.map(|command| CommandEmbedder { command });
            let protocol = match a.protocol {
                ProtocolArg::AllImages => Protocol::AllImages,
                ProtocolArg::OnePerIdentity => Protocol::OnePerIdentity,
            };
            let dir = a.candidates.as_ref().expect("clap enforces --candidates");
            Some(identity_harness(dir, src, embedder.as_ref().map(|e| e as &dyn Embedder), protocol)?)
        }
        (None, _) => None,
    };
    let report = EvalReport { metrics: MetricsReport::from_pairs(pairs)?, identity };
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

/// Serialized regional codes.
#[derive(Debug, Serialize, serde::Deserialize)]
pub struct CodesFile {
    pub shape: (usize, usize, usize),
    pub present: Vec<bool>,
    pub codes: Vec<f32>,
}

impl CodesFile {
    pub fn from_styles(s: &RegionalStyles) -> Result<Self> {
        Ok(Self { shape: s.shape(), present: s.present().to_vec(), codes: s.to_vec3()?.into_iter().flatten().flatten().collect() })
    }

    pub fn into_styles(self) -> Result<RegionalStyles> {
        let t = candle_core::Tensor::from_vec(self.codes, self.shape, &candle_core::Device::Cpu)?;
        Ok(RegionalStyles::new(t, self.present)?)
    }
}

fn read_codes(path: &Path) -> Result<RegionalStyles> {
    let f: CodesFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    f.into_styles()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// `out.png` -> `out.{tag}.png`.
pub fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{tag}.png"))
}

fn rgi_path(run: &RunConfig, a: &ModelArgs) -> Result<PathBuf> {
    a.checkpoint
        .clone()
        .or(run.paths.rgi_checkpoint.clone())
        .ok_or_else(|| anyhow!("no RGI checkpoint given (--checkpoint or paths.rgi_checkpoint)"))
}

fn load_rgi(run: &RunConfig, a: &ModelArgs) -> Result<RgiModel> {
    let path = rgi_path(run, a)?;
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    ck.check_model(&run.model)?;
    Ok(ck.rgi_model()?)
}

fn load_rgi_from(path: &Path) -> Result<RgiModel> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?.rgi_model()?)
}

fn load_recolorer(path: &Path, tax: &CategoryTaxonomy) -> Result<Recolorer> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?.recolorer(tax)?)
}

fn load_inpainter(path: &Path) -> Result<Inpainter> {
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?.inpainter()?)
}

fn load_pair(image: &Path, mask: &Path, run: &RunConfig) -> Result<(FloatImage, LabelMask)> {
    let img = FloatImage::load_png(image).with_context(|| format!("reading {}", image.display()))?;
    let m = load_mask_png(mask, run.model.num_categories).with_context(|| format!("reading {}", mask.display()))?;
    Ok((img, m))
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let n = p.to_string_lossy();
            n.ends_with(".png") && !n.ends_with(".mask.png")
        })
        .collect();
    out.sort();
    Ok(out)
}

fn open_log(path: Option<&Path>) -> Result<Option<BufWriter<File>>> {
    path.map(|p| Ok(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))).transpose()
}

fn log_ref(log: &mut Option<BufWriter<File>>) -> Option<&mut dyn Write> {
    log.as_mut().map(|w| w as &mut dyn Write)
}

fn flush(log: Option<BufWriter<File>>) -> Result<()> {
    if let Some(mut w) = log {
        w.flush()?;
    }
    Ok(())
}
