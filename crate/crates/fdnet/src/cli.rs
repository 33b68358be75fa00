//! Command-line front end: layered run configuration and the synth,
//! train, eval, predict and ablate commands.
//!
//! Configuration precedence is defaults, then the TOML file given with
//! `--config`, then individual flags. Unknown keys in the file are
//! rejected, and every command writes the effective configuration next
//! to its artifacts.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use crate::ablation::run_ablation;
use crate::backbone::BackboneKind;
use crate::data::phantom::{generate_set, PhantomMeta, PhantomSpec};
use crate::data::{load_dataset, load_gray, resize_bilinear, save_gray, DatasetHandle, Split};
use crate::error::{FdError, Result};
use crate::metrics::evaluate;
use crate::model::ModelConfig;
use crate::training::{train, Checkpoint, TrainConfig};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root in the images/masks layout.
    pub root: Option<PathBuf>,
    pub split: Split,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub train_count: usize,
    pub test_count: usize,
    pub canvas_size: (usize, usize),
    pub cell_count: usize,
    pub interference_count: usize,
    pub cell_contrast: f64,
    pub interference_contrast: f64,
    pub drop_overlap: f64,
    pub structure_scale: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let spec = PhantomSpec::new((256, 256), 6, 3, 0);
        Self {
            train_count: 24,
            test_count: 8,
            canvas_size: spec.canvas_size,
            cell_count: spec.cell_count,
            interference_count: spec.interference_count,
            cell_contrast: spec.cell_contrast,
            interference_contrast: spec.interference_contrast,
            drop_overlap: spec.drop_overlap,
            structure_scale: spec.structure_scale,
        }
    }
}

impl SynthSection {
    fn spec(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            canvas_size: self.canvas_size,
            cell_count: self.cell_count,
            interference_count: self.interference_count,
            cell_contrast: self.cell_contrast,
            interference_contrast: self.interference_contrast,
            drop_overlap: self.drop_overlap,
            structure_scale: self.structure_scale,
            seed,
        }
    }
}

/// Training knobs as they appear in the file; model and seed are
/// spliced in from their own sections when the full config is built.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay_period: usize,
    pub lr_decay_factor: f64,
    pub resize: (usize, usize),
    pub checkpoint_every: usize,
    pub flip_augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr0: t.lr0,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr_decay_period: t.lr_decay_period,
            lr_decay_factor: t.lr_decay_factor,
            resize: t.resize,
            checkpoint_every: t.checkpoint_every,
            flip_augment: t.flip_augment,
        }
    }
}

impl TrainSection {
    fn train_config(&self, model: ModelConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_decay_period: self.lr_decay_period,
            lr_decay_factor: self.lr_decay_factor,
            resize: self.resize,
            seed,
            checkpoint_every: self.checkpoint_every,
            flip_augment: self.flip_augment,
            model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub threshold: f64,
}

impl Default for PredictSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            image: None,
            threshold: 0.5,
        }
    }
}

/// Desk-scale ablation defaults: tiny backbone, 256x256 phantoms, 40
/// epochs. Deliberately far below the full training regime; the point
/// is directional comparison, not headline numbers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub backbone: BackboneKind,
    pub cif_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub resize: (usize, usize),
    pub canvas_size: (usize, usize),
    pub train_count: usize,
    pub test_count: usize,
    pub cell_count: usize,
    pub interference_count: usize,
    pub threshold: f64,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Tiny,
            cif_width: 16,
            epochs: 40,
            batch_size: 4,
            resize: (256, 256),
            canvas_size: (256, 256),
            train_count: 8,
            test_count: 4,
            cell_count: 6,
            interference_count: 5,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub model: ModelConfig,
    pub eval: EvalSection,
    pub predict: PredictSection,
    pub ablate: AblateSection,
}

impl RunConfig {
    /// Defaults, overlaid by the TOML file when one is given. Unknown
    /// keys anywhere in the file are an error.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| FdError::io(p.to_path_buf(), e))?;
                toml::from_str(&text)
                    .map_err(|e| FdError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("fdnet_out"))
    }

    fn write_effective(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| FdError::io(dir.to_path_buf(), e))?;
        let path = dir.join("effective_config.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| FdError::io(path, e))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fdnet",
    about = "Frequency-domain segmentation: synthetic data, training, evaluation and ablations",
    version
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice in the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset in the images/masks layout.
    Synth(SynthArgs),
    /// Train on a dataset and write checkpoints plus a step log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Segment one image with a checkpoint; writes mask and overlay.
    Predict(PredictArgs),
    /// Train and score the five component configurations.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Training samples to generate.
    #[arg(long)]
    pub train: Option<usize>,
    /// Test samples to generate.
    #[arg(long)]
    pub test: Option<usize>,
    /// Overwrite an existing non-empty target directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root (images/masks layout).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset split to score (train or test).
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Grayscale PNG to segment.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset root; omitted, phantoms are generated in memory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl std::str::FromStr for BackboneKind {
    type Err = FdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet50_like" => Ok(BackboneKind::Resnet50Like),
            "tiny" => Ok(BackboneKind::Tiny),
            other => Err(FdError::Config(format!("unknown backbone {other}"))),
        }
    }
}

/// Resolve the layered configuration and dispatch the command.
pub fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out = Some(out);
    }
    match cli.command {
        Command::Synth(args) => cmd_synth(config, &args),
        Command::Train(args) => cmd_train(config, &args),
        Command::Eval(args) => cmd_eval(config, &args),
        Command::Predict(args) => cmd_predict(config, &args),
        Command::Ablate(args) => cmd_ablate(config, &args),
    }
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    if !dir.exists() {
        return Ok(false);
    }
    let mut entries = std::fs::read_dir(dir).map_err(|e| FdError::io(dir.to_path_buf(), e))?;
    Ok(entries.next().is_some())
}

/// Distinct seed streams for the two splits of one generated dataset.
fn split_seed(base: u64, split: Split) -> u64 {
    match split {
        Split::Train => base,
        Split::Test => base.wrapping_add(0x0bad_5eed),
    }
}

pub fn cmd_synth(mut config: RunConfig, args: &SynthArgs) -> Result<()> {
    if let Some(n) = args.train {
        config.synth.train_count = n;
    }
    if let Some(n) = args.test {
        config.synth.test_count = n;
    }
    let root = config.out_dir();
    if dir_is_nonempty(&root)? && !args.force {
        return Err(FdError::Refusal(format!(
            "{} already exists and is not empty",
            root.display()
        )));
    }
    if config.synth.train_count == 0 && config.synth.test_count == 0 {
        eprintln!("warning: generating an empty dataset (0 train, 0 test)");
    }

    let mut meta_by_split: Vec<(Split, Vec<PhantomMeta>)> = Vec::new();
    for (split, count) in [
        (Split::Train, config.synth.train_count),
        (Split::Test, config.synth.test_count),
    ] {
        let images_dir = root.join("images").join(split.as_str());
        let masks_dir = root.join("masks").join(split.as_str());
        for d in [&images_dir, &masks_dir] {
            std::fs::create_dir_all(d).map_err(|e| FdError::io(d.clone(), e))?;
        }
        let spec = config.synth.spec(split_seed(config.seed, split));
        let prefix = format!("{}_", split.as_str());
        let mut metas = Vec::with_capacity(count);
        for (sample, meta) in generate_set(&spec, count, &prefix)? {
            save_gray(&images_dir.join(format!("{}.png", sample.id)), &sample.image)?;
            save_gray(&masks_dir.join(format!("{}.png", sample.id)), &sample.mask)?;
            metas.push(meta);
        }
        meta_by_split.push((split, metas));
    }

    config.write_effective(&root)?;
    let meta_path = root.join("phantom_meta.json");
    let meta_json = serde_json::json!({
        "config": &config,
        "splits": meta_by_split
            .iter()
            .map(|(split, metas)| (split.as_str(), metas))
            .collect::<std::collections::BTreeMap<_, _>>(),
    });
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta_json)?)
        .map_err(|e| FdError::io(meta_path, e))?;
    println!(
        "wrote {} train and {} test samples to {}",
        config.synth.train_count,
        config.synth.test_count,
        root.display()
    );
    Ok(())
}

fn require_data_root(config: &RunConfig) -> Result<PathBuf> {
    config.data.root.clone().ok_or_else(|| {
        FdError::Config("no dataset root; set --data or [data] root in the config file".into())
    })
}

pub fn cmd_train(mut config: RunConfig, args: &TrainArgs) -> Result<()> {
    if let Some(root) = &args.data {
        config.data.root = Some(root.clone());
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        config.train.batch_size = batch;
    }
    let root = require_data_root(&config)?;
    let data = load_dataset(&root, Split::Train)?;
    let out = config.out_dir();
    config.write_effective(&out)?;
    let train_config = config.train.train_config(config.model.clone(), config.seed);
    println!(
        "training on {} samples for {} epochs",
        data.len(),
        train_config.epochs
    );
    let result = train::<f32>(&train_config, &data, Some(&out))?;
    let final_loss = result
        .checkpoint
        .history
        .last()
        .map(|s| s.mean_loss)
        .unwrap_or(f64::NAN);
    println!(
        "finished: {} steps, final epoch mean loss {final_loss:.6}",
        result.steps.len()
    );
    for p in &result.checkpoint_paths {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

pub fn cmd_eval(mut config: RunConfig, args: &EvalArgs) -> Result<()> {
    if let Some(c) = &args.checkpoint {
        config.eval.checkpoint = Some(c.clone());
    }
    if let Some(root) = &args.data {
        config.data.root = Some(root.clone());
    }
    if let Some(split) = args.split {
        config.data.split = split;
    }
    if let Some(t) = args.threshold {
        config.eval.threshold = t;
    }
    let ckpt_path = config.eval.checkpoint.clone().ok_or_else(|| {
        FdError::Config("no checkpoint; set --checkpoint or [eval] checkpoint".into())
    })?;
    let root = require_data_root(&config)?;
    let checkpoint = Checkpoint::<f32>::load(&ckpt_path)?;
    let data = load_dataset(&root, config.data.split)?;
    let report = evaluate(&checkpoint, &data, config.eval.threshold)?;
    let out = config.out_dir();
    config.write_effective(&out)?;
    let report_path = out.join("metrics_report.json");
    let wrapped = serde_json::json!({ "config": &config, "report": &report });
    std::fs::write(&report_path, serde_json::to_string_pretty(&wrapped)?)
        .map_err(|e| FdError::io(report_path.clone(), e))?;
    print!("{}", report.render_table());
    println!("report: {}", report_path.display());
    Ok(())
}

/// Mark mask pixels that touch the background, giving 1-pixel contours.
fn contour_of(mask: &Array2<f32>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if mask[[y, x]] != 1.0 {
            return false;
        }
        let neighbors = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        neighbors
            .iter()
            .any(|&(ny, nx)| ny >= h || nx >= w || mask[[ny, nx]] == 0.0)
    })
}

pub fn cmd_predict(mut config: RunConfig, args: &PredictArgs) -> Result<()> {
    if let Some(c) = &args.checkpoint {
        config.predict.checkpoint = Some(c.clone());
    }
    if let Some(i) = &args.image {
        config.predict.image = Some(i.clone());
    }
    if let Some(t) = args.threshold {
        config.predict.threshold = t;
    }
    let ckpt_path = config.predict.checkpoint.clone().ok_or_else(|| {
        FdError::Config("no checkpoint; set --checkpoint or [predict] checkpoint".into())
    })?;
    let image_path = config.predict.image.clone().ok_or_else(|| {
        FdError::Config("no input image; set --image or [predict] image".into())
    })?;
    let checkpoint = Checkpoint::<f32>::load(&ckpt_path)?;
    let (store, net) = checkpoint.instantiate()?;
    let raw = load_gray(&image_path)?;
    let resized = resize_bilinear(&raw, checkpoint.config.resize);
    let mask = net.predict_mask(&store, &resized, config.predict.threshold)?;

    let out = config.out_dir();
    config.write_effective(&out)?;
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("input");
    let mask_path = out.join(format!("{stem}_mask.png"));
    save_gray(&mask_path, &mask)?;

    let (h, w) = mask.dim();
    let contour = contour_of(&mask);
    let mut overlay = image::RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in resized.indexed_iter() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let px = if contour[[y, x]] {
            image::Rgb([255, 64, 64])
        } else {
            image::Rgb([g, g, g])
        };
        overlay.put_pixel(x as u32, y as u32, px);
    }
    let overlay_path = out.join(format!("{stem}_overlay.png"));
    overlay
        .save(&overlay_path)
        .map_err(|e| FdError::image(overlay_path.clone(), e))?;

    let meta_path = out.join(format!("{stem}_predict.json"));
    let meta = serde_json::json!({
        "config": &config,
        "image": image_path,
        "checkpoint": ckpt_path,
        "mask": mask_path,
        "overlay": overlay_path,
        "foreground_pixels": mask.iter().filter(|&&v| v == 1.0).count(),
    });
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| FdError::io(meta_path, e))?;
    println!("mask: {}", mask_path.display());
    println!("overlay: {}", overlay_path.display());
    Ok(())
}

pub fn cmd_ablate(mut config: RunConfig, args: &AblateArgs) -> Result<()> {
    if let Some(root) = &args.data {
        config.data.root = Some(root.clone());
    }
    if let Some(epochs) = args.epochs {
        config.ablate.epochs = epochs;
    }
    let a = config.ablate.clone();
    let (train_data, test_data) = match &config.data.root {
        Some(root) => (
            load_dataset(root, Split::Train)?,
            load_dataset(root, Split::Test)?,
        ),
        None => {
            println!(
                "no dataset root given; generating {}+{} phantoms at {}x{}",
                a.train_count, a.test_count, a.canvas_size.0, a.canvas_size.1
            );
            let mut spec = config.synth.spec(split_seed(config.seed, Split::Train));
            spec.canvas_size = a.canvas_size;
            spec.cell_count = a.cell_count;
            spec.interference_count = a.interference_count;
            let tr = generate_set(&spec, a.train_count, "train_")?
                .into_iter()
                .map(|(s, _)| s)
                .collect();
            spec.seed = split_seed(config.seed, Split::Test);
            let te = generate_set(&spec, a.test_count, "test_")?
                .into_iter()
                .map(|(s, _)| s)
                .collect();
            (
                DatasetHandle::from_samples(Split::Train, tr)?,
                DatasetHandle::from_samples(Split::Test, te)?,
            )
        }
    };

    let base_model = ModelConfig {
        backbone: a.backbone,
        cif_width: a.cif_width,
        ..config.model.clone()
    };
    let base = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        resize: a.resize,
        seed: config.seed,
        model: base_model,
        ..config.train.train_config(config.model.clone(), config.seed)
    };
    let report = run_ablation(&base, &train_data, &test_data, a.threshold, |label| {
        println!("running {label}")
    });

    let out = config.out_dir();
    config.write_effective(&out)?;
    let report_path = out.join("ablation_report.json");
    let wrapped = serde_json::json!({ "config": &config, "report": &report });
    std::fs::write(&report_path, serde_json::to_string_pretty(&wrapped)?)
        .map_err(|e| FdError::io(report_path.clone(), e))?;
    print!("{}", report.render_table());
    println!("report: {}", report_path.display());
    if report.rows.iter().any(|r| r.error.is_some()) {
        return Err(FdError::Validation(
            "one or more ablation rows failed; see the report".into(),
        ));
    }
    Ok(())
}
