//! Command implementations behind the `jointdiff` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use jointdiff::checkpoint::{AnyModel, Checkpoint};
use jointdiff::config::{Stage, TrainConfig};
use jointdiff::data::{self, SceneSample, CLASS_NAMES};
use jointdiff::diffusion::{ddim_sample, JointModel, NoiseSchedule};
use jointdiff::eval::{self, evaluate_depth};
use jointdiff::inpaint::{inpaint, predict_depth, InpaintRequest, ModalityMask};
use jointdiff::io::{read_gray16, read_mask, read_rgb8, write_atomic, write_gray16, write_rgb8};
use jointdiff::jointnet::{ExtendInit, RGB_PREFIX};
use jointdiff::tiling::{generate_panorama, sdedit_refine, Refine, TileStrategy, TiledSampling};
use jointdiff::train::{make_batch, split_dataset, Snapshot, Trainer, ValidationSet};
use jointdiff::Tensor;

pub const SEED_ENV: &str = "JOINTDIFF_SEED";
pub const GIT_DESCRIBE: &str = env!("JOINTDIFF_GIT_DESCRIBE");

#[derive(Debug, Parser)]
#[command(
    name = "jointdiff",
    version,
    about = "Joint RGB + depth/normal diffusion at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic RGBD dataset.
    SynthData(SynthArgs),
    /// Train one stage from a TOML config.
    Train(TrainArgs),
    /// Unconditional or class-conditional joint samples.
    Sample(SampleArgs),
    /// Channel-wise inpainting with one mask per modality.
    Inpaint(InpaintArgs),
    /// Depth (or normals) for an image, sampled with the image held fixed.
    PredictDepth(PredictDepthArgs),
    /// SDEdit-style refinement of a depth map with the image kept fixed.
    RefineDepth(RefineDepthArgs),
    /// Wide 360-degree panorama by tiled joint sampling.
    Panorama(PanoramaArgs),
    /// Aligned AbsRel and RMSE of predicted depth on a dataset.
    EvalDepth(EvalDepthArgs),
    /// Tile-coherence study of the panorama strategies.
    EvalCoherence(EvalCoherenceArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1024)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Seed of the first scene; scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub stage: Option<StageArg>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub cond_drop_prob: Option<f64>,
    #[arg(long)]
    pub noise_offset: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub snapshot_every: Option<u64>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub direct_extend: Option<ExtendArg>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    Base,
    #[value(name = "1")]
    Stage1,
    #[value(name = "2")]
    Stage2,
    MaskFt,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExtendArg {
    Zeros,
    Random,
    Copy,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Class name or index; `none` samples unconditionally.
    #[arg(long, default_value = "none")]
    pub class: String,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 2.0)]
    pub guidance: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InpaintArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Depth (16-bit gray) or normal (8-bit RGB) map matching the model.
    #[arg(long)]
    pub depth: PathBuf,
    /// White pixels of the image are regenerated.
    #[arg(long)]
    pub mask_x: PathBuf,
    #[arg(long)]
    pub mask_y: PathBuf,
    #[arg(long, default_value = "none")]
    pub class: String,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub guidance: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PredictDepthArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "none")]
    pub class: String,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RefineDepthArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub depth: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub strength: f64,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub guidance: f32,
    #[arg(long, default_value = "none")]
    pub class: String,
    /// Refine in tiles of this size (for inputs larger than the model).
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyArg {
    /// Random offsets, whole-image tile and boundary decay.
    Full,
    /// Fixed grid with plain averaging.
    Plain,
    /// Non-overlapping tiles denoised on their own.
    Independent,
}

impl StrategyArg {
    /// Strategy and effective stride.
    pub fn resolve(self, tile: usize, stride: usize) -> (TileStrategy, usize) {
        match self {
            StrategyArg::Full => (TileStrategy::FULL, stride),
            StrategyArg::Plain => (TileStrategy::PLAIN, stride),
            StrategyArg::Independent => (TileStrategy::PLAIN, tile),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct PanoramaArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value = "none")]
    pub class: String,
    #[arg(long, default_value_t = 32)]
    pub tile: usize,
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 2.0)]
    pub guidance: f32,
    #[arg(long, value_enum, default_value_t = StrategyArg::Full)]
    pub strategy: StrategyArg,
    /// Horizontal field of view of the exported point cloud.
    #[arg(long, default_value_t = 360.0)]
    pub fov: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalDepthArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Evaluate at most this many scenes.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Also score unconditional joint samples as a baseline.
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalCoherenceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub n_seeds: usize,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 32)]
    pub tile: usize,
    #[arg(long, default_value_t = 16)]
    pub stride: usize,
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    #[arg(long, default_value_t = 2.0)]
    pub guidance: f32,
    #[arg(long, default_value = "none")]
    pub class: String,
    #[arg(long, default_value_t = 4)]
    pub n_tiles: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// `JOINTDIFF_SEED` wins over any seed given on the command line or in a config.
pub fn resolve_seed(seed: u64) -> anyhow::Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?} is not a u64")),
        Err(_) => Ok(seed),
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub git_describe: String,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
}

/// `<dir>/manifest.json` for directory outputs, `<file>.manifest.json` otherwise.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

struct Run {
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    started: Instant,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            command,
            seed,
            config,
            started: Instant::now(),
            outputs: Vec::new(),
        }
    }

    fn rgb(&mut self, path: PathBuf, img: &Tensor<f32>) -> anyhow::Result<()> {
        write_rgb8(&path, img)?;
        self.outputs.push(path);
        Ok(())
    }

    fn gray(&mut self, path: PathBuf, map: &Tensor<f32>) -> anyhow::Result<()> {
        write_gray16(&path, map)?;
        self.outputs.push(path);
        Ok(())
    }

    fn bytes(&mut self, path: PathBuf, bytes: &[u8]) -> anyhow::Result<()> {
        write_atomic(&path, bytes)?;
        self.outputs.push(path);
        Ok(())
    }

    fn json(&mut self, path: PathBuf, value: &impl Serialize) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.bytes(path, text.as_bytes())
    }

    fn finish(self, manifest: &Path) -> anyhow::Result<()> {
        let m = Manifest {
            command: self.command.into(),
            seed: self.seed,
            config: self.config,
            git_describe: GIT_DESCRIBE.into(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
            outputs: self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
        };
        write_atomic(manifest, serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(())
    }
}

fn out_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn parent_dir(path: &Path) -> anyhow::Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(p) => out_dir(p),
        None => Ok(()),
    }
}

/// Class by name or index; `none`/`null` is the unconditional label.
pub fn parse_class(s: &str, null_class: usize) -> anyhow::Result<usize> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("none") || s.eq_ignore_ascii_case("null") {
        return Ok(null_class);
    }
    if let Ok(i) = s.parse::<usize>() {
        if i <= null_class {
            return Ok(i);
        }
        bail!("class index {i} out of range 0..={null_class}");
    }
    CLASS_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(s))
        .filter(|&i| i < null_class)
        .with_context(|| format!("unknown class {s:?}; known: {}", CLASS_NAMES.join(", ")))
}

fn load_model(path: &Path) -> anyhow::Result<AnyModel> {
    Ok(Checkpoint::load(path, None)?.model)
}

/// Runs `$body` with `$m` bound to the checkpoint's joint model.
macro_rules! with_joint {
    ($model:expr, |$m:ident| $body:expr) => {
        match &$model {
            AnyModel::Joint($m) => $body,
            AnyModel::DirectExtend($m) => $body,
            AnyModel::Base(_) => {
                anyhow::bail!("this command needs a joint checkpoint, got a base model")
            }
        }
    };
}

fn batch1(t: Tensor<f32>) -> anyhow::Result<Tensor<f32>> {
    let mut s = vec![1];
    s.extend_from_slice(t.shape());
    Ok(t.reshape(s)?)
}

fn item(t: &Tensor<f32>, i: usize) -> anyhow::Result<Tensor<f32>> {
    let s = t.shape()[1..].to_vec();
    Ok(t.batch_item(i)?.reshape(s)?)
}

fn read_joint(path: &Path, channels: usize) -> anyhow::Result<Tensor<f32>> {
    Ok(if channels == 1 {
        read_gray16(path)?
    } else {
        read_rgb8(path)?
    })
}

fn write_joint(run: &mut Run, dir: &Path, stem: &str, map: &Tensor<f32>) -> anyhow::Result<()> {
    if map.dim(0) == 1 {
        run.gray(dir.join(format!("{stem}.png")), map)
    } else {
        run.rgb(dir.join(format!("{stem}.png")), map)
    }
}

fn joint_stem(channels: usize) -> &'static str {
    if channels == 1 {
        "depth"
    } else {
        "normal"
    }
}

/// Images on top, joint maps below (gray maps replicated to three channels).
pub fn snapshot_grid(x: &Tensor<f32>, y: &Tensor<f32>) -> anyhow::Result<Tensor<f32>> {
    let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let yc = y.dim(1);
    let (gh, gw) = (2 * h, n * w);
    Ok(Tensor::from_fn([3, gh, gw], |i| {
        let (c, r) = (i / (gh * gw), i % (gh * gw));
        let (row, col) = (r / gw, r % gw);
        let (k, px) = (col / w, col % w);
        if row < h {
            x.data()[((k * 3 + c) * h + row) * w + px]
        } else {
            let cy = if yc == 1 { 0 } else { c };
            y.data()[((k * yc + cy) * h + row - h) * w + px]
        }
    }))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SynthData(a) => cmd_synth_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Inpaint(a) => cmd_inpaint(&a),
        Command::PredictDepth(a) => cmd_predict_depth(&a),
        Command::RefineDepth(a) => cmd_refine_depth(&a),
        Command::Panorama(a) => cmd_panorama(&a),
        Command::EvalDepth(a) => cmd_eval_depth(&a),
        Command::EvalCoherence(a) => cmd_eval_coherence(&a),
    }
}

pub fn cmd_synth_data(a: &SynthArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(a.seed)?;
    let mut run = Run::new(
        "synth-data",
        seed,
        json!({"n": a.n, "size": a.size, "first_seed": seed}),
    );
    parent_dir(&a.out)?;
    let samples = data::generate(a.n, a.size, seed)?;
    data::write_dataset(&samples, &a.out)?;
    run.outputs.push(a.out.clone());
    run.finish(&manifest_path(&a.out, false))
}

fn apply_overrides(c: &mut TrainConfig, a: &TrainArgs) {
    if let Some(s) = a.stage {
        c.stage = match s {
            StageArg::Base => Stage::Base,
            StageArg::Stage1 => Stage::Stage1,
            StageArg::Stage2 => Stage::Stage2,
            StageArg::MaskFt => Stage::MaskFt,
        };
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f.clone() { c.$f = v; } )* };
    }
    set!(
        learning_rate,
        steps,
        warmup_steps,
        batch_size,
        cond_drop_prob,
        noise_offset,
        seed,
        snapshot_every,
        dataset,
        out
    );
    if let Some(p) = &a.init {
        c.init = Some(p.clone());
    }
    if a.resume {
        c.resume = true;
    }
    if let Some(e) = a.direct_extend {
        c.direct_extend = Some(match e {
            ExtendArg::Zeros => ExtendInit::Zeros,
            ExtendArg::Random => ExtendInit::Random,
            ExtendArg::Copy => ExtendInit::Copy,
        });
    }
}

/// Fails unless the joint model's RGB prediction equals its base's on a probe batch.
fn check_output_preserving(trainer: &Trainer, base: &AnyModel, size: usize) -> anyhow::Result<()> {
    let (AnyModel::Joint(j), AnyModel::Base(b)) = (&trainer.model, base) else {
        return Ok(());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn([2, 3, size, size], &mut rng);
    let y = Tensor::randn([2, j.joint_channels, size, size], &mut rng);
    let (t, class) = ([10, 900], [0, b.config.null_class()]);
    let want = b.predict(&x, &t, &class)?;
    let (got, _) = j.predict(&x, &y, &t, &class, None)?;
    if !got.bit_eq(&want) {
        bail!(jointdiff::Error::Invariant(
            "fresh joint model does not reproduce the base model's RGB output".into()
        ));
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    apply_overrides(&mut cfg, a);
    cfg.seed = resolve_seed(cfg.seed)?;
    cfg.validate()?;
    let mut run = Run::new("train", cfg.seed, serde_json::to_value(&cfg)?);

    let data = data::read_dataset(&cfg.dataset)?;
    let (train, held) = split_dataset(&data, cfg.validation.held_out)?;
    let idx: Vec<usize> = (0..held.len()).collect();
    let sched = NoiseSchedule::default();
    let val = ValidationSet::new(
        make_batch(held, &idx, cfg.joint_channels)?,
        &sched,
        cfg.seed,
    )?;
    let init = cfg
        .init
        .as_deref()
        .map(|p| Checkpoint::load(p, None))
        .transpose()?;
    let init_model = init.as_ref().map(|c| c.model.clone());
    let out = cfg.out.clone();
    out_dir(&out.join("snapshots"))?;
    let mut trainer = Trainer::new(cfg.clone(), init)?;
    if trainer.step == 0 {
        if let Some(base) = &init_model {
            check_output_preserving(&trainer, base, data[0].rgb.dim(1))?;
        }
    }

    let mut log = String::new();
    let mut snaps = String::new();
    let mut grids = Vec::new();
    trainer.run(
        train,
        &val,
        |e| {
            log.push_str(&serde_json::to_string(e).expect("log entry"));
            log.push('\n');
            Ok(())
        },
        |s: &Snapshot| {
            let losses: serde_json::Map<_, _> = s
                .losses
                .iter()
                .map(|(k, v)| (k.to_string(), serde_json::to_value(v).expect("loss")))
                .collect();
            snaps.push_str(&json!({"step": s.step, "val": losses}).to_string());
            snaps.push('\n');
            for (name, x, y) in &s.samples {
                grids.push((
                    format!("step_{:06}_{name}.png", s.step),
                    x.clone(),
                    y.clone(),
                ));
            }
            Ok(())
        },
    )?;
    for (name, x, y) in &grids {
        run.rgb(out.join("snapshots").join(name), &snapshot_grid(x, y)?)?;
    }
    run.bytes(out.join("log.jsonl"), log.as_bytes())?;
    run.bytes(out.join("validation.jsonl"), snaps.as_bytes())?;
    run.bytes(out.join("model.ckpt"), &trainer.checkpoint().to_bytes())?;
    if let Some((d, _)) = &trainer.companion {
        let ck = Checkpoint::new(AnyModel::DirectExtend(d.clone()));
        run.bytes(out.join("direct_extend.ckpt"), &ck.to_bytes())?;
    }
    if let AnyModel::Joint(j) = &trainer.model {
        run.config["rgb_params"] = json!(j.params.with_prefix(RGB_PREFIX).num_elements());
    }
    run.finish(&manifest_path(&out, true))
}

pub fn cmd_sample(a: &SampleArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(a.seed)?;
    let model = load_model(&a.ckpt)?;
    let mut run = Run::new(
        "sample",
        seed,
        json!({"ckpt": a.ckpt, "class": a.class, "n": a.n,
        "size": a.size, "steps": a.steps, "guidance": a.guidance}),
    );
    out_dir(&a.out)?;
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = with_joint!(model, |m| {
        let class = parse_class(&a.class, m.null_class())?;
        let s = ddim_sample(
            m,
            &sched,
            &[a.n, 3, a.size, a.size],
            vec![class; a.n],
            a.steps,
            a.guidance,
            &mut rng,
        )?;
        (s.x, s.y)
    });
    let stem = joint_stem(y.dim(1));
    for i in 0..a.n {
        run.rgb(a.out.join(format!("rgb_{i:03}.png")), &item(&x, i)?)?;
        write_joint(&mut run, &a.out, &format!("{stem}_{i:03}"), &item(&y, i)?)?;
    }
    run.finish(&manifest_path(&a.out, true))
}

pub fn cmd_inpaint(a: &InpaintArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(a.seed)?;
    let model = load_model(&a.ckpt)?;
    let mut run = Run::new(
        "inpaint",
        seed,
        json!({"ckpt": a.ckpt, "image": a.image,
        "depth": a.depth, "mask_x": a.mask_x, "mask_y": a.mask_y, "class": a.class,
        "steps": a.steps, "guidance": a.guidance}),
    );
    out_dir(&a.out)?;
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = batch1(read_rgb8(&a.image)?)?;
    let masks = ModalityMask::new(
        batch1(read_mask(&a.mask_x)?)?,
        batch1(read_mask(&a.mask_y)?)?,
    )?;
    let (x, y) = with_joint!(model, |m| {
        let y0 = batch1(read_joint(&a.depth, m.joint_channels())?)?;
        let req = InpaintRequest {
            x0: &x0,
            y0: &y0,
            masks: &masks,
            class: vec![parse_class(&a.class, m.null_class())?],
            steps: a.steps,
            guidance: a.guidance,
        };
        inpaint(m, &sched, &req, &mut rng)?
    });
    run.rgb(a.out.join("rgb.png"), &item(&x, 0)?)?;
    write_joint(&mut run, &a.out, joint_stem(y.dim(1)), &item(&y, 0)?)?;
    run.finish(&manifest_path(&a.out, true))
}

pub fn cmd_predict_depth(a: &PredictDepthArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(a.seed)?;
    let model = load_model(&a.ckpt)?;
    let mut run = Run::new(
        "predict-depth",
        seed,
        json!({"ckpt": a.ckpt, "image": a.image,
        "class": a.class, "steps": a.steps}),
    );
    out_dir(&a.out)?;
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = batch1(read_rgb8(&a.image)?)?;
    let y = with_joint!(model, |m| {
        let class = parse_class(&a.class, m.null_class())?;
        let class = (class != m.null_class()).then_some(class);
        predict_depth(m, &sched, &x0, class, a.steps, &mut rng)?.1
    });
    write_joint(&mut run, &a.out, joint_stem(y.dim(1)), &item(&y, 0)?)?;
    run.finish(&manifest_path(&a.out, true))
}

pub fn cmd_refine_depth(a: &RefineDepthArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(a.seed)?;
    let model = load_model(&a.ckpt)?;
    let mut run = Run::new(
        "refine-depth",
        seed,
        json!({"ckpt": a.ckpt, "image": a.image,
        "depth": a.depth, "strength": a.strength, "steps": a.steps, "guidance": a.guidance,
        "class": a.class, "tile": a.tile, "stride": a.stride}),
    );
    out_dir(&a.out)?;
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = batch1(read_rgb8(&a.image)?)?;
    let tiling = match (a.tile, a.stride) {
        (Some(t), s) => Some((t, s.unwrap_or(t / 2).max(1))),
        (None, Some(_)) => bail!("--stride needs --tile"),
        (None, None) => None,
    };
    let y = with_joint!(model, |m| {
        let y0 = batch1(read_joint(&a.depth, m.joint_channels())?)?;
        let cfg = Refine {
            strength: a.strength,
            steps: a.steps,
            guidance: a.guidance,
            class: parse_class(&a.class, m.null_class())?,
            tiling,
            keep_image: true,
        };
        sdedit_refine(m, &sched, &x0, &y0, &cfg, &mut rng)?.1
    });
    write_joint(&mut run, &a.out, joint_stem(y.dim(1)), &item(&y, 0)?)?;
    run.finish(&manifest_path(&a.out, true))
}

/// One panorama per seed for the given strategy.
#[allow(clippy::too_many_arguments)]
pub fn panorama_with<M: JointModel>(
    model: &M,
    sched: &NoiseSchedule,
    strategy: StrategyArg,
    width: usize,
    tile: usize,
    stride: usize,
    steps: usize,
    guidance: f32,
    class: usize,
    seed: u64,
) -> anyhow::Result<(Tensor<f32>, Tensor<f32>)> {
    let (strategy, stride) = strategy.resolve(tile, stride);
    let cfg = TiledSampling {
        width,
        height: tile,
        tile,
        stride,
        steps,
        guidance,
        class,
        strategy,
        panoramic: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = generate_panorama(model, sched, &cfg, &mut rng)?;
    Ok((item(&x, 0)?, item(&y, 0)?))
}

pub fn cmd_panorama(a: &PanoramaArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(a.seed)?;
    let model = load_model(&a.ckpt)?;
    let mut run = Run::new(
        "panorama",
        seed,
        json!({"ckpt": a.ckpt, "width": a.width,
        "class": a.class, "tile": a.tile, "stride": a.stride, "steps": a.steps,
        "guidance": a.guidance, "strategy": a.strategy, "fov": a.fov}),
    );
    out_dir(&a.out)?;
    let sched = NoiseSchedule::default();
    let (x, y) = with_joint!(model, |m| {
        let class = parse_class(&a.class, m.null_class())?;
        panorama_with(
            m, &sched, a.strategy, a.width, a.tile, a.stride, a.steps, a.guidance, class, seed,
        )?
    });
    run.rgb(a.out.join("rgb.png"), &x)?;
    write_joint(&mut run, &a.out, joint_stem(y.dim(0)), &y)?;
    if y.dim(0) == 1 {
        let depth = eval::denormalize_disparity(&y, 1.0, 10.0);
        let points = eval::panorama_to_points(&x, &depth, a.fov)?;
        run.bytes(
            a.out.join("points.ply"),
            eval::ply_string(&points).as_bytes(),
        )?;
    }
    run.finish(&manifest_path(&a.out, true))
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DepthSummary {
    pub n: usize,
    pub abs_rel_mean: f64,
    pub abs_rel_median: f64,
    pub rmse_mean: f64,
    pub rmse_median: f64,
    pub abs_rel: Vec<f64>,
    pub rmse: Vec<f64>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Aligned metrics of per-scene disparity predictions (`[1, h, w]` each).
pub fn summarize_depth(
    preds: &[Tensor<f32>],
    scenes: &[SceneSample],
    seed: u64,
) -> anyhow::Result<DepthSummary> {
    if preds.len() != scenes.len() || preds.is_empty() {
        bail!("{} predictions for {} scenes", preds.len(), scenes.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = DepthSummary {
        n: preds.len(),
        ..DepthSummary::default()
    };
    for (p, sc) in preds.iter().zip(scenes) {
        let r = evaluate_depth(p, &sc.depth, &sc.valid_mask, &mut rng)?;
        s.abs_rel.push(r.abs_rel);
        s.rmse.push(r.rmse);
    }
    let n = s.n as f64;
    s.abs_rel_mean = s.abs_rel.iter().sum::<f64>() / n;
    s.rmse_mean = s.rmse.iter().sum::<f64>() / n;
    s.abs_rel_median = median(&s.abs_rel);
    s.rmse_median = median(&s.rmse);
    Ok(s)
}

/// Depth predictions for `scenes` from the image alone, in batches.
pub fn predict_scenes<M: JointModel>(
    model: &M,
    sched: &NoiseSchedule,
    scenes: &[SceneSample],
    steps: usize,
    batch: usize,
    seed: u64,
) -> anyhow::Result<Vec<Tensor<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch.max(1)) {
        let idx: Vec<usize> = (0..chunk.len()).collect();
        let b = make_batch(chunk, &idx, model.joint_channels())?;
        let (_, y) = predict_depth(model, sched, &b.x0, None, steps, &mut rng)?;
        for i in 0..chunk.len() {
            out.push(item(&y, i)?);
        }
    }
    Ok(out)
}

/// Joint maps of unconditional samples, one per scene, for the baseline.
pub fn unconditional_scenes<M: JointModel>(
    model: &M,
    sched: &NoiseSchedule,
    scenes: &[SceneSample],
    steps: usize,
    batch: usize,
    seed: u64,
) -> anyhow::Result<Vec<Tensor<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (scenes[0].rgb.dim(1), scenes[0].rgb.dim(2));
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch.max(1)) {
        let n = chunk.len();
        let s = ddim_sample(
            model,
            sched,
            &[n, 3, h, w],
            vec![model.null_class(); n],
            steps,
            1.0,
            &mut rng,
        )?;
        for i in 0..n {
            out.push(item(&s.y, i)?);
        }
    }
    Ok(out)
}

pub fn cmd_eval_depth(a: &EvalDepthArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(a.seed)?;
    let model = load_model(&a.ckpt)?;
    let mut run = Run::new(
        "eval-depth",
        seed,
        json!({"ckpt": a.ckpt, "dataset": a.dataset,
        "limit": a.limit, "steps": a.steps, "batch": a.batch, "baseline": a.baseline}),
    );
    parent_dir(&a.report)?;
    let mut scenes = data::read_dataset(&a.dataset)?;
    if let Some(l) = a.limit {
        scenes.truncate(l);
    }
    if scenes.is_empty() {
        bail!("dataset {} is empty", a.dataset.display());
    }
    let sched = NoiseSchedule::default();
    let report = with_joint!(model, |m| {
        if m.joint_channels() != 1 {
            bail!("depth evaluation needs a depth model");
        }
        let preds = predict_scenes(m, &sched, &scenes, a.steps, a.batch, seed)?;
        let mut report = json!({"predict_depth": summarize_depth(&preds, &scenes, seed)?});
        if a.baseline {
            let base = unconditional_scenes(m, &sched, &scenes, a.steps, a.batch, seed)?;
            report["unconditional"] = serde_json::to_value(summarize_depth(&base, &scenes, seed)?)?;
        }
        report
    });
    run.json(a.report.clone(), &report)?;
    run.finish(&manifest_path(&a.report, false))
}

#[derive(Clone, Debug, Serialize)]
pub struct CoherenceRow {
    pub strategy: StrategyArg,
    pub mean: f64,
    pub per_seed: Vec<f64>,
}

/// Mean tile coherence of each strategy over `seeds` (the same seeds for all).
pub fn coherence_study<M: JointModel>(
    model: &M,
    sched: &NoiseSchedule,
    a: &EvalCoherenceArgs,
    class: usize,
    seeds: &[u64],
) -> anyhow::Result<Vec<CoherenceRow>> {
    let mut rows = Vec::new();
    for strategy in [
        StrategyArg::Full,
        StrategyArg::Plain,
        StrategyArg::Independent,
    ] {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &s in seeds {
            let (x, _) = panorama_with(
                model, sched, strategy, a.width, a.tile, a.stride, a.steps, a.guidance, class, s,
            )?;
            per_seed.push(eval::tile_coherence(&x, a.n_tiles)?);
        }
        rows.push(CoherenceRow {
            strategy,
            mean: per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64,
            per_seed,
        });
    }
    Ok(rows)
}

pub fn cmd_eval_coherence(a: &EvalCoherenceArgs) -> anyhow::Result<()> {
    let seed = resolve_seed(a.seed)?;
    let model = load_model(&a.ckpt)?;
    let mut run = Run::new(
        "eval-coherence",
        seed,
        json!({"ckpt": a.ckpt, "n_seeds": a.n_seeds,
        "width": a.width, "tile": a.tile, "stride": a.stride, "steps": a.steps,
        "guidance": a.guidance, "class": a.class, "n_tiles": a.n_tiles}),
    );
    parent_dir(&a.report)?;
    let sched = NoiseSchedule::default();
    let seeds: Vec<u64> = (0..a.n_seeds as u64).map(|i| seed + i).collect();
    let rows = with_joint!(model, |m| {
        let class = parse_class(&a.class, m.null_class())?;
        coherence_study(m, &sched, a, class, &seeds)?
    });
    run.json(a.report.clone(), &json!({"strategies": rows}))?;
    run.finish(&manifest_path(&a.report, false))
}

/// One-line JSON error for stderr.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<jointdiff::Error>())
        .map(|e| e.kind())
        .unwrap_or("cli");
    // sources already printed by their parent are skipped
    let mut message = String::new();
    for e in err.chain() {
        let m = e.to_string();
        if !message.contains(&m) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&m);
        }
    }
    json!({"error": kind, "message": message}).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_by_name_index_or_none() {
        assert_eq!(parse_class("boxes", 8).unwrap(), 1);
        assert_eq!(parse_class("Towers", 8).unwrap(), 7);
        assert_eq!(parse_class("3", 8).unwrap(), 3);
        assert_eq!(parse_class("none", 8).unwrap(), 8);
        assert_eq!(parse_class("null", 8).unwrap(), 8);
        assert!(parse_class("9", 8).is_err());
        assert!(parse_class("teapots", 8).is_err());
    }

    #[test]
    fn manifest_locations() {
        assert_eq!(
            manifest_path(Path::new("runs/a"), true),
            PathBuf::from("runs/a/manifest.json")
        );
        assert_eq!(
            manifest_path(Path::new("r/report.json"), false),
            PathBuf::from("r/report.json.manifest.json")
        );
    }

    #[test]
    fn grid_puts_images_over_maps() {
        let x = Tensor::from_fn([2, 3, 2, 2], |i| i as f32);
        let y = Tensor::from_fn([2, 1, 2, 2], |i| -(i as f32));
        let g = snapshot_grid(&x, &y).unwrap();
        assert_eq!(g.shape(), &[3, 4, 4]);
        // second image, green channel, top-left pixel
        assert_eq!(g.data()[4 * 4 + 2], x.data()[12 + 4]);
        // depth replicated into every channel
        assert_eq!(g.data()[2 * 16 + 2 * 4 + 3], -5.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
