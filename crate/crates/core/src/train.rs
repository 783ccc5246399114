//! Training steps, validation losses and the staged training loop.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{AnyModel, Checkpoint, ModelKind, ModelSpec, RngState};
use crate::config::{Stage, TrainConfig};
use crate::data::SceneSample;
use crate::diffusion::{
    corrupt_per_item, ddim_sample, joint_loss, sample_noise, sample_noise_with_offset, JointModel,
    LossBatch, MaskedInput, NoiseSchedule,
};
use crate::engine::{ParamStore, Tape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::inpaint::sample_training_mask;
use crate::jointnet::{
    build_direct_extend, build_jointnet, extend_for_masked_conditioning, DirectExtendDenoiser,
    FreezePolicy, RGB_PREFIX,
};
use crate::optim::{Adam, AdamConfig};
use crate::unet::Backbone;

/// Training targets for a batch: images, joint maps and class labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x0: Tensor<f32>,
    pub y0: Tensor<f32>,
    pub class: Vec<usize>,
}

/// Disparity for one joint channel, normals for three.
pub fn joint_target(sample: &SceneSample, joint_channels: usize) -> Result<&Tensor<f32>> {
    match joint_channels {
        1 => Ok(&sample.disparity),
        3 => Ok(&sample.normal),
        c => Err(invalid!("no joint target with {c} channels")),
    }
}

pub fn make_batch(data: &[SceneSample], idx: &[usize], joint_channels: usize) -> Result<Batch> {
    let mut xs = Vec::with_capacity(idx.len());
    let mut ys = Vec::with_capacity(idx.len());
    let mut class = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = data
            .get(i)
            .ok_or_else(|| invalid!("sample {i} out of range ({} samples)", data.len()))?;
        xs.push(&s.rgb);
        ys.push(joint_target(s, joint_channels)?);
        class.push(s.class_id);
    }
    Ok(Batch {
        x0: Tensor::stack_items(&xs)?,
        y0: Tensor::stack_items(&ys)?,
        class,
    })
}

/// Uniform draw with replacement.
pub fn draw_batch<R: Rng + ?Sized>(
    data: &[SceneSample],
    n: usize,
    joint_channels: usize,
    rng: &mut R,
) -> Result<Batch> {
    if data.is_empty() {
        return Err(invalid!("cannot draw from an empty dataset"));
    }
    let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..data.len())).collect();
    make_batch(data, &idx, joint_channels)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub cond_drop_prob: f64,
    pub noise_offset: f64,
}

/// Per-step randomness shared by every model trained on the same batch.
#[derive(Clone, Debug)]
pub struct StepDraw {
    pub batch: Batch,
    /// Labels after conditioning dropout.
    pub class: Vec<usize>,
    pub t: Vec<usize>,
    pub eps_x: Tensor<f32>,
    pub eps_y: Tensor<f32>,
    pub mask: Option<MaskedInput>,
}

impl StepDraw {
    pub fn new<R: Rng + ?Sized>(
        batch: Batch,
        settings: &StepSettings,
        sched: &NoiseSchedule,
        null_class: usize,
        with_masks: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let class = batch
            .class
            .iter()
            .map(|&c| {
                if rng.gen_bool(settings.cond_drop_prob) {
                    null_class
                } else {
                    c
                }
            })
            .collect();
        let n = batch.x0.dim(0);
        let t = (0..n).map(|_| rng.gen_range(0..sched.len())).collect();
        let eps_x = sample_noise_with_offset(batch.x0.shape(), settings.noise_offset, rng)?;
        let eps_y = sample_noise_with_offset(batch.y0.shape(), settings.noise_offset, rng)?;
        let mask = if with_masks {
            let (h, w) = (batch.x0.dim(2), batch.x0.dim(3));
            let ms: Vec<_> = (0..n).map(|_| sample_training_mask(h, w, rng)).collect();
            let mx: Vec<_> = ms.iter().map(|m| m.mask_x.clone()).collect();
            let my: Vec<_> = ms.iter().map(|m| m.mask_y.clone()).collect();
            Some(MaskedInput::from_clean(
                &batch.x0,
                &batch.y0,
                &Tensor::cat_batch(&mx)?,
                &Tensor::cat_batch(&my)?,
            )?)
        } else {
            None
        };
        Ok(Self {
            batch,
            class,
            t,
            eps_x,
            eps_y,
            mask,
        })
    }

    fn loss_batch(&self) -> LossBatch<'_> {
        LossBatch {
            x0: &self.batch.x0,
            y0: &self.batch.y0,
            class: &self.class,
            t: &self.t,
            eps_x: &self.eps_x,
            eps_y: &self.eps_y,
            mask: self.mask.as_ref(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossStats {
    pub total: f64,
    pub rgb: f64,
    /// Zero for the base model.
    pub joint: f64,
}

fn scalar(t: &Tensor<f32>) -> f64 {
    t.data()[0] as f64
}

/// One optimizer step of a joint model. Only parameters the model reports as
/// trainable get gradients.
pub fn joint_step<M: JointModel>(
    model: &mut M,
    opt: &mut Adam,
    sched: &NoiseSchedule,
    draw: &StepDraw,
) -> Result<LossStats> {
    let trainable: HashSet<String> = model
        .params()
        .names()
        .filter(|n| model.is_trainable(n))
        .map(str::to_owned)
        .collect();
    let (stats, grads) = {
        let mut tape = Tape::<f32>::with_params(Some(model.params()));
        tape.set_trainable(move |n| trainable.contains(n));
        let l = joint_loss(&*model, &mut tape, &draw.loss_batch(), sched)?;
        let stats = LossStats {
            total: scalar(tape.value(l.total)),
            rgb: scalar(tape.value(l.rgb)),
            joint: scalar(tape.value(l.joint)),
        };
        tape.backward(l.total)?;
        (stats, tape.param_grads())
    };
    if let Some((n, _)) = grads.iter().find(|(n, _)| !model.is_trainable(n)) {
        return Err(Error::Invariant(format!(
            "frozen parameter {n} received a gradient"
        )));
    }
    opt.step(model.params_mut(), &grads)?;
    Ok(stats)
}

/// One optimizer step of the single-modality backbone on the RGB half of `draw`.
pub fn base_step(
    model: &mut Backbone,
    opt: &mut Adam,
    sched: &NoiseSchedule,
    draw: &StepDraw,
) -> Result<LossStats> {
    let x_t = corrupt_per_item(&draw.batch.x0, &draw.t, &draw.eps_x, sched)?;
    let (loss, grads) = {
        let mut tape = Tape::<f32>::with_params(Some(&model.params));
        let x = tape.constant(x_t);
        let (out, _) = model
            .view()
            .forward(&mut tape, x, &draw.t, &draw.class, None, None)?;
        let target = tape.constant(draw.eps_x.clone());
        let l = tape.mse(out, target)?;
        let loss = scalar(tape.value(l));
        tape.backward(l)?;
        (loss, tape.param_grads())
    };
    opt.step(&mut model.params, &grads)?;
    Ok(LossStats {
        total: loss,
        rgb: loss,
        joint: 0.0,
    })
}

/// Held-out batch with fixed timesteps and noise, so losses are comparable
/// across steps and models.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub draw: StepDraw,
}

impl ValidationSet {
    /// Timesteps are stratified over the schedule; noise comes from `seed`.
    pub fn new(batch: Batch, sched: &NoiseSchedule, seed: u64) -> Result<Self> {
        let n = batch.x0.dim(0);
        if n == 0 {
            return Err(invalid!("validation set is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = (0..n)
            .map(|i| ((2 * i + 1) * sched.len()) / (2 * n))
            .collect();
        let eps_x = sample_noise(batch.x0.shape(), &mut rng);
        let eps_y = sample_noise(batch.y0.shape(), &mut rng);
        Ok(Self {
            draw: StepDraw {
                class: batch.class.clone(),
                batch,
                t,
                eps_x,
                eps_y,
                mask: None,
            },
        })
    }

    pub fn joint_loss<M: JointModel>(&self, model: &M, sched: &NoiseSchedule) -> Result<LossStats> {
        let mut tape = Tape::<f32>::inference(model.params());
        let mask;
        let mut lb = self.draw.loss_batch();
        if model.is_mask_conditioned() {
            let b = &self.draw.batch;
            mask = MaskedInput::generate_all(
                b.x0.dim(0),
                b.x0.dim(1),
                b.y0.dim(1),
                b.x0.dim(2),
                b.x0.dim(3),
            );
            lb.mask = Some(&mask);
        }
        let l = joint_loss(model, &mut tape, &lb, sched)?;
        Ok(LossStats {
            total: scalar(tape.value(l.total)),
            rgb: scalar(tape.value(l.rgb)),
            joint: scalar(tape.value(l.joint)),
        })
    }

    pub fn base_loss(&self, model: &Backbone, sched: &NoiseSchedule) -> Result<LossStats> {
        let d = &self.draw;
        let x_t = corrupt_per_item(&d.batch.x0, &d.t, &d.eps_x, sched)?;
        let pred = model.predict(&x_t, &d.t, &d.class)?;
        let mse = pred
            .data()
            .iter()
            .zip(d.eps_x.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum::<f64>()
            / pred.numel() as f64;
        Ok(LossStats {
            total: mse,
            rgb: mse,
            joint: 0.0,
        })
    }

    pub fn loss(&self, model: &AnyModel, sched: &NoiseSchedule) -> Result<LossStats> {
        match model {
            AnyModel::Base(b) => self.base_loss(b, sched),
            AnyModel::Joint(j) => self.joint_loss(j, sched),
            AnyModel::DirectExtend(d) => self.joint_loss(d, sched),
        }
    }
}

/// Fixed-seed samples for a snapshot grid; one per class, cycling.
pub fn validation_samples<M: JointModel>(
    model: &M,
    sched: &NoiseSchedule,
    n: usize,
    size: (usize, usize),
    steps: usize,
    guidance: f32,
    seed: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let classes = model.null_class();
    let class = (0..n).map(|i| i % classes.max(1)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = ddim_sample(
        model,
        sched,
        &[n, 3, size.0, size.1],
        class,
        steps,
        guidance,
        &mut rng,
    )?;
    Ok((s.x, s.y))
}

/// Validation record emitted every `snapshot_every` steps and at the end.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: u64,
    /// `(model name, held-out loss)`; the companion baseline comes second.
    pub losses: Vec<(&'static str, LossStats)>,
    /// `(model name, images, joint maps)` for joint models.
    pub samples: Vec<(&'static str, Tensor<f32>, Tensor<f32>)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub model: &'static str,
    pub train: LossStats,
}

/// Spec an init checkpoint must have for a stage.
fn accepted_init(cfg: &TrainConfig) -> Vec<ModelSpec> {
    let jc = cfg.joint_channels;
    let joint = |freeze, mask_conditioned| ModelSpec {
        backbone: cfg.model.clone(),
        kind: ModelKind::Joint {
            joint_channels: jc,
            freeze,
            mask_conditioned,
        },
    };
    let base = ModelSpec {
        backbone: cfg.model.clone(),
        kind: ModelKind::Base,
    };
    if cfg.resume {
        return vec![target_spec(cfg)];
    }
    match cfg.stage {
        Stage::Base => vec![base],
        Stage::Stage1 => vec![base],
        Stage::Stage2 => vec![joint(FreezePolicy::Stage1FrozenRgb, false)],
        Stage::MaskFt => vec![
            joint(FreezePolicy::AllTrainable, false),
            joint(FreezePolicy::Stage1FrozenRgb, false),
        ],
    }
}

/// Spec of the model a stage produces.
pub fn target_spec(cfg: &TrainConfig) -> ModelSpec {
    let joint = |freeze, mask_conditioned| ModelKind::Joint {
        joint_channels: cfg.joint_channels,
        freeze,
        mask_conditioned,
    };
    ModelSpec {
        backbone: cfg.model.clone(),
        kind: match cfg.stage {
            Stage::Base => ModelKind::Base,
            Stage::Stage1 => joint(FreezePolicy::Stage1FrozenRgb, false),
            Stage::Stage2 => joint(FreezePolicy::AllTrainable, false),
            Stage::MaskFt => joint(FreezePolicy::Stage1FrozenRgb, true),
        },
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub sched: NoiseSchedule,
    pub model: AnyModel,
    pub opt: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
    /// Direct Extend baseline trained on the same draws.
    pub companion: Option<(DirectExtendDenoiser, Adam)>,
    frozen: Option<ParamStore>,
}

impl Trainer {
    /// Builds the stage's model from `init` (or from scratch for `base`).
    pub fn new(config: TrainConfig, init: Option<Checkpoint>) -> Result<Self> {
        config.validate()?;
        let adam = AdamConfig {
            lr: config.learning_rate,
            warmup_steps: config.warmup_steps,
            ..AdamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let init = match (config.stage, init) {
            (Stage::Base, None) if !config.resume => None,
            (_, Some(ck)) => {
                let spec = ck.model.spec();
                let accepted = accepted_init(&config);
                if !accepted.contains(&spec) {
                    return Err(Error::DigestMismatch {
                        expected: accepted[0].digest(),
                        found: spec.digest(),
                    });
                }
                Some(ck)
            }
            (stage, None) => return Err(invalid!("stage {stage:?} needs an init checkpoint")),
        };
        let mut companion = None;
        let (model, opt, step) = match init {
            None => (
                AnyModel::Base(Backbone::new(config.model.clone(), &mut rng)?),
                Adam::new(adam)?,
                0,
            ),
            Some(ck) if config.resume => {
                if let Some(r) = &ck.rng {
                    rng = r.restore();
                }
                let opt = match ck.optimizer {
                    Some(mut o) => {
                        o.config = adam;
                        o
                    }
                    None => Adam::new(adam)?,
                };
                (ck.model, opt, ck.step)
            }
            Some(ck) => {
                let model = match (config.stage, ck.model) {
                    (Stage::Base, m) => m,
                    (Stage::Stage1, AnyModel::Base(b)) => {
                        if let Some(init) = config.direct_extend {
                            let de =
                                build_direct_extend(&b, config.joint_channels, init, &mut rng)?;
                            companion = Some((de, Adam::new(adam.clone())?));
                        }
                        AnyModel::Joint(build_jointnet(&b, config.joint_channels)?)
                    }
                    (Stage::Stage2, AnyModel::Joint(mut j)) => {
                        j.freeze = FreezePolicy::AllTrainable;
                        AnyModel::Joint(j)
                    }
                    (Stage::MaskFt, AnyModel::Joint(j)) => {
                        let mut j = extend_for_masked_conditioning(j)?;
                        j.freeze = FreezePolicy::Stage1FrozenRgb;
                        AnyModel::Joint(j)
                    }
                    (stage, m) => {
                        return Err(invalid!(
                            "cannot start stage {stage:?} from a {} model",
                            m.kind_name()
                        ))
                    }
                };
                (model, Adam::new(adam)?, 0)
            }
        };
        let frozen = match &model {
            AnyModel::Joint(j) if j.freeze == FreezePolicy::Stage1FrozenRgb => {
                Some(j.params.with_prefix(RGB_PREFIX))
            }
            _ => None,
        };
        Ok(Self {
            config,
            sched: NoiseSchedule::default(),
            model,
            opt,
            rng,
            step,
            companion,
            frozen,
        })
    }

    fn settings(&self) -> StepSettings {
        StepSettings {
            cond_drop_prob: self.config.cond_drop_prob,
            noise_offset: self.config.noise_offset,
        }
    }

    fn null_class(&self) -> usize {
        match &self.model {
            AnyModel::Base(b) => b.config.null_class(),
            AnyModel::Joint(j) => j.null_class(),
            AnyModel::DirectExtend(d) => d.null_class(),
        }
    }

    /// One step on a fresh draw from `data`. Returns the main model's loss and
    /// the companion's, if any.
    pub fn train_step(&mut self, data: &[SceneSample]) -> Result<(LossStats, Option<LossStats>)> {
        let batch = draw_batch(
            data,
            self.config.batch_size,
            self.config.joint_channels,
            &mut self.rng,
        )?;
        let with_masks = matches!(&self.model, AnyModel::Joint(j) if j.mask_conditioned);
        let settings = self.settings();
        let null = self.null_class();
        let draw = StepDraw::new(
            batch,
            &settings,
            &self.sched,
            null,
            with_masks,
            &mut self.rng,
        )?;
        let main = match &mut self.model {
            AnyModel::Base(b) => base_step(b, &mut self.opt, &self.sched, &draw)?,
            AnyModel::Joint(j) => joint_step(j, &mut self.opt, &self.sched, &draw)?,
            AnyModel::DirectExtend(d) => joint_step(d, &mut self.opt, &self.sched, &draw)?,
        };
        let side = match &mut self.companion {
            Some((d, opt)) => Some(joint_step(d, opt, &self.sched, &draw)?),
            None => None,
        };
        self.step += 1;
        Ok((main, side))
    }

    pub fn snapshot(&self, val: &ValidationSet, size: (usize, usize)) -> Result<Snapshot> {
        let v = &self.config.validation;
        let seed = self.config.seed ^ 0x5eed;
        let mut snap = Snapshot {
            step: self.step,
            losses: vec![(self.model.kind_name(), val.loss(&self.model, &self.sched)?)],
            samples: Vec::new(),
        };
        match &self.model {
            AnyModel::Joint(j) => {
                let (x, y) = validation_samples(
                    j,
                    &self.sched,
                    v.samples,
                    size,
                    v.sample_steps,
                    v.guidance,
                    seed,
                )?;
                snap.samples.push(("joint", x, y));
            }
            AnyModel::DirectExtend(d) => {
                let (x, y) = validation_samples(
                    d,
                    &self.sched,
                    v.samples,
                    size,
                    v.sample_steps,
                    v.guidance,
                    seed,
                )?;
                snap.samples.push(("direct_extend", x, y));
            }
            AnyModel::Base(_) => {}
        }
        if let Some((d, _)) = &self.companion {
            let (x, y) = validation_samples(
                d,
                &self.sched,
                v.samples,
                size,
                v.sample_steps,
                v.guidance,
                seed,
            )?;
            snap.samples.push(("direct_extend", x, y));
            snap.losses
                .push(("direct_extend", val.joint_loss(d, &self.sched)?));
        }
        Ok(snap)
    }

    /// Fails if a frozen RGB branch changed since construction.
    pub fn check_frozen(&self) -> Result<()> {
        if let (Some(before), AnyModel::Joint(j)) = (&self.frozen, &self.model) {
            let now = j.params.with_prefix(RGB_PREFIX);
            if !now.bit_eq(before) {
                return Err(Error::Invariant(
                    "frozen RGB branch changed during training".into(),
                ));
            }
        }
        Ok(())
    }

    /// Runs until `config.steps`, calling `on_snapshot` at step 0, every
    /// `snapshot_every` steps and at the end, and `on_log` after each step.
    pub fn run(
        &mut self,
        train: &[SceneSample],
        val: &ValidationSet,
        mut on_log: impl FnMut(&TrainLogEntry) -> Result<()>,
        mut on_snapshot: impl FnMut(&Snapshot) -> Result<()>,
    ) -> Result<()> {
        let size = (val.draw.batch.x0.dim(2), val.draw.batch.x0.dim(3));
        let every = self.config.snapshot_every;
        if every > 0 {
            on_snapshot(&self.snapshot(val, size)?)?;
        }
        while self.step < self.config.steps {
            let (main, side) = self.train_step(train)?;
            on_log(&TrainLogEntry {
                step: self.step,
                model: self.model.kind_name(),
                train: main,
            })?;
            if let Some(s) = side {
                on_log(&TrainLogEntry {
                    step: self.step,
                    model: "direct_extend",
                    train: s,
                })?;
            }
            if every > 0 && (self.step.is_multiple_of(every) || self.step == self.config.steps) {
                on_snapshot(&self.snapshot(val, size)?)?;
            }
        }
        self.check_frozen()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.opt.clone()),
            rng: Some(RngState::capture(&self.rng)),
            step: self.step,
        }
    }
}

/// Splits a dataset into (train, held-out) with the held-out part at the end.
pub fn split_dataset(
    data: &[SceneSample],
    held_out: usize,
) -> Result<(&[SceneSample], &[SceneSample])> {
    if data.len() <= held_out {
        return Err(invalid!(
            "dataset has {} samples, need more than the {held_out} held out",
            data.len()
        ));
    }
    Ok(data.split_at(data.len() - held_out))
}
