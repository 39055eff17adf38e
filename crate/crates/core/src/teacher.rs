//! Student/teacher training: EMA weight averaging, the mixed-batch step and
//! the epoch loop.

use std::fmt;
use std::str::FromStr;

use crate::augment::{apply_batch, sample_transform, Interpolation, TransformSpec};
use crate::autograd::Graph;
use crate::data::{mixed_batch_iterator, source_batches, stack_images, stack_masks, DataSplit, SliceSample};
use crate::error::{Error, Result};
use crate::losses::{combined_objective, dice_loss, LossKind};
use crate::metrics::{aggregate, batch_metrics, MetricsRecord, ADAPTED_THRESHOLD, BASELINE_THRESHOLD};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{rng_for, stream, RngContext};
use crate::scalar::Scalar;
use crate::schedule::{consistency_weight_at_epoch, lr_at_epoch, ScheduleConfig};
use crate::tensor::Tensor;
use crate::unet::{Mode, ModelParams, UNet};

pub const EMA_ALPHA_EARLY: f64 = 0.99;
pub const EMA_ALPHA_LATE: f64 = 0.999;
pub const EVAL_CHUNK: usize = 32;

/// `θ′ ← α·θ′ + (1 − α)·θ` elementwise, clamped to the segment between the
/// two values so rounding never leaves it.
pub fn ema_update<T: Scalar>(teacher: &mut ModelParams<T>, student: &ModelParams<T>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("ema_update", format!("alpha {alpha} outside [0, 1]")));
    }
    teacher.check_same_layout(student)?;
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        ema_slice(t.data_mut(), s.data(), alpha);
    }
    Ok(())
}

/// [`ema_update`] over plain slices, e.g. prediction maps.
pub fn ema_slice<T: Scalar>(avg: &mut [T], current: &[T], alpha: f64) {
    let beta = 1.0 - alpha;
    for (a, &c) in avg.iter_mut().zip(current) {
        let (x, y) = (a.as_f64(), c.as_f64());
        let v = (alpha * x + beta * y).clamp(x.min(y), x.max(y));
        *a = T::from_f64(v);
    }
}

/// `alpha_early` before the end of the ramp-up, `alpha_late` from then on.
pub fn ema_alpha_schedule(epoch: u32, rampup_epochs: u32, alpha_early: f64, alpha_late: f64) -> f64 {
    if epoch < rampup_epochs {
        alpha_early
    } else {
        alpha_late
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Supervised on the source domains only.
    Baseline,
    /// Mean teacher with the unlabeled target pool.
    Adapt,
    /// EMA teacher without consistency (γ = 0).
    AblateEma,
}

impl TrainMode {
    pub fn uses_target(self) -> bool {
        self == TrainMode::Adapt
    }

    /// Threshold used when none is configured: adapted models produce less
    /// saturated probabilities.
    pub fn default_threshold(self) -> f64 {
        match self {
            TrainMode::Adapt => ADAPTED_THRESHOLD,
            TrainMode::Baseline | TrainMode::AblateEma => BASELINE_THRESHOLD,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Adapt => "adapt",
            TrainMode::AblateEma => "ablate_ema",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "adapt" => Ok(TrainMode::Adapt),
            "ablate_ema" | "ablate" => Ok(TrainMode::AblateEma),
            other => Err(Error::invalid("mode", format!("unknown mode {other:?}"))),
        }
    }
}

/// Everything the training engine needs besides the network and data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub mode: TrainMode,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub consistency: LossKind,
    pub ema_alpha_early: f64,
    pub ema_alpha_late: f64,
    /// Random spatial transforms on source and target slices.
    pub augment: bool,
    pub threshold: f64,
}

impl TrainConfig {
    /// Consistency weight in effect at `epoch`; zero unless adapting.
    pub fn gamma_at(&self, epoch: u32) -> f64 {
        if self.mode.uses_target() {
            consistency_weight_at_epoch(epoch, &self.schedule)
        } else {
            0.0
        }
    }

    pub fn ema_alpha_at(&self, epoch: u32) -> f64 {
        ema_alpha_schedule(epoch, self.schedule.rampup_epochs, self.ema_alpha_early, self.ema_alpha_late)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub student: ModelParams<T>,
    pub teacher: ModelParams<T>,
    pub adam: AdamState<T>,
    /// Epochs completed.
    pub epoch: u32,
    pub global_step: u64,
    /// α used by the most recent EMA update.
    pub ema_alpha: f64,
    pub ema_alpha_late: f64,
    pub consistency_kind: LossKind,
    pub gamma_max: f64,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh student from `net`, teacher copied from it.
    pub fn new(net: &UNet, cfg: &TrainConfig) -> Result<Self> {
        let student = net.build::<T>(cfg.seed);
        Ok(Self {
            teacher: student.clone(),
            adam: AdamState::new(&student, cfg.adam)?,
            student,
            epoch: 0,
            global_step: 0,
            ema_alpha: cfg.ema_alpha_early,
            ema_alpha_late: cfg.ema_alpha_late,
            consistency_kind: cfg.consistency,
            gamma_max: cfg.schedule.gamma_max,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepReport {
    pub task_loss: f64,
    pub consistency_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
    pub gamma: f64,
    pub ema_alpha: f64,
}

/// Inputs of one step; `target_images` is `None` when no consistency term
/// is computed.
#[derive(Clone, Debug)]
pub struct StepBatch<T> {
    pub source_images: Tensor<T>,
    pub source_masks: Tensor<T>,
    pub target_images: Option<Tensor<T>>,
}

/// Per-step schedule values and randomness identifiers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub seed: u64,
    pub epoch: u32,
    pub lr: f64,
    pub gamma: f64,
    pub ema_alpha: f64,
    pub augment: bool,
}

fn draw_specs(settings: &StepSettings, step: u64, branch: u64, n: usize) -> Vec<TransformSpec> {
    if !settings.augment {
        return vec![TransformSpec::identity(); n];
    }
    let mut rng = rng_for(settings.seed, &[stream::AUGMENT, step, branch]);
    (0..n).map(|i| sample_transform(&mut rng, step * 1024 + i as u64)).collect()
}

fn diverged<T>(state: &TrainState<T>, detail: String) -> Error {
    Error::Diverged {
        epoch: state.epoch,
        step: state.global_step,
        detail,
    }
}

/// One optimizer step: Dice on transformed source slices, consistency
/// between `student(g(x_t))` and `g(teacher(x_t))`, backward through the
/// student, Adam, then the EMA teacher update.
pub fn train_step<T: Scalar>(
    net: &UNet,
    state: &mut TrainState<T>,
    batch: &StepBatch<T>,
    settings: &StepSettings,
) -> Result<StepReport> {
    let step = state.global_step;
    let n_src = batch.source_images.shape()[0];
    let specs = draw_specs(settings, step, 0, n_src);
    let xs = apply_batch(&specs, &batch.source_images, Interpolation::Bilinear)?;
    let ys = apply_batch(&specs, &batch.source_masks, Interpolation::Nearest)?;

    let mut g = Graph::new();
    let bound = state.student.bind(&mut g, true);
    let xs = g.constant(xs);
    let ys = g.constant(ys);
    let ctx = RngContext::new(settings.seed, settings.epoch as u64, step, 0);
    let out = net.forward_graph(&mut g, &bound, xs, Mode::Train, Some(&ctx))?;
    let task = dice_loss(&mut g, out.probs, ys)?;

    let consistency = match &batch.target_images {
        Some(xt) if settings.gamma > 0.0 => {
            let specs = draw_specs(settings, step, 1, xt.shape()[0]);
            let (teacher_probs, _) = net.forward(&state.teacher, xt, Mode::Eval, None)?;
            let target = apply_batch(&specs, &teacher_probs, Interpolation::Bilinear)?;
            let moved = apply_batch(&specs, xt, Interpolation::Bilinear)?;
            let xt = g.constant(moved);
            let target = g.constant(target);
            let ctx = RngContext::new(settings.seed, settings.epoch as u64, step, 1);
            let student = net.forward_graph(&mut g, &bound, xt, Mode::Train, Some(&ctx))?;
            state.consistency_kind.apply(&mut g, student.probs, target)?
        }
        _ => g.constant(Tensor::scalar(T::zero())),
    };

    let task_v = g.value(task).item().as_f64();
    let cons_v = g.value(consistency).item().as_f64();
    if !task_v.is_finite() || !cons_v.is_finite() {
        return Err(diverged(state, format!("task loss {task_v}, consistency loss {cons_v}")));
    }
    let total = combined_objective(&mut g, task, consistency, settings.gamma)?;
    let total_v = g.value(total).item().as_f64();
    g.backward(total)?;
    state.student.collect_grads(&mut g, &bound)?;
    state.adam.step(&mut state.student, settings.lr)?;
    if !state.student.iter().all(|(_, t)| t.all_finite()) {
        return Err(diverged(state, "non-finite parameters after update".into()));
    }
    ema_update(&mut state.teacher, &state.student, settings.ema_alpha)?;
    state.ema_alpha = settings.ema_alpha;
    state.global_step += 1;
    Ok(StepReport {
        task_loss: task_v,
        consistency_loss: cons_v,
        total_loss: total_v,
        lr: settings.lr,
        gamma: settings.gamma,
        ema_alpha: settings.ema_alpha,
    })
}

/// Thresholded metrics of `params` over labeled `samples`.
pub fn evaluate_model<T: Scalar>(
    net: &UNet,
    params: &ModelParams<T>,
    samples: &[SliceSample],
    tau: f64,
) -> Result<MetricsRecord> {
    let mut records = Vec::with_capacity(samples.len());
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let x = stack_images(samples, chunk)?.cast::<T>();
        let y = stack_masks(samples, chunk)?.cast::<T>();
        let (probs, _) = net.forward(params, &x, Mode::Eval, None)?;
        records.extend(batch_metrics(&probs, &y, tau)?);
    }
    aggregate(&records)
}

/// One row of the per-epoch training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: u32,
    pub task_loss: f64,
    pub consistency_loss: f64,
    pub lr: f64,
    pub gamma: f64,
    pub val: MetricsRecord,
}

pub const EPOCH_LOG_HEADER: &str =
    "epoch,task_loss,consistency_loss,lr,gamma,val_dice,val_miou,val_precision,val_recall,val_specificity,val_hausdorff";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.task_loss,
            self.consistency_loss,
            self.lr,
            self.gamma,
            self.val.dice,
            self.val.miou,
            self.val.precision,
            self.val.recall,
            self.val.specificity,
            self.val.hausdorff
        )
    }
}

/// Parameters worth keeping from one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    pub epoch: u32,
    pub val: MetricsRecord,
    pub state: TrainState<T>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub log: Vec<EpochLog>,
    /// Snapshot with the highest validation Dice.
    pub best: Option<Snapshot<T>>,
    /// Set if training stopped early on a non-finite loss.
    pub diverged: Option<String>,
}

/// The model a mode reports on.
pub fn reported_params<'a, T>(mode: TrainMode, student: &'a ModelParams<T>, teacher: &'a ModelParams<T>) -> &'a ModelParams<T> {
    match mode {
        TrainMode::Baseline => student,
        TrainMode::Adapt | TrainMode::AblateEma => teacher,
    }
}

/// Trains for the remaining epochs of `cfg.schedule`, validating the
/// reported model after each epoch. A divergence ends training early with
/// the logs gathered so far.
pub fn train_loop<T: Scalar>(
    net: &UNet,
    split: &DataSplit,
    cfg: &TrainConfig,
    mut state: TrainState<T>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>> {
    cfg.schedule.validate()?;
    if cfg.batch_size < 2 || !cfg.batch_size.is_multiple_of(2) {
        return Err(Error::invalid("train_loop", format!("batch size {} must be even", cfg.batch_size)));
    }
    if split.validation.is_empty() {
        return Err(Error::EmptyPartition("validation"));
    }
    let source = &split.train_labeled;
    let target = &split.target_unlabeled;
    let mut log = Vec::new();
    let mut best: Option<Snapshot<T>> = None;
    let mut diverged = None;

    'epochs: while state.epoch < cfg.schedule.total_epochs {
        let epoch = state.epoch;
        let lr = lr_at_epoch(epoch, &cfg.schedule)?;
        let gamma = cfg.gamma_at(epoch);
        let settings = StepSettings {
            seed: cfg.seed,
            epoch,
            lr,
            gamma,
            ema_alpha: cfg.ema_alpha_at(epoch),
            augment: cfg.augment,
        };
        let batches: Vec<(Vec<usize>, Vec<usize>)> = if cfg.mode.uses_target() && gamma > 0.0 {
            mixed_batch_iterator(source.len(), target.len(), cfg.batch_size, cfg.seed, epoch as u64)?
                .map(|b| (b.source, b.target))
                .collect()
        } else {
            source_batches(source.len(), cfg.batch_size / 2, cfg.seed, epoch as u64)?
                .into_iter()
                .map(|s| (s, Vec::new()))
                .collect()
        };
        let (mut task_sum, mut cons_sum) = (0.0, 0.0);
        for (src, tgt) in &batches {
            let batch = StepBatch {
                source_images: stack_images(source, src)?.cast::<T>(),
                source_masks: stack_masks(source, src)?.cast::<T>(),
                target_images: if tgt.is_empty() {
                    None
                } else {
                    Some(stack_images(target, tgt)?.cast::<T>())
                },
            };
            match train_step(net, &mut state, &batch, &settings) {
                Ok(r) => {
                    task_sum += r.task_loss;
                    cons_sum += r.consistency_loss;
                }
                Err(Error::Diverged { detail, .. }) => {
                    diverged = Some(format!("epoch {epoch}, step {}: {detail}", state.global_step));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if state.teacher.has_any_grad() {
            return Err(Error::invalid("train_loop", "teacher parameters acquired gradients"));
        }
        state.epoch += 1;
        let reported = reported_params(cfg.mode, &state.student, &state.teacher);
        let val = evaluate_model(net, reported, &split.validation, cfg.threshold)?;
        let n = batches.len() as f64;
        let row = EpochLog {
            epoch,
            task_loss: task_sum / n,
            consistency_loss: cons_sum / n,
            lr,
            gamma,
            val,
        };
        on_epoch(&row);
        log.push(row);
        if best.as_ref().is_none_or(|b| val.dice > b.val.dice) {
            best = Some(Snapshot {
                epoch,
                val,
                state: state.clone(),
            });
        }
    }
    Ok(TrainOutcome {
        state,
        log,
        best,
        diverged,
    })
}
