//! L2 training with AdamW and the reconstruction / filtering / prediction
//! curriculum.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corrupt::{corrupt_with, mask_tail_for_prediction, to_offsets, CorruptionConfig, InputMode, ObservedSequence};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, MissFormer};
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::trajgen::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Reconstruction,
    Filtering,
    Prediction,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Reconstruction => "reconstruction",
            Task::Filtering => "filtering",
            Task::Prediction => "prediction",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(Task::Reconstruction),
            "filtering" => Ok(Task::Filtering),
            "prediction" => Ok(Task::Prediction),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// How the observed/predicted split is drawn for tail masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRange {
    pub obs: (usize, usize),
    pub pred: (usize, usize),
}

impl Default for SplitRange {
    fn default() -> Self {
        SplitRange { obs: (8, 14), pred: (6, 12) }
    }
}

impl SplitRange {
    /// Fixed `obs`/`pred` protocol such as 8/12.
    pub fn fixed(obs: usize, pred: usize) -> Self {
        SplitRange {
            obs: (obs, obs),
            pred: (pred, pred),
        }
    }

    /// Draws a prediction length for a sequence of `k` steps that keeps both
    /// the observed and predicted parts inside their ranges when possible.
    pub fn sample_pred(&self, k: usize, rng: &mut rng::Rng) -> usize {
        let lo = self.pred.0.max(k.saturating_sub(self.obs.1));
        let hi = self.pred.1.min(k.saturating_sub(self.obs.0));
        let n = if lo <= hi { rng.random_range(lo..=hi) } else { hi };
        n.min(k.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub task: Task,
    /// Epoch from which prediction-task inputs get their tail masked. `None`
    /// masks from the first epoch.
    pub curriculum_switch_epoch: Option<usize>,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub split: SplitRange,
    /// Redraw noise and missing masks every epoch.
    pub fresh_corruption: bool,
    pub lr_schedule: LrSchedule,
    /// Epochs of linear warm-up from zero before the schedule applies.
    pub warmup_epochs: usize,
    /// Rescale the whole gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

/// Learning-rate shape over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to 1% of it at the last step.
    Cosine,
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!("unknown learning-rate schedule `{other}`"))),
        }
    }
}

/// Learning rate at optimizer step `step` of `total`.
pub fn scheduled_lr(base: f64, schedule: LrSchedule, warmup_steps: usize, step: usize, total: usize) -> f64 {
    if step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Cosine => {
            let span = total.saturating_sub(warmup_steps).max(1);
            let t = ((step - warmup_steps) as f64 / span as f64).min(1.0);
            let floor = 0.01 * base;
            floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= f);
    }
    norm
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 100,
            batch_size: 64,
            task: Task::Reconstruction,
            curriculum_switch_epoch: None,
            weight_decay: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            split: SplitRange::default(),
            fresh_corruption: true,
            lr_schedule: LrSchedule::Constant,
            warmup_epochs: 0,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if let Some(s) = self.curriculum_switch_epoch {
            if s >= self.epochs {
                return Err(Error::Config(format!(
                    "curriculum switch epoch {s} must precede the last epoch {}",
                    self.epochs
                )));
            }
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("gradient clip must be positive, got {c}")));
            }
        }
        if self.warmup_epochs >= self.epochs && self.warmup_epochs > 0 {
            return Err(Error::Config("warm-up must be shorter than training".into()));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("weight decay must be >= 0 and eps > 0".into()));
        }
        Ok(())
    }

    /// Whether inputs of `epoch` get their tail masked.
    pub fn masks_tail(&self, epoch: usize) -> bool {
        self.task == Task::Prediction && self.curriculum_switch_epoch.is_none_or(|s| epoch >= s)
    }
}

/// Mean squared error over every coordinate of every step, masked input
/// steps included. `estimates` is `[k, 2]` or `[batch, k, 2]`.
pub fn mse_loss<'t>(estimates: &Var<'t>, truth: &[&Trajectory]) -> Result<Var<'t>> {
    let shape = estimates.shape();
    let expected: usize = truth.iter().map(|t| t.len() * 2).sum();
    let total: usize = shape.iter().product();
    if truth.is_empty() || expected != total || shape.last() != Some(&2) {
        return Err(Error::Length(format!(
            "estimates of shape {shape:?} do not match {} target steps",
            expected / 2
        )));
    }
    let data: Vec<f64> = truth.iter().flat_map(|t| t.positions.iter().flatten().copied()).collect();
    let target = estimates.tape().constant(Tensor::new(shape, data)?);
    let diff = estimates.sub(&target)?;
    Ok(diff.mul(&diff)?.mean()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay
/// (`p -= lr * wd * p` before the adaptive step).
pub fn adamw_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, hp: &AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Length("parameter, gradient and state counts differ".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[i].len() != p.len() {
            return Err(Error::Length(format!("parameter #{i}: size mismatch")));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("#{i}")));
        }
    }
    state.step += 1;
    let (b1, b2) = hp.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= hp.lr * hp.weight_decay * *w;
            *w -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Builds the model input for one trajectory: corruption, optional tail
/// masking, then conversion to the model's input mode.
pub fn make_input(
    traj: &Trajectory,
    corrupt_cfg: &CorruptionConfig,
    mode: InputMode,
    n_pred: usize,
    rng: &mut rng::Rng,
) -> Result<ObservedSequence> {
    finish_input(corrupt_with(traj, corrupt_cfg, rng)?, n_pred, mode)
}

/// Tail-masks a corrupted position sequence and converts it to `mode`.
pub fn finish_input(obs: ObservedSequence, n_pred: usize, mode: InputMode) -> Result<ObservedSequence> {
    let obs = if n_pred > 0 { mask_tail_for_prediction(&obs, n_pred)? } else { obs };
    match mode {
        InputMode::Positions => Ok(obs),
        InputMode::Offsets => to_offsets(&obs),
    }
}

pub(crate) const TAIL_STREAM: u64 = 0x7461_696c;

/// Per-epoch statistics handed to the progress hook.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Fraction of input steps masked as prediction tail.
    pub masked_tail_fraction: f64,
    pub wallclock_ms: u128,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub losses: Vec<f64>,
    pub masked_tail_fraction: Vec<f64>,
    pub wallclock_ms: Vec<u128>,
    pub config: TrainConfig,
    pub corruption: CorruptionConfig,
}

impl TrainRun {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one epoch")
    }
}

/// Training-loop loss and gradients for one batch of equal-length inputs.
pub fn batch_loss_and_grads(
    model: &MissFormer,
    inputs: &[&ObservedSequence],
    truth: &[&Trajectory],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let params = model.bind(&tape, true);
    let (est, _) = model.forward(&tape, &params, inputs, ForwardOptions::default())?;
    let loss = mse_loss(&est, truth)?;
    tape.backward(loss)?;
    let grads = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.value().len()]))
        .collect();
    Ok((loss.item(), grads))
}

/// RMS coordinate magnitude of the inputs and targets of `corpus`; used to
/// pick `input_scale` and `output_scale` so the embedding sees O(1) values.
pub fn suggest_scales(corpus: &[Trajectory], mode: InputMode) -> (f64, f64) {
    let rms = |it: &mut dyn Iterator<Item = f64>| {
        let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
        if n == 0 || s == 0.0 {
            1.0
        } else {
            (s / n as f64).sqrt()
        }
    };
    let out = rms(&mut corpus.iter().flat_map(|t| t.positions.iter().flatten().copied()));
    let inp = match mode {
        InputMode::Positions => out,
        InputMode::Offsets => rms(&mut corpus.iter().flat_map(|t| {
            t.positions.windows(2).flat_map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]])
        })),
    };
    (inp, out)
}

pub fn train(
    model: &mut MissFormer,
    corpus: &[Trajectory],
    corrupt_cfg: &CorruptionConfig,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    train_with(model, corpus, corrupt_cfg, cfg, |_| {})
}

/// [`train`] with a hook called after every epoch.
pub fn train_with(
    model: &mut MissFormer,
    corpus: &[Trajectory],
    corrupt_cfg: &CorruptionConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainRun> {
    cfg.validate()?;
    corrupt_cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let k_max = model.config().k_max;
    if let Some(t) = corpus.iter().find(|t| t.len() > k_max || t.len() < 2) {
        return Err(Error::Length(format!("corpus trajectory of length {} outside [2, {k_max}]", t.len())));
    }
    let mode = model.config().input_mode;
    let mut hp = AdamHyper {
        lr: cfg.learning_rate,
        betas: cfg.betas,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    let mut state = AdamState::new(model.params());
    let mut run = TrainRun {
        losses: Vec::with_capacity(cfg.epochs),
        masked_tail_fraction: Vec::with_capacity(cfg.epochs),
        wallclock_ms: Vec::with_capacity(cfg.epochs),
        config: cfg.clone(),
        corruption: corrupt_cfg.clone(),
    };
    let start = Instant::now();
    let mut lengths: BTreeMap<usize, usize> = BTreeMap::new();
    for t in corpus {
        *lengths.entry(t.len()).or_default() += 1;
    }
    let steps_per_epoch: usize = lengths.values().map(|n| n.div_ceil(cfg.batch_size)).sum();
    let total_steps = steps_per_epoch * cfg.epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let corruption_key = if cfg.fresh_corruption { epoch as u64 } else { 0 };
        let tail = cfg.masks_tail(epoch);
        let mut inputs = Vec::with_capacity(corpus.len());
        let (mut masked, mut steps) = (0usize, 0usize);
        for (i, t) in corpus.iter().enumerate() {
            let mut r = rng::stream(rng::mix(&[corrupt_cfg.seed, corruption_key]), i as u64);
            let observed = corrupt_with(t, corrupt_cfg, &mut r)?;
            // separate stream: switching the tail on never shifts the noise draws
            let mut tail_rng = rng::stream(rng::mix(&[corrupt_cfg.seed, corruption_key, TAIL_STREAM]), i as u64);
            let n_pred = if tail { cfg.split.sample_pred(t.len(), &mut tail_rng) } else { 0 };
            let obs = finish_input(observed, n_pred, mode)?;
            masked += n_pred;
            steps += t.len();
            inputs.push(obs);
        }

        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut shuffle_rng = rng::stream(rng::mix(&[cfg.seed, 0x7368_7566]), epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in order {
            buckets.entry(corpus[i].len()).or_default().push(i);
        }
        let mut batches: Vec<Vec<usize>> = buckets
            .into_values()
            .flat_map(|b| b.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>())
            .collect();
        batches.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for batch in &batches {
            let xs: Vec<&ObservedSequence> = batch.iter().map(|&i| &inputs[i]).collect();
            let ys: Vec<&Trajectory> = batch.iter().map(|&i| &corpus[i]).collect();
            let diverged = |_| Error::Diverged {
                epoch,
                last_finite: epoch.checked_sub(1),
            };
            let (loss, mut grads) = match batch_loss_and_grads(model, &xs, &ys) {
                Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(diverged(())),
                other => other?,
            };
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            hp.lr = scheduled_lr(cfg.learning_rate, cfg.lr_schedule, warmup_steps, step, total_steps);
            step += 1;
            if let Err(e) = adamw_step(model.params_mut(), &grads, &mut state, &hp) {
                return Err(match e {
                    Error::NonFiniteGradient(_) => diverged(()),
                    e => e,
                });
            }
            if model.params().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
                return Err(diverged(()));
            }
            loss_sum += loss * batch.len() as f64;
        }
        let loss = loss_sum / corpus.len() as f64;
        let stats = EpochStats {
            epoch,
            loss,
            masked_tail_fraction: masked as f64 / steps as f64,
            wallclock_ms: start.elapsed().as_millis(),
        };
        on_epoch(&stats);
        run.losses.push(stats.loss);
        run.masked_tail_fraction.push(stats.masked_tail_fraction);
        run.wallclock_ms.push(stats.wallclock_ms);
    }
    Ok(run)
}
