//! Slice-wise training of one model per view: mini-batch SGD with momentum,
//! step-decay learning rate and the generalized Dice loss.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Mode, Tape};
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError};
use crate::error::TensorError;
use crate::loss::ClassWeights;
use crate::model::{Arch, InfiNet, InfiNetConfig};
use crate::optim::{sgd_momentum_step, step_decay, Velocity};
use crate::sampler::{derive_seed, BatchSampler};
use crate::volume::{Axis, LabeledVolume, VolumeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Gdl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub view_axis: Axis,
    pub loss: LossKind,
    /// Early stop after this many consecutive epochs without improvement.
    pub patience: usize,
    /// Minimum decrease of the mean epoch loss that counts as improvement.
    pub min_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            lr_decay_factor: 10.0,
            lr_decay_every: 10,
            momentum: 0.95,
            batch_size: 8,
            max_epochs: 100,
            seed: 0,
            view_axis: Axis::Axial,
            loss: LossKind::Gdl,
            patience: 10,
            min_improvement: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |reason: &str| Err(TrainError::Config(reason.to_string()));
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return bad("lr0 must be finite and >= 0");
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return bad("lr_decay_factor must be > 0");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// Architecture and width of the model a training run builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub config: InfiNetConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            arch: Arch::DualArm,
            config: InfiNetConfig::default(),
        }
    }
}

/// Parses a `key = value` config file into training and model settings.
/// Blank lines and `#` comments are ignored; unknown keys are errors.
pub fn parse_config(text: &str) -> Result<(TrainConfig, ModelSpec), TrainError> {
    let mut cfg = TrainConfig::default();
    let mut spec = ModelSpec::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let err = |e: &dyn fmt::Display| TrainError::Config(format!("line {}: {key}: {e}", lineno + 1));
        macro_rules! num {
            () => {
                value.parse().map_err(|e| err(&e))?
            };
        }
        match key {
            "lr0" => cfg.lr0 = num!(),
            "lr_decay_factor" => cfg.lr_decay_factor = num!(),
            "lr_decay_every" => cfg.lr_decay_every = num!(),
            "momentum" => cfg.momentum = num!(),
            "batch_size" => cfg.batch_size = num!(),
            "max_epochs" => cfg.max_epochs = num!(),
            "seed" => cfg.seed = num!(),
            "patience" => cfg.patience = num!(),
            "min_improvement" => cfg.min_improvement = num!(),
            "view" | "view_axis" => cfg.view_axis = value.parse().map_err(|e| err(&e))?,
            "loss" => {
                cfg.loss = match value {
                    "gdl" => LossKind::Gdl,
                    other => return Err(err(&format!("unknown loss `{other}`"))),
                }
            }
            "arch" => {
                spec.arch = match value {
                    "dual-arm" | "dual" => Arch::DualArm,
                    "single-arm" | "single" => Arch::SingleArm,
                    other => return Err(err(&format!("unknown arch `{other}`"))),
                }
            }
            "num_classes" => spec.config.num_classes = num!(),
            "base_channels" => spec.config.base_channels = num!(),
            "depth" => spec.config.depth = num!(),
            "bottleneck_skips" => spec.config.bottleneck_skips = num!(),
            _ => return Err(TrainError::Config(format!("line {}: unknown key `{key}`", lineno + 1))),
        }
    }
    cfg.validate()?;
    spec.config.validate()?;
    Ok((cfg, spec))
}

/// Renders a config in the format read by [`parse_config`].
pub fn format_config(cfg: &TrainConfig, spec: &ModelSpec) -> String {
    let arch = match spec.arch {
        Arch::DualArm => "dual-arm",
        Arch::SingleArm => "single-arm",
    };
    format!(
        "lr0 = {}\nlr_decay_factor = {}\nlr_decay_every = {}\nmomentum = {}\nbatch_size = {}\n\
         max_epochs = {}\nseed = {}\nview = {}\nloss = gdl\npatience = {}\nmin_improvement = {}\n\
         arch = {arch}\nnum_classes = {}\nbase_channels = {}\ndepth = {}\nbottleneck_skips = {}\n",
        cfg.lr0,
        cfg.lr_decay_factor,
        cfg.lr_decay_every,
        cfg.momentum,
        cfg.batch_size,
        cfg.max_epochs,
        cfg.seed,
        cfg.view_axis,
        cfg.patience,
        cfg.min_improvement,
        spec.config.num_classes,
        spec.config.base_channels,
        spec.config.depth,
        spec.config.bottleneck_skips,
    )
}

pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    step_decay(cfg.lr0, cfg.lr_decay_factor, cfg.lr_decay_every, epoch)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] VolumeError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
}

impl TrainError {
    /// True for failures caused by numerics rather than inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. }
                | TrainError::Step {
                    source: TensorError::NonFinite { .. },
                    ..
                }
        )
    }
}

/// Label frequencies pooled over every training volume, turned into
/// inverse-square weights. A training set containing a single class yields
/// degenerate weights (one nonzero entry) and a warning.
pub fn compute_class_weights(volumes: &[LabeledVolume]) -> Result<ClassWeights, TrainError> {
    let first = volumes
        .first()
        .ok_or_else(|| TrainError::Config("no training volumes".into()))?;
    let classes = first.num_classes;
    let mut counts = vec![0usize; classes];
    for v in volumes {
        if v.num_classes != classes {
            return Err(TrainError::Config(format!(
                "volumes disagree on class count ({} vs {})",
                classes, v.num_classes
            )));
        }
        for &l in &v.labels {
            counts[usize::from(l)] += 1;
        }
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let weights = ClassWeights::from_frequencies(&freqs);
    if weights.active_classes() < 2 {
        log::warn!("training labels contain a single class; class weights are degenerate");
    }
    Ok(weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub view: Axis,
    pub arch: Arch,
    pub epoch_losses: Vec<f64>,
    pub epoch_lrs: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub stopped_early: bool,
    pub checkpoint: Option<PathBuf>,
    pub class_weights: ClassWeights,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, ((loss, lr), secs)) in self
            .epoch_losses
            .iter()
            .zip(&self.epoch_lrs)
            .zip(&self.epoch_seconds)
            .enumerate()
        {
            let _ = writeln!(
                s,
                "view={} epoch={i} loss={loss:.6} lr={lr:e} seconds={secs:.2}",
                self.view
            );
        }
        let _ = writeln!(
            s,
            "view={} epochs={} stopped_early={} weights={:?}",
            self.view,
            self.epoch_losses.len(),
            self.stopped_early,
            self.class_weights.weights
        );
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(s, "view={} checkpoint={}", self.view, p.display());
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Mean of per-batch losses, summed in sorted order so the value does not
/// depend on the order batches were visited.
fn order_free_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Training state of one view. Everything needed to continue is in the
/// checkpoint returned by [`Trainer::checkpoint`].
pub struct Trainer<'a> {
    model: InfiNet<f32>,
    velocity: Velocity<f32>,
    cfg: TrainConfig,
    weights: ClassWeights,
    sampler: BatchSampler<'a>,
    epoch: usize,
    losses: Vec<f64>,
    lrs: Vec<f64>,
    seconds: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(volumes: &'a [LabeledVolume], spec: ModelSpec, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let weights = compute_class_weights(volumes)?;
        if weights.num_classes() != spec.config.num_classes {
            return Err(TrainError::Config(format!(
                "model has {} classes, data has {}",
                spec.config.num_classes,
                weights.num_classes()
            )));
        }
        let sampler = BatchSampler::new(volumes, cfg.view_axis, cfg.batch_size, derive_seed(cfg.seed, 1))?;
        let (_, h, w) = cfg.view_axis.slice_geometry(volumes[0].dims);
        let config = spec.config.with_input(h, w);
        config.check_spatial(h, w)?;
        let model = InfiNet::new(config, spec.arch, derive_seed(cfg.seed, 0))?;
        Ok(Self {
            model,
            velocity: Velocity::new(),
            cfg,
            weights,
            sampler,
            epoch: 0,
            losses: Vec::new(),
            lrs: Vec::new(),
            seconds: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by a previous run.
    pub fn resume(volumes: &'a [LabeledVolume], checkpoint: Checkpoint) -> Result<Self, TrainError> {
        let cfg = checkpoint
            .train_config
            .ok_or_else(|| TrainError::Config("checkpoint carries no training config".into()))?;
        cfg.validate()?;
        let weights = match checkpoint.class_weights {
            Some(w) => w,
            None => compute_class_weights(volumes)?,
        };
        let sampler = BatchSampler::new(volumes, cfg.view_axis, cfg.batch_size, derive_seed(cfg.seed, 1))?;
        let (_, h, w) = cfg.view_axis.slice_geometry(volumes[0].dims);
        checkpoint.model.config().check_spatial(h, w)?;
        let n = checkpoint.loss_history.len();
        Ok(Self {
            model: checkpoint.model,
            velocity: checkpoint.velocity,
            cfg,
            weights,
            sampler,
            epoch: checkpoint.epoch,
            losses: checkpoint.loss_history,
            lrs: checkpoint.lr_history,
            seconds: vec![0.0; n],
        })
    }

    pub fn model(&self) -> &InfiNet<f32> {
        &self.model
    }

    pub fn into_model(self) -> InfiNet<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn class_weights(&self) -> &ClassWeights {
        &self.weights
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            velocity: self.velocity.clone(),
            epoch: self.epoch,
            seed: self.cfg.seed,
            view: Some(self.cfg.view_axis),
            loss_history: self.losses.clone(),
            lr_history: self.lrs.clone(),
            train_config: Some(self.cfg.clone()),
            class_weights: Some(self.weights.clone()),
        }
    }

    /// True once the loss has failed to improve by `min_improvement` for
    /// `patience` consecutive epochs.
    pub fn converged(&self) -> bool {
        let p = self.cfg.patience;
        if p == 0 || self.losses.len() <= p {
            return false;
        }
        let n = self.losses.len();
        let best_before = self.losses[..n - p].iter().copied().fold(f64::INFINITY, f64::min);
        self.losses[n - p..]
            .iter()
            .all(|&l| l > best_before - self.cfg.min_improvement)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.max_epochs || self.converged()
    }

    /// Runs one epoch and returns its mean loss. On error the model is left
    /// as it was after the last successful batch.
    pub fn run_epoch(&mut self) -> Result<f64, TrainError> {
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.cfg);
        let opts = self.weights.gdl_options::<f32>();
        let classes = self.model.config().num_classes;
        let start = Instant::now();
        let mut batch_losses = Vec::with_capacity(self.sampler.batches_per_epoch());
        for (batch, b) in self.sampler.epoch(epoch).enumerate() {
            let at = |source: TensorError| match source {
                TensorError::NonFinite { .. } => TrainError::NonFiniteLoss { epoch, batch },
                source => TrainError::Step { epoch, batch, source },
            };
            let target = b.one_hot(classes);
            let mut tape = Tape::new();
            let t1 = tape.constant(b.t1);
            let t2 = tape.constant(b.t2);
            let pass = self.model.forward(&mut tape, t1, t2, Mode::Train).map_err(at)?;
            let loss = tape.gdl_loss(pass.probabilities, &target, &opts).map_err(at)?;
            let value = f64::from(tape.value(loss).data()[0]);
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch });
            }
            let mut grads = tape.backward(loss).map_err(at)?;
            let mut named = pass.collect_gradients(&mut grads);
            sgd_momentum_step(
                self.model.params_mut().trainable_mut(),
                &mut named,
                &mut self.velocity,
                lr as f32,
                self.cfg.momentum as f32,
            )
            .map_err(at)?;
            batch_losses.push(value);
        }
        let mean = order_free_mean(&mut batch_losses);
        self.losses.push(mean);
        self.lrs.push(lr);
        self.seconds.push(start.elapsed().as_secs_f64());
        self.epoch += 1;
        Ok(mean)
    }

    /// Trains until `max_epochs` or convergence, checkpointing to
    /// `checkpoint_path` after every epoch when given.
    pub fn run(&mut self, checkpoint_path: Option<&Path>) -> Result<TrainReport, TrainError> {
        while !self.finished() {
            let loss = self.run_epoch()?;
            log::info!(
                "view={} epoch={} loss={loss:.6} lr={:e}",
                self.cfg.view_axis,
                self.epoch - 1,
                self.lrs.last().copied().unwrap_or_default()
            );
            if let Some(path) = checkpoint_path {
                self.save(path)?;
            }
        }
        if let Some(path) = checkpoint_path {
            self.save(path)?;
        }
        Ok(self.report(checkpoint_path))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        save_checkpoint(&self.checkpoint(), path).map_err(|source| TrainError::Checkpoint {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn report(&self, checkpoint_path: Option<&Path>) -> TrainReport {
        TrainReport {
            view: self.cfg.view_axis,
            arch: self.model.arch(),
            epoch_losses: self.losses.clone(),
            epoch_lrs: self.lrs.clone(),
            epoch_seconds: self.seconds.clone(),
            stopped_early: self.converged() && self.epoch < self.cfg.max_epochs,
            checkpoint: checkpoint_path.map(Path::to_path_buf),
            class_weights: self.weights.clone(),
        }
    }
}

/// Trains one view to completion.
pub fn train(
    volumes: &[LabeledVolume],
    spec: ModelSpec,
    cfg: TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<(TrainReport, InfiNet<f32>), TrainError> {
    let mut trainer = Trainer::new(volumes, spec, cfg)?;
    let report = trainer.run(checkpoint_path)?;
    Ok((report, trainer.into_model()))
}

/// Seed used for the model of `axis` when training all views from one
/// template seed.
pub fn view_seed(seed: u64, axis: Axis) -> u64 {
    derive_seed(seed, 100 + axis.index() as u64)
}

/// Checkpoint file name used for `axis` inside an output directory.
pub fn view_checkpoint_name(axis: Axis) -> String {
    format!("{}.ckpt", axis.name())
}

/// Trains one independent model per axis. With `concurrent` the three runs
/// use one thread each; results are identical either way.
pub fn train_all_views(
    volumes: &[LabeledVolume],
    spec: ModelSpec,
    template: &TrainConfig,
    out_dir: Option<&Path>,
    concurrent: bool,
) -> Result<Vec<(TrainReport, InfiNet<f32>)>, TrainError> {
    let job = |axis: Axis| {
        let cfg = TrainConfig {
            view_axis: axis,
            seed: view_seed(template.seed, axis),
            ..template.clone()
        };
        let path = out_dir.map(|d| d.join(view_checkpoint_name(axis)));
        train(volumes, spec, cfg, path.as_deref())
    };
    if concurrent {
        std::thread::scope(|s| {
            let handles: Vec<_> = Axis::ALL.iter().map(|&a| s.spawn(move || job(a))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        })
    } else {
        Axis::ALL.iter().map(|&a| job(a)).collect()
    }
}
