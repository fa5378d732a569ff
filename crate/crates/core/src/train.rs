//! SGD with momentum, the warmup/step learning-rate schedule, seeded
//! initialization, the training loop and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams, PreparedClip};
use crate::passing::ModelConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear warmup to `base_lr`, then division by `decay_factor` at each decay
/// epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: f64,
    pub decay_epochs: Vec<f64>,
    pub decay_factor: f64,
    pub total_epochs: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            warmup_start_lr: 1.25e-4,
            warmup_epochs: 5.0,
            decay_epochs: vec![10.0, 15.0],
            decay_factor: 10.0,
            total_epochs: 20.0,
        }
    }
}

impl Schedule {
    /// Same shape with every epoch boundary rescaled to `total_epochs`.
    pub fn scaled(&self, total_epochs: f64) -> Self {
        let k = total_epochs / self.total_epochs;
        Self {
            warmup_epochs: self.warmup_epochs * k,
            decay_epochs: self.decay_epochs.iter().map(|e| e * k).collect(),
            total_epochs,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first_decay = self
            .decay_epochs
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let sorted = self.decay_epochs.windows(2).all(|w| w[0] < w[1]);
        let ok = self.base_lr >= 0.0
            && self.warmup_start_lr >= 0.0
            && self.decay_factor > 0.0
            && self.warmup_epochs >= 0.0
            && sorted
            && (self.decay_epochs.is_empty() || self.warmup_epochs < first_decay)
            && self.decay_epochs.iter().all(|&e| e < self.total_epochs)
            && self.total_epochs >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent schedule {self:?}")))
        }
    }

    /// Learning rate at a fractional epoch.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        if epoch < self.warmup_epochs {
            let frac = epoch / self.warmup_epochs;
            return self.warmup_start_lr + frac * (self.base_lr - self.warmup_start_lr);
        }
        let passed = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base_lr / self.decay_factor.powi(passed as i32)
    }
}

/// Momentum velocities keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor<T>>,
    pub step: usize,
}

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-7;

impl<T: Scalar> OptimState<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
            step: 0,
        }
    }
}

impl<T: Scalar> Default for OptimState<T> {
    fn default() -> Self {
        Self::new(DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY)
    }
}

/// `v <- mu v + (g + wd p)`, `p <- p - lr v` for every parameter. Checks all
/// gradients before touching anything.
pub fn sgd_step<T: Scalar>(
    params: &mut ModelParams<Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    lr: f64,
    state: &mut OptimState<T>,
) -> Result<()> {
    let mut problem = None;
    params.visit(&mut |name, p| {
        if problem.is_some() {
            return;
        }
        match grads.get(name) {
            None => problem = Some(Error::Contract(format!("no gradient for `{name}`"))),
            Some(g) if g.shape() != p.shape() => {
                problem = Some(Error::shape("sgd_step", p.shape(), g.shape()))
            }
            Some(g) if g.data().iter().any(|x| !x.is_finite()) => {
                problem = Some(Error::NonFiniteGradient {
                    param: name.to_string(),
                    step: state.step,
                })
            }
            _ => {}
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    let mu = T::lit(state.momentum);
    let wd = T::lit(state.weight_decay);
    let lr = T::lit(lr);
    let velocity = &mut state.velocity;
    params.visit_mut(&mut |name, p| {
        let g = &grads[name];
        let v = velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + (gv + wd * *pv);
            *pv = *pv - lr * *vv;
        }
    });
    state.step += 1;
    Ok(())
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, 1),
        [a, b] => (*a, *b),
        _ => (shape.iter().product(), 1),
    }
}

/// Glorot-uniform weights, zero biases and shifts, unit layer-norm scales,
/// drawn in parameter order from one seeded stream.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<Tensor<T>>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<Tensor<T>>::zeros(config);
    params.visit_mut(&mut |name, p| {
        if name.ends_with(".b") || name.ends_with("ln.shift") {
            *p = Tensor::zeros(p.shape());
        } else if name.ends_with("ln.scale") {
            *p = Tensor::ones(p.shape());
        } else {
            let (fan_in, fan_out) = fans(p.shape());
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a);
            for x in p.data_mut() {
                *x = T::lit(dist.sample(&mut rng));
            }
        }
    });
    Ok(params)
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Clips per step before the temporal-extent reduction.
    pub batch_size: usize,
    /// Divide the batch size by `tau_c`.
    pub scale_batch_by_tau: bool,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            scale_batch_by_tau: true,
            schedule: Schedule::default(),
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

impl TrainOptions {
    pub fn effective_batch(&self, tau_c: usize) -> usize {
        if self.scale_batch_by_tau {
            (self.batch_size / tau_c.max(1)).max(1)
        } else {
            self.batch_size.max(1)
        }
    }

    /// The schedule stretched or squeezed to `epochs`.
    pub fn effective_schedule(&self) -> Schedule {
        if self.schedule.total_epochs == self.epochs as f64 {
            self.schedule.clone()
        } else {
            self.schedule.scaled(self.epochs as f64)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean clip loss over the epoch's steps, before each step.
    pub loss: f64,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    pub steps: usize,
}

/// Summed loss and gradients of a batch, computed in parallel and reduced in
/// clip order.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &[PreparedClip<T>],
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let parts: Vec<(T, BTreeMap<String, Tensor<T>>)> = batch
        .par_iter()
        .map(|c| model.loss_and_grad(c))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut total: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for (l, grads) in parts {
        loss += l.to_f64_lossy();
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    Ok((loss, total))
}

/// Runs `options.epochs` epochs over `clips` in order, updating `model` in
/// place. `on_epoch` sees each log entry as it is produced.
pub fn train_loop<T: Scalar>(
    model: &mut Model<T>,
    clips: &[PreparedClip<T>],
    options: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if clips.is_empty() {
        return Err(Error::Validation("no clips to train on".into()));
    }
    model.config.validate()?;
    model.params.check(&model.config)?;
    for c in clips {
        if c.layout.features().cols() != model.config.channels {
            return Err(Error::Validation(format!(
                "clip `{}` has {} channels, model expects {}",
                c.clip_id,
                c.layout.features().cols(),
                model.config.channels
            )));
        }
        if c.layout.tau() != (model.config.tau_c, model.config.tau_s) {
            return Err(Error::Validation(format!(
                "clip `{}` was prepared with tau {:?}, model uses ({}, {})",
                c.clip_id,
                c.layout.tau(),
                model.config.tau_c,
                model.config.tau_s
            )));
        }
    }
    let schedule = options.effective_schedule();
    if options.epochs > 0 {
        schedule.validate()?;
    }
    let batch = options.effective_batch(model.config.tau_c);
    let steps = clips.len().div_ceil(batch);
    let mut state = OptimState::new(options.momentum, options.weight_decay);
    let mut log = Vec::with_capacity(options.epochs);
    for epoch in 0..options.epochs {
        let mut loss_sum = 0.0;
        for (s, chunk) in clips.chunks(batch).enumerate() {
            let (loss, grads) = batch_gradients(model, chunk)?;
            loss_sum += loss / chunk.len() as f64;
            let lr = schedule.lr_at(epoch as f64 + s as f64 / steps as f64);
            sgd_step(&mut model.params, &grads, lr, &mut state)?;
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / steps as f64,
            lr: schedule.lr_at(epoch as f64),
            steps,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

pub const CHECKPOINT_FORMAT: &str = "stgraph-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    /// IEEE-754 bit patterns, hex.
    bits: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredCheckpoint {
    format: String,
    version: u32,
    scalar: String,
    seed: u64,
    config: ModelConfig,
    params: Vec<StoredTensor>,
}

/// JSON text of a checkpoint. Values are stored as exact bit patterns so a
/// save/load cycle is lossless.
pub fn checkpoint_json<T: Scalar>(model: &Model<T>) -> Result<String> {
    let params = model
        .params
        .named()
        .into_iter()
        .map(|(name, t)| StoredTensor {
            name,
            shape: t.shape().to_vec(),
            bits: t
                .data()
                .iter()
                .map(|x| format!("{:x}", x.to_bits_u64()))
                .collect(),
        })
        .collect();
    let stored = StoredCheckpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        scalar: T::NAME.into(),
        seed: model.config.seed,
        config: model.config.clone(),
        params,
    };
    Ok(serde_json::to_string_pretty(&stored)? + "\n")
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, checkpoint_json(model)?)?;
    Ok(())
}

pub fn parse_checkpoint<T: Scalar>(text: &str) -> Result<Model<T>> {
    let stored: StoredCheckpoint = serde_json::from_str(text)?;
    if stored.format != CHECKPOINT_FORMAT || stored.version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported checkpoint {} v{}",
            stored.format, stored.version
        )));
    }
    if stored.scalar != T::NAME {
        return Err(Error::Validation(format!(
            "checkpoint holds {} values, expected {}",
            stored.scalar,
            T::NAME
        )));
    }
    let mut named = BTreeMap::new();
    for t in stored.params {
        let data = t
            .bits
            .iter()
            .map(|b| {
                u64::from_str_radix(b, 16)
                    .map(T::from_bits_u64)
                    .map_err(|e| Error::Validation(format!("parameter `{}`: {e}", t.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(t.shape, data)
            .map_err(|e| Error::Validation(format!("parameter `{}`: {e}", t.name)))?;
        if named.insert(t.name.clone(), tensor).is_some() {
            return Err(Error::Validation(format!(
                "parameter `{}` stored twice",
                t.name
            )));
        }
    }
    let params = ModelParams::from_named(&stored.config, named)?;
    Model::new(stored.config, params)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Validation(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    parse_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::ReadoutKind;

    #[test]
    fn schedule_points() {
        let s = Schedule::default();
        assert_eq!(s.lr_at(0.0), 1.25e-4);
        assert_eq!(s.lr_at(5.0), 0.1);
        assert!((s.lr_at(12.0) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(16.0) - 0.001).abs() < 1e-15);
        assert!((s.lr_at(2.5) - 0.0500625).abs() < 1e-15);
    }

    #[test]
    fn scaled_schedule_keeps_shape() {
        let s = Schedule::default().scaled(200.0);
        assert_eq!(s.warmup_epochs, 50.0);
        assert_eq!(s.decay_epochs, vec![100.0, 150.0]);
        assert_eq!(s.lr_at(120.0), Schedule::default().lr_at(12.0));
    }

    #[test]
    fn init_is_seeded_and_structured() {
        let cfg = ModelConfig::new(5, ReadoutKind::Action { classes: 3 });
        let a = init_params::<f64>(&cfg, 7).unwrap();
        let b = init_params::<f64>(&cfg, 7).unwrap();
        let c = init_params::<f64>(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.named() {
            if name.ends_with("ln.scale") {
                assert!(t.data().iter().all(|&x| x == 1.0));
            }
            if name.ends_with(".b") || name.ends_with("ln.shift") {
                assert!(t.data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = ModelConfig::new(
            3,
            ReadoutKind::SceneGraph {
                objects: 4,
                relations: 2,
                lambda: 0.5,
            },
        );
        let model = Model::new(cfg.clone(), init_params::<f64>(&cfg, 1).unwrap()).unwrap();
        let text = checkpoint_json(&model).unwrap();
        let back: Model<f64> = parse_checkpoint(&text).unwrap();
        assert_eq!(back, model);
        assert!(parse_checkpoint::<f32>(&text).is_err());
    }
}
