//! Mini-batch Adam with plateau learning-rate decay and best-validation
//! checkpointing.

use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::model::ResNet;
use crate::ops;
use crate::seeds;
use crate::tensor::Tensor;

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const SPLIT_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// End the run once the learning rate has been cut this many times.
    pub stop_after_lr_drops: Option<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            plateau_patience: 7,
            lr_factor: 10.0,
            batch_size: 32,
            seed: 0,
            validation_fraction: 0.02,
            stop_after_lr_drops: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.plateau_patience < 1 {
            return bad("plateau_patience must be at least 1".into());
        }
        if !(self.lr_factor > 1.0) {
            return bad(format!("lr_factor must exceed 1, got {}", self.lr_factor));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must be in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let m: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { v: m.clone(), m, t: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient anywhere aborts the
/// step before any parameter or moment is touched.
pub fn adam_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[&Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!(
                "parameter {i}: shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (hyper.beta1 as f32, hyper.beta2 as f32);
    let (a1, a2) = ((1.0 - hyper.beta1) as f32, (1.0 - hyper.beta2) as f32);
    let step = (lr / c1) as f32;
    let inv_c2 = (1.0 / c2) as f32;
    let eps = hyper.eps as f32;
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &g), (m, v)) in it {
            *m = b1 * *m + a1 * g;
            *v = b2 * *v + a2 * g * g;
            *w -= step * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Divides the learning rate by `factor` once `patience` consecutive epochs
/// fail to strictly improve on the best validation loss, then starts counting
/// again.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    initial_lr: f64,
    patience: usize,
    factor: f64,
    best: f64,
    bad_epochs: usize,
    drops: u32,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, patience: usize, factor: f64) -> Self {
        Self {
            initial_lr,
            patience,
            factor,
            best: f64::INFINITY,
            bad_epochs: 0,
            drops: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.initial_lr / self.factor.powi(self.drops as i32)
    }

    pub fn drops(&self) -> u32 {
        self.drops
    }

    /// Records one epoch's validation loss and returns the rate for the next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.drops += 1;
                self.bad_epochs = 0;
            }
        }
        self.lr()
    }
}

/// The learning rate after replaying a whole validation-loss history.
pub fn plateau_scheduler(history: &[f64], initial_lr: f64, patience: usize, factor: f64) -> f64 {
    let mut s = PlateauScheduler::new(initial_lr, patience, factor);
    for &l in history {
        s.observe(l);
    }
    s.lr()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub improved: bool,
    /// Kept out of the JSON-lines log so that it stays reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|i| self.epochs.get(i))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out += &serde_json::to_string(e)?;
            out.push('\n');
        }
        Ok(out)
    }

    /// Per-epoch wall times, one JSON object per line.
    pub fn timing_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| format!("{{\"epoch\":{},\"wall_time_s\":{:.3}}}\n", e.epoch, e.wall_time_s))
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let epochs: Vec<EpochRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let best_epoch = epochs
            .iter()
            .enumerate()
            .filter(|(_, e)| e.improved)
            .map(|(i, _)| i)
            .next_back();
        Ok(Self { epochs, best_epoch })
    }
}

pub struct TrainOutcome {
    /// Snapshot from the epoch with the lowest validation loss.
    pub best: ResNet<f32>,
    pub last: ResNet<f32>,
    pub log: TrainLog,
}

/// Mean cross-entropy over a whole set in inference mode, batched in order.
pub fn evaluate_loss(model: &ResNet<f32>, set: &LabeledSet, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = set.batch(chunk);
        let p = model.predict(&x)?;
        total += ops::bce_loss(&p, &y)? as f64 * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Inference-mode probabilities for every exam, `[N, classes]`.
pub fn predict_set(model: &ResNet<f32>, set: &LabeledSet, batch_size: usize) -> Result<Tensor<f32>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len() * model.config().n_classes);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = set.batch(chunk);
        out.extend_from_slice(model.predict(&x)?.data());
    }
    Tensor::from_vec(&[set.len(), model.config().n_classes], out)
}

/// One optimizer step on a batch; returns the batch loss.
pub fn train_step(
    model: &mut ResNet<f32>,
    state: &mut AdamState,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    lr: f64,
    hyper: AdamHyper,
    dropout_seed: u64,
) -> Result<f64> {
    let (loss, grads) = model.train_step_grads(x, y, dropout_seed)?;
    let loss = loss as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training loss became {loss}")));
    }
    let g = grads.tensors();
    adam_step(&mut model.parameters_mut(), &g, state, lr, hyper)?;
    Ok(loss)
}

pub fn train(
    mut model: ResNet<f32>,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} training and {} validation exams",
            train_set.len(),
            val_set.len()
        )));
    }
    if let Some(id) = val_set.ids.iter().find(|id| train_set.ids.contains(id)) {
        return Err(Error::Input(format!(
            "exam {id} is in both training and validation sets"
        )));
    }
    let hyper = AdamHyper::from(cfg);
    let mut state = AdamState::new(model.parameters());
    let mut sched = PlateauScheduler::new(cfg.initial_lr, cfg.plateau_patience, cfg.lr_factor);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, ResNet<f32>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = sched.lr();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train_set.batch(chunk);
            let seed = seeds::derive(cfg.seed, &[DROPOUT_STREAM, epoch as u64, b as u64]);
            let loss = train_step(&mut model, &mut state, &x, &y, lr, hyper, seed)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {b}: {e}")))?;
            total += loss * chunk.len() as f64;
            debug!("epoch {epoch} batch {b} loss {loss:.5}");
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = evaluate_loss(&model, val_set, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: validation loss {val_loss}")));
        }

        let improved = best.as_ref().is_none_or(|(b, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, model.clone()));
            log.best_epoch = Some(epoch);
        }
        sched.observe(val_loss);
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            improved,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        info!(
            "epoch {:>3}  train {train_loss:.5}  val {val_loss:.5}  lr {lr:.0e}{}",
            epoch + 1,
            if improved { "  *" } else { "" }
        );
        if cfg.stop_after_lr_drops.is_some_and(|n| sched.drops() >= n) {
            info!("stopping after {} learning-rate drops", sched.drops());
            break;
        }
    }
    let (_, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { best, last: model, log })
}

/// Seeded split keyed by exam id: the validation set is the `fraction` of
/// ids with the smallest hash. Returns (train, validation) indices, each in
/// input order.
pub fn split_dataset(ids: &[String], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if ids.len() < 2 {
        return Err(Error::InsufficientData(format!("cannot split {} exams", ids.len())));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = ids.len();
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut keyed: Vec<(u64, &str, usize)> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            (
                seeds::derive(seed, &[SPLIT_STREAM, seeds::fnv1a(id.as_bytes())]),
                id.as_str(),
                i,
            )
        })
        .collect();
    keyed.sort_unstable();
    let mut val: Vec<usize> = keyed[..n_val].iter().map(|k| k.2).collect();
    let mut train: Vec<usize> = keyed[n_val..].iter().map(|k| k.2).collect();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}
