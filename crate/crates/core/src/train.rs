//! L1 training with first/second-moment adaptive updates (β₁ = 0.9,
//! β₂ = 0.99, ε = 1e-8, bias-corrected), a stepped halving learning-rate
//! schedule, an append-only CSV log, and resumable snapshots.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{forward_graph, Model};
use crate::types::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub base_lr: f64,
    /// Iterations at which the learning rate halves.
    pub milestones: Vec<u64>,
    pub betas: (f64, f64),
    pub eps: f64,
    pub batch_size: usize,
    pub lr_patch: usize,
    pub seed: u64,
    /// Snapshot cadence in iterations; `None` saves only the final state.
    pub checkpoint_every: Option<u64>,
    /// Maximum global gradient norm; `None` leaves gradients unclipped.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 500_000,
            base_lr: 2e-4,
            milestones: vec![250_000, 400_000, 450_000, 475_000],
            betas: (0.9, 0.99),
            eps: 1e-8,
            batch_size: 8,
            lr_patch: 64,
            seed: 0,
            checkpoint_every: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// A shortened run with the halving points at the same relative
    /// positions as the full schedule (50%, 80%, 90%, 95%).
    pub fn desk(total_iters: u64) -> Self {
        TrainConfig {
            total_iters,
            milestones: Self::scaled_milestones(total_iters),
            ..TrainConfig::default()
        }
    }

    /// Halving points at the full schedule's relative positions. Halving
    /// points that round onto the same iteration merge into one.
    pub fn scaled_milestones(total_iters: u64) -> Vec<u64> {
        let mut milestones: Vec<u64> = [0.5, 0.8, 0.9, 0.95]
            .iter()
            .map(|f| ((total_iters as f64) * f) as u64)
            .filter(|&m| m > 0 && m < total_iters)
            .collect();
        milestones.dedup();
        milestones
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::config("total_iters", "must be at least 1"));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr", format!("must be positive, got {}", self.base_lr)));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("milestones", "must be strictly increasing"));
        }
        if self.milestones.last().is_some_and(|&m| m >= self.total_iters) {
            return Err(Error::config(
                "milestones",
                format!("last milestone must lie before total_iters = {}", self.total_iters),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.lr_patch == 0 {
            return Err(Error::config("lr_patch", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip", "must be positive when set"));
            }
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn l1_loss(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "loss inputs {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// Learning rate at an iteration: the base rate halved once per milestone
/// already reached.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> Result<f64> {
    if iter >= cfg.total_iters {
        return Err(Error::Parameter(format!(
            "iteration {iter} outside the {} iteration schedule",
            cfg.total_iters
        )));
    }
    let halvings = cfg.milestones.iter().filter(|&&m| m <= iter).count() as i32;
    Ok(cfg.base_lr * 0.5_f64.powi(halvings))
}

/// First/second-moment optimizer accumulators, aligned with parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<(String, ArrayD<f64>)>,
    pub v: Vec<(String, ArrayD<f64>)>,
    /// Number of updates applied so far (bias-correction time step).
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros = |m: &Model| {
            m.params
                .iter()
                .map(|(n, v)| (n.to_string(), ArrayD::zeros(v.raw_dim())))
                .collect()
        };
        AdamState { m: zeros(model), v: zeros(model), t: 0 }
    }
}

/// One bias-corrected adaptive update over every parameter. `grads` maps
/// parameter names to loss gradients; absent names mean zero gradient.
pub fn apply_adam(
    model: &mut Model,
    state: &mut AdamState,
    grads: &HashMap<String, ArrayD<f64>>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    let (b1, b2) = betas;
    state.t += 1;
    let bias1 = 1.0 - b1.powi(state.t as i32);
    let bias2 = 1.0 - b2.powi(state.t as i32);
    for (i, (name, value)) in model.params.iter_mut().enumerate() {
        if state.m[i].0 != name {
            return Err(Error::Incompatible(format!(
                "optimizer state misaligned at {name}"
            )));
        }
        let zero = ArrayD::zeros(value.raw_dim());
        let g = grads.get(name).unwrap_or(&zero);
        if g.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                value.shape()
            )));
        }
        let m = &mut state.m[i].1;
        let v = &mut state.v[i].1;
        m.zip_mut_with(g, |mi, &gi| *mi = b1 * *mi + (1.0 - b1) * gi);
        v.zip_mut_with(g, |vi, &gi| *vi = b2 * *vi + (1.0 - b2) * gi * gi);
        ndarray::Zip::from(&mut *value)
            .and(&*m)
            .and(&*v)
            .for_each(|p, &mi, &vi| {
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

/// Backpropagates the batch-mean L1 loss and accumulates per-parameter
/// gradients across the batch.
fn batch_gradients(model: &Model, batch: &Batch) -> Result<(f64, HashMap<String, ArrayD<f64>>)> {
    let mut grads: HashMap<String, ArrayD<f64>> = HashMap::new();
    let mut total_loss = 0.0;
    let weight = 1.0 / batch.lr.len() as f64;
    for (lr_img, hr_img) in batch.lr.iter().zip(&batch.hr) {
        let mut g = forward_graph(model, lr_img)?;
        let target = g.tape.leaf(hr_img.data().clone().into_dyn());
        let loss = g.tape.l1_loss(g.output, target)?;
        total_loss += g.tape.value(loss).first().copied().unwrap_or(f64::NAN) * weight;
        let gradients = g.tape.backward(loss)?;
        for (name, id) in &g.param_ids {
            if let Some(grad) = gradients.wrt(*id) {
                let scaled = grad.mapv(|x| x * weight);
                grads
                    .entry(name.clone())
                    .and_modify(|acc| *acc += &scaled)
                    .or_insert(scaled);
            }
        }
    }
    Ok((total_loss, grads))
}

fn clip_gradients(grads: &mut HashMap<String, ArrayD<f64>>, max_norm: f64) {
    let norm = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

/// One optimization step at `iter`. Fails with the iteration, learning rate,
/// and batch identifiers if the loss leaves the finite range.
pub fn train_step(
    model: &mut Model,
    state: &mut AdamState,
    batch: &Batch,
    iter: u64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let lr = lr_at(iter, cfg)?;
    let (loss, mut grads) = batch_gradients(model, batch)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} at iteration {iter} (lr {lr:e}, batch [{}])",
            batch.ids.join(", ")
        )));
    }
    if let Some(max_norm) = cfg.grad_clip {
        clip_gradients(&mut grads, max_norm);
    }
    apply_adam(model, state, &grads, lr, cfg.betas, cfg.eps)?;
    Ok(loss)
}

/// A resumable training session.
pub struct Trainer {
    pub model: Model,
    pub state: AdamState,
    pub iter: u64,
    pub cfg: TrainConfig,
}

/// What a finished (or paused) run reports back.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iterations_run: u64,
    pub final_loss: f64,
    pub checkpoints_written: usize,
    pub log_path: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = AdamState::new(&model);
        Ok(Trainer { model, state, iter: 0, cfg })
    }

    /// Restores a paused session; training continues at the stored
    /// iteration with the stored optimizer accumulators.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = ckpt.into_model()?;
        let mut state = AdamState::new(&model);
        if !ckpt.adam_m.is_empty() {
            if ckpt.adam_m.len() != state.m.len() || ckpt.adam_v.len() != state.v.len() {
                return Err(Error::Incompatible(
                    "optimizer state does not cover the parameter set".into(),
                ));
            }
            for (slot, stored) in state.m.iter_mut().zip(&ckpt.adam_m) {
                if slot.0 != stored.0 || slot.1.shape() != stored.1.shape() {
                    return Err(Error::Incompatible(format!(
                        "optimizer moment for {} does not match the model",
                        stored.0
                    )));
                }
                slot.1 = stored.1.clone();
            }
            for (slot, stored) in state.v.iter_mut().zip(&ckpt.adam_v) {
                if slot.0 != stored.0 || slot.1.shape() != stored.1.shape() {
                    return Err(Error::Incompatible(format!(
                        "optimizer moment for {} does not match the model",
                        stored.0
                    )));
                }
                slot.1 = stored.1.clone();
            }
            state.t = ckpt.iteration;
        }
        Ok(Trainer { model, state, iter: ckpt.iteration, cfg })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model, self.iter, self.cfg.seed);
        ckpt.adam_m = self.state.m.clone();
        ckpt.adam_v = self.state.v.clone();
        ckpt
    }

    /// Runs from the current iteration to `until` (capped at the schedule
    /// end), logging one CSV row per iteration and snapshotting on the
    /// configured cadence plus once at the end.
    pub fn run(
        &mut self,
        data: &Dataset,
        until: u64,
        out_dir: Option<&Path>,
    ) -> Result<TrainSummary> {
        let until = until.min(self.cfg.total_iters);
        let mut log: Option<std::io::BufWriter<std::fs::File>> = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("train_log.csv");
                let fresh = !path.exists();
                let file = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
                let mut w = std::io::BufWriter::new(file);
                if fresh {
                    writeln!(w, "iter,lr,loss,wall_time_s")?;
                }
                Some(w)
            }
            None => None,
        };
        let started = Instant::now();
        let mut final_loss = f64::NAN;
        let mut checkpoints_written = 0;

        while self.iter < until {
            let batch = data.sample_batch(
                self.cfg.seed,
                self.iter,
                self.cfg.batch_size,
                self.cfg.lr_patch,
            )?;
            let loss = train_step(&mut self.model, &mut self.state, &batch, self.iter, &self.cfg)?;
            let lr = lr_at(self.iter, &self.cfg)?;
            self.iter += 1;
            final_loss = loss;
            if let Some(w) = log.as_mut() {
                writeln!(
                    w,
                    "{},{:e},{:.8},{:.3}",
                    self.iter - 1,
                    lr,
                    loss,
                    started.elapsed().as_secs_f64()
                )?;
            }
            let due = self
                .cfg
                .checkpoint_every
                .is_some_and(|every| every > 0 && self.iter % every == 0);
            if due || self.iter == until {
                if let Some(dir) = out_dir {
                    let path = dir.join(format!("iter_{:07}.ckpt", self.iter));
                    self.checkpoint().save(&path)?;
                    checkpoints_written += 1;
                }
            }
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        Ok(TrainSummary {
            iterations_run: until,
            final_loss,
            checkpoints_written,
            log_path: out_dir.map(|d| d.join("train_log.csv")),
        })
    }
}
