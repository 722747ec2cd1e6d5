//! Optimizers and training loops.
//!
//! Two regimes are supported: [`Mode::Joint`] updates ordinary weights θ and
//! gate weights w together, and [`Mode::SelectionOnly`] freezes θ and only
//! learns which units to keep. Both minimize the task loss plus the
//! compression-ratio regularizer.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Precision, Tape, Var};
use crate::budget::{reg_loss, CostKind, CostModel, RegularizerConfig};
use crate::data::{Dataset, Targets};
use crate::error::{dim, Error, Result};
use crate::layers::{active_counts, BoundParams, GatedModel, ParamRef};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// θ frozen; only gate weights are updated.
    SelectionOnly,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLoss {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: beta1(), beta2: beta2(), eps: eps() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::adam(), lr: 1e-4 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        match self.kind {
            OptimizerKind::Sgd { momentum } if !beta_ok(momentum) => {
                Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")))
            }
            OptimizerKind::Adam { beta1, beta2, eps } if !beta_ok(beta1) || !beta_ok(beta2) || !(eps > 0.0) => {
                Err(Error::Config("adam needs 0 <= beta < 1 and eps > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

/// SGD with classical momentum: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_update(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: f64, momentum: f64) {
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Bias-corrected Adam; `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let c1 = 1.0 - beta1.powi(step as i32);
    let c2 = 1.0 - beta2.powi(step as i32);
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut())
        .zip(v.data_mut())
    {
        *mi = beta1 * *mi + (1.0 - beta1) * g;
        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: vec![None; n_params],
            second: vec![None; n_params],
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Starts a new optimizer step; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to parameter slot `slot`.
    pub fn update(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor, lr: f64) {
        if grad.shape() != param.shape() {
            panic!("gradient shape {:?} for parameter {:?}", grad.shape(), param.shape());
        }
        let fresh = || Tensor::zeros(param.shape());
        match self.config.kind {
            OptimizerKind::Sgd { momentum } => {
                let v = self.first[slot].get_or_insert_with(fresh);
                sgd_update(param, grad, v, lr, momentum);
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let m = self.first[slot].get_or_insert_with(fresh);
                let v = self.second[slot].get_or_insert_with(fresh);
                adam_update(param, grad, m, v, self.step.max(1), lr, beta1, beta2, eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    pub cost_kind: CostKind,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Iterations after which the learning rate halves.
    #[serde(default)]
    pub lr_halve_at: Vec<usize>,
    pub task_loss: TaskLoss,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "log_every")]
    pub log_every: usize,
    #[serde(default = "yes")]
    pub shuffle: bool,
    #[serde(default)]
    pub f32: bool,
}

fn log_every() -> usize {
    10
}
fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn new(mode: Mode, task_loss: TaskLoss, cost_kind: CostKind) -> Self {
        Self {
            mode,
            epochs: 1,
            batch_size: 32,
            regularizer: RegularizerConfig::default(),
            cost_kind,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            lr_halve_at: Vec::new(),
            task_loss,
            clip_norm: None,
            log_every: log_every(),
            shuffle: true,
            f32: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        self.regularizer.validate()?;
        self.optimizer.validate()
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let halvings = self.lr_halve_at.iter().filter(|&&it| iteration >= it).count();
        self.optimizer.lr * 0.5f64.powi(halvings as i32)
    }

    fn precision(&self) -> Precision {
        if self.f32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

/// Tape nodes making up the total loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub task: Var,
    pub reg: Option<Var>,
    pub cost: Option<Var>,
}

pub fn task_loss(tape: &mut Tape, pred: Var, targets: &Targets, kind: TaskLoss) -> Result<Var> {
    match (kind, targets) {
        (TaskLoss::Mse, Targets::Values(t)) => {
            if tape.shape(pred) != t.shape() {
                return Err(dim(
                    "mse",
                    format!("predictions {:?} vs targets {:?}", tape.shape(pred), t.shape()),
                ));
            }
            let tv = tape.leaf(t.clone());
            let d = tape.sub(pred, tv)?;
            let sq = tape.square(d)?;
            tape.mean(sq)
        }
        (TaskLoss::CrossEntropy, Targets::Classes { labels, .. }) => tape.softmax_cross_entropy(pred, labels),
        (kind, _) => Err(Error::Config(format!("{kind:?} loss does not match target type"))),
    }
}

/// Task loss plus `λ·(ρ − C(w)/C_tot)²` on one batch.
pub fn loss_total(
    model: &GatedModel,
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &Dataset,
    cfg: &TrainConfig,
    cost: Option<&CostModel>,
) -> Result<LossTerms> {
    if batch.sample_shape() != model.input_shape.as_slice() {
        return Err(dim(
            "loss_total",
            format!("batch samples {:?}, model expects {:?}", batch.sample_shape(), model.input_shape),
        ));
    }
    let x = tape.leaf(batch.inputs.clone());
    let pred = model.forward(tape, bound, x)?;
    let task = task_loss(tape, pred, &batch.targets, cfg.task_loss)?;
    match cost {
        Some(cm) if cfg.regularizer.lambda > 0.0 => {
            let c = cm.gated_cost(model, tape, bound)?;
            let reg = reg_loss(tape, c, cm.total_static() as f64, &cfg.regularizer)?;
            let total = tape.add(task, reg)?;
            Ok(LossTerms { total, task, reg: Some(reg), cost: Some(c) })
        }
        _ => Ok(LossTerms { total: task, task, reg: None, cost: None }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub iteration: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub reg_loss: f64,
    /// Hard-mask cost over `C_tot` after the update.
    pub cost_ratio: f64,
    /// `(group, open, total)` per gate group.
    pub active_counts: Vec<(String, usize, usize)>,
}

fn to_divergence(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Divergence { iteration, loss: f64::NAN },
        other => other,
    }
}

/// Forward, backward and parameter update on one batch.
pub fn train_step(
    model: &mut GatedModel,
    batch: &Dataset,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    cost: Option<&CostModel>,
    iteration: usize,
) -> Result<StepMetrics> {
    let mut tape = Tape::with_precision(cfg.precision());
    let bound = model.bind(&mut tape);
    let terms = loss_total(model, &mut tape, &bound, batch, cfg, cost).map_err(|e| to_divergence(e, iteration))?;
    let loss = tape.value(terms.total).item();
    if !loss.is_finite() {
        return Err(Error::Divergence { iteration, loss });
    }
    let mut grads = tape.backward(terms.total)?;
    let refs: Vec<(usize, ParamRef)> = model
        .param_refs()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| cfg.mode == Mode::Joint || matches!(r, ParamRef::Gate { .. }))
        .collect();
    let mut updates: Vec<(usize, ParamRef, Tensor)> = refs
        .into_iter()
        .map(|(slot, r)| (slot, r, grads.take(model.bound_var(&bound, r))))
        .collect();
    if let Some(max) = cfg.clip_norm {
        let norm = updates
            .iter()
            .map(|(_, _, g)| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > max {
            let s = max / norm;
            for (_, _, g) in &mut updates {
                *g = g.map(|x| x * s);
            }
        }
    }
    let lr = cfg.lr_at(iteration);
    opt.begin_step();
    for (slot, r, g) in &updates {
        opt.update(*slot, model.param_mut(*r), g, lr);
    }
    let task_value = tape.value(terms.task).item();
    let reg_value = terms.reg.map_or(0.0, |r| tape.value(r).item());
    Ok(StepMetrics {
        iteration,
        loss,
        task_loss: task_value,
        reg_loss: reg_value,
        cost_ratio: cost.map_or(1.0, |c| c.masked_ratio(model)),
        active_counts: active_counts(model),
    })
}

/// CSV metrics stream: `iteration,task_loss,reg_loss,cost_ratio,active_<group>...`.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, model: &GatedModel) -> Result<Self> {
        let mut header = String::from("iteration,task_loss,reg_loss,cost_ratio");
        for g in &model.gates {
            header.push_str(",active_");
            header.push_str(&g.name);
        }
        writeln!(out, "{header}")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        write!(self.out, "{},{},{},{}", m.iteration, m.task_loss, m.reg_loss, m.cost_ratio)?;
        for (_, active, _) in &m.active_counts {
            write!(self.out, ",{active}")?;
        }
        writeln!(self.out)?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub task_loss: f64,
    pub reg_loss: f64,
    pub cost_ratio: f64,
    pub active_counts: Vec<(String, usize, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochMetrics>,
    /// Steps recorded every `log_every` iterations (and the last one).
    pub log: Vec<StepMetrics>,
}

/// A training run: config, optimizer state, shuffling RNG and counters.
pub struct Trainer {
    cfg: TrainConfig,
    opt: OptimizerState,
    cost: Option<CostModel>,
    rng: ChaCha8Rng,
    iteration: usize,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: &GatedModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let cost = if model.is_gated() || cfg.regularizer.lambda > 0.0 {
            Some(CostModel::new(model, cfg.cost_kind)?)
        } else {
            None
        };
        let opt = OptimizerState::new(cfg.optimizer, model.param_refs().len())?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { cfg, opt, cost, rng, iteration: 0, epoch: 0 })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn cost_model(&self) -> Option<&CostModel> {
        self.cost.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self, model: &mut GatedModel, batch: &Dataset) -> Result<StepMetrics> {
        let m = train_step(model, batch, &mut self.opt, &self.cfg, self.cost.as_ref(), self.iteration)?;
        self.iteration += 1;
        Ok(m)
    }

    /// Runs `epochs` more epochs over `data`, appending to `history`.
    pub fn run_epochs<W: Write>(
        &mut self,
        model: &mut GatedModel,
        data: &Dataset,
        epochs: usize,
        history: &mut History,
        mut sink: Option<&mut MetricsWriter<W>>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Argument("empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let bs = self.cfg.batch_size.min(data.len());
        for _ in 0..epochs {
            if self.cfg.shuffle {
                order.shuffle(&mut self.rng);
            }
            let (mut task_sum, mut reg_sum, mut batches) = (0.0, 0.0, 0usize);
            let mut last = None;
            for chunk in order.chunks(bs) {
                let batch = if chunk.len() == data.len() && !self.cfg.shuffle {
                    data.clone()
                } else {
                    data.subset(chunk)
                };
                let m = self.step(model, &batch)?;
                task_sum += m.task_loss;
                reg_sum += m.reg_loss;
                batches += 1;
                if m.iteration % self.cfg.log_every == 0 {
                    if let Some(s) = sink.as_deref_mut() {
                        s.write(&m)?;
                    }
                    history.log.push(m.clone());
                }
                last = Some(m);
            }
            self.epoch += 1;
            let last = last.expect("at least one batch");
            history.epochs.push(EpochMetrics {
                epoch: self.epoch,
                task_loss: task_sum / batches as f64,
                reg_loss: reg_sum / batches as f64,
                cost_ratio: last.cost_ratio,
                active_counts: last.active_counts.clone(),
            });
        }
        Ok(())
    }
}

/// Trains `model` for `cfg.epochs` epochs and returns the history.
pub fn fit<W: Write>(
    model: &mut GatedModel,
    data: &Dataset,
    cfg: &TrainConfig,
    sink: Option<&mut MetricsWriter<W>>,
) -> Result<History> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut history = History::default();
    trainer.run_epochs(model, data, cfg.epochs, &mut history, sink)?;
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub task_loss: f64,
    /// Classification accuracy in `[0, 1]`; `None` for regression.
    pub accuracy: Option<f64>,
}

/// Mean task loss (and accuracy for classification) over `data`.
pub fn evaluate(model: &GatedModel, data: &Dataset, kind: TaskLoss, batch_size: usize) -> Result<Evaluation> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let n = data.len();
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = data.subset(chunk);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.leaf(batch.inputs.clone());
        let pred = model.forward(&mut tape, &bound, x)?;
        let l = task_loss(&mut tape, pred, &batch.targets, kind)?;
        loss += tape.value(l).item() * chunk.len() as f64;
        if let Targets::Classes { labels, .. } = &batch.targets {
            let p = tape.value(pred);
            let k = p.shape()[1];
            for (r, &label) in labels.iter().enumerate() {
                let row = &p.data()[r * k..(r + 1) * k];
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
                correct += usize::from(arg == label);
            }
        }
    }
    Ok(Evaluation {
        task_loss: loss / n as f64,
        accuracy: matches!(data.targets, Targets::Classes { .. }).then(|| correct as f64 / n as f64),
    })
}
