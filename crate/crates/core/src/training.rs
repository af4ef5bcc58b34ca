//! AdamW with warmup + cosine decay over per-pair tapes.

use crate::assignment::{DEFAULT_MATCH_THRESHOLD, TRAIN_SINKHORN_ITERS};
use crate::error::{dim_err, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::synth::{generate_pair, pair_seed, SynthConfig, SyntheticPair};
use crate::tape::Tape;
use crate::tensor::Tensor;
use std::f64::consts::PI;
use std::fmt::Write as _;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Default weight for the scene (visibility) loss.
pub const DEFAULT_ALPHA: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub alpha: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub sinkhorn_iters: usize,
    pub threshold: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 4,
            base_lr: 6e-3,
            warmup_steps: 100,
            total_steps: 2000,
            alpha: DEFAULT_ALPHA,
            weight_decay: 0.01,
            seed: 0,
            sinkhorn_iters: TRAIN_SINKHORN_ITERS,
            threshold: DEFAULT_MATCH_THRESHOLD,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.total_steps == 0 || self.sinkhorn_iters == 0 {
            return Err(Error::Config("batch size, total steps and Sinkhorn iterations must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        let rates = [self.base_lr, self.alpha, self.weight_decay, self.clip_norm, self.threshold];
        if !(self.base_lr > 0.0) || rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("learning rate must be positive and all rates finite and non-negative".into()));
        }
        Ok(())
    }

    /// `key=value` lines; parsed back by [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let dims: Vec<String> = m.scale_dims.iter().map(|d| d.to_string()).collect();
        for (k, v) in [
            ("width", m.width.to_string()),
            ("layers", m.layers.to_string()),
            ("heads", m.heads.to_string()),
            ("scale_dims", dims.join(",")),
            ("batch_size", self.batch_size.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("alpha", self.alpha.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("sinkhorn_iters", self.sinkhorn_iters.to_string()),
            ("threshold", self.threshold.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let bad = |k: &str, v: &str| Error::Format(format!("bad value '{v}' for '{k}'"));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("malformed line '{line}'")))?;
            let us = || v.parse::<usize>().map_err(|_| bad(k, v));
            let fl = || v.parse::<f64>().map_err(|_| bad(k, v));
            match k {
                "width" => cfg.model.width = us()?,
                "layers" => cfg.model.layers = us()?,
                "heads" => cfg.model.heads = us()?,
                "scale_dims" => {
                    let dims: Vec<usize> =
                        v.split(',').map(|d| d.parse().map_err(|_| bad(k, v))).collect::<Result<_>>()?;
                    cfg.model.scale_dims = dims.try_into().map_err(|_| bad(k, v))?;
                }
                "batch_size" => cfg.batch_size = us()?,
                "base_lr" => cfg.base_lr = fl()?,
                "warmup_steps" => cfg.warmup_steps = us()?,
                "total_steps" => cfg.total_steps = us()?,
                "alpha" => cfg.alpha = fl()?,
                "weight_decay" => cfg.weight_decay = fl()?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad(k, v))?,
                "sinkhorn_iters" => cfg.sinkhorn_iters = us()?,
                "threshold" => cfg.threshold = fl()?,
                "clip_norm" => cfg.clip_norm = fl()?,
                other => return Err(Error::Format(format!("unknown config key '{other}'"))),
            }
        }
        Ok(cfg)
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Bias-corrected Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(dim_err("adamw_step", format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len())));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if !p.same_shape(g) || !p.same_shape(&self.m[k]) {
                return Err(dim_err("adamw_step", format!("parameter {k}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for (((x, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * *x);
            }
        }
        Ok(())
    }
}

/// Where training pairs come from. Pair `k` of the run is a pure function of `k`.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// Fresh pairs from the generator: pair `k` uses `pair_seed(seed, k)`.
    Stream { config: SynthConfig, seed: u64 },
    /// A fixed set, cycled in order.
    Fixed(Vec<SyntheticPair>),
}

impl DataSource {
    pub fn pair(&self, k: u64) -> Result<SyntheticPair> {
        match self {
            DataSource::Stream { config, seed } => generate_pair(config, pair_seed(*seed, k)),
            DataSource::Fixed(pairs) if pairs.is_empty() => Err(Error::Config("training set is empty".into())),
            DataSource::Fixed(pairs) => Ok(pairs[(k % pairs.len() as u64) as usize].clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based index of the update just applied.
    pub step: usize,
    pub loss: f64,
    pub feature: f64,
    pub scene: f64,
    pub lr: f64,
    /// Global norm before clipping.
    pub grad_norm: f64,
}

pub const LOG_HEADER: &str = "step,loss,loss_feature,loss_scene,lr,grad_norm";

impl StepStats {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.loss, self.feature, self.scene, self.lr, self.grad_norm)
    }
}

/// Mean losses and parameter gradients of a batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss: f64,
    pub feature: f64,
    pub scene: f64,
    pub grads: Vec<Tensor>,
}

/// Batch-averaged hybrid loss and gradients, one tape per pair.
pub fn batch_gradients(model: &Model, batch: &[SyntheticPair], alpha: f64, sinkhorn_iters: usize) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut grads: Vec<Tensor> = model.params.values().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
    let (mut loss, mut feature, mut scene) = (0.0, 0.0, 0.0);
    let w = 1.0 / batch.len() as f64;
    for pair in batch {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &pair.source, &pair.target, sinkhorn_iters)?;
        let parts = model.loss(&mut tape, &out, &pair.gt, alpha)?;
        let g = tape.backward(parts.total)?;
        for (acc, gi) in grads.iter_mut().zip(model.params.collect_grads(&bound, &g)) {
            acc.add_assign(&gi.scale(w));
        }
        loss += w * tape.value(parts.total).item();
        feature += w * tape.value(parts.feature).item();
        scene += w * tape.value(parts.scene).item();
    }
    Ok(BatchGradients { loss, feature, scene, grads })
}

/// Rescales `grads` in place to global norm at most `max_norm`; returns the original norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(k);
        }
    }
    norm
}

/// Model, optimizer and step counter; everything a checkpoint stores.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: AdamW,
    /// Updates applied so far.
    pub step: usize,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(model.params.values());
        Ok(Self { config, model, optimizer, step: 0 })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Applies one update on the batch at the current step.
    pub fn train_step(&mut self, data: &DataSource) -> Result<StepStats> {
        let b = self.config.batch_size as u64;
        let first = self.step as u64 * b;
        let batch: Vec<SyntheticPair> = (first..first + b).map(|k| data.pair(k)).collect::<Result<_>>()?;
        let mut bg = batch_gradients(&self.model, &batch, self.config.alpha, self.config.sinkhorn_iters)?;
        if !bg.loss.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let grad_norm = clip_global_norm(&mut bg.grads, self.config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "gradient norm" });
        }
        let lr = lr_at(self.step + 1, &self.config);
        let mut params = self.model.params.values().to_vec();
        self.optimizer.step(&mut params, &bg.grads, lr, self.config.weight_decay)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { op: "parameter update" });
        }
        self.model.params.assign(params)?;
        self.step += 1;
        Ok(StepStats { step: self.step, loss: bg.loss, feature: bg.feature, scene: bg.scene, lr, grad_norm })
    }

    /// Trains until `total_steps`, calling `on_step` after every update.
    /// An error from `on_step` stops training.
    pub fn run(&mut self, data: &DataSource, mut on_step: impl FnMut(&TrainState, &StepStats) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let stats = self.train_step(data)?;
            on_step(self, &stats)?;
        }
        Ok(())
    }
}
