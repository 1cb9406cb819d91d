//! Learning-rate schedule, weight noise, optimizer and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::binio::{put_f64s, put_len, put_str, put_u32, Input};
use crate::error::{Error, Result};
use crate::frontend::{spec_augment, FrontendConfig};
use crate::model::{ModelConfig, TransducerModel};
use crate::params::Bound;
use crate::tasks::Utterance;
use crate::tensor::{Graph, Rng, Tensor};
use crate::transducer::batch_loss_graph;

/// Linear warmup, constant hold, geometric decay, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub hold_until: u64,
    pub decay_until: u64,
    pub final_lr: f64,
}

impl ScheduleConfig {
    /// Peak 2.5e-4 after 4K steps, held to 30K, decayed to 2.5e-6 at 200K.
    pub fn large() -> Self {
        Self {
            peak_lr: 2.5e-4,
            warmup_steps: 4_000,
            hold_until: 30_000,
            decay_until: 200_000,
            final_lr: 2.5e-6,
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        if self.warmup_steps == 0 || self.warmup_steps > self.hold_until {
            return Err(Error::config(
                format!("{key}.warmup_steps"),
                "need 0 < warmup_steps <= hold_until",
            ));
        }
        if self.hold_until >= self.decay_until {
            return Err(Error::config(format!("{key}.hold_until"), "need hold_until < decay_until"));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config(format!("{key}.peak_lr"), "must be positive"));
        }
        if !(self.final_lr > 0.0 && self.final_lr <= self.peak_lr) {
            return Err(Error::config(format!("{key}.final_lr"), "need 0 < final_lr <= peak_lr"));
        }
        Ok(())
    }
}

pub fn lr_at(step: u64, s: &ScheduleConfig) -> f64 {
    if step < s.warmup_steps {
        s.peak_lr * step as f64 / s.warmup_steps as f64
    } else if step <= s.hold_until {
        s.peak_lr
    } else if step < s.decay_until {
        let frac = (step - s.hold_until) as f64 / (s.decay_until - s.hold_until) as f64;
        s.peak_lr * (s.final_lr / s.peak_lr).powf(frac)
    } else {
        s.final_lr
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    #[serde(default)]
    pub weight_noise_sigma: f64,
    #[serde(default)]
    pub weight_noise_start: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
}

fn default_clip() -> f64 {
    5.0
}

impl TrainConfig {
    pub fn new(batch_size: usize, steps: u64, seed: u64) -> Self {
        Self {
            batch_size,
            steps,
            seed,
            weight_noise_sigma: 0.0,
            weight_noise_start: 0,
            adam: AdamConfig::default(),
            clip_norm: default_clip(),
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self, key: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(format!("{key}.batch_size"), "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config(format!("{key}.steps"), "must be positive"));
        }
        if !(self.weight_noise_sigma >= 0.0 && self.weight_noise_sigma.is_finite()) {
            return Err(Error::config(format!("{key}.weight_noise_sigma"), "must be a finite non-negative number"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config(format!("{key}.clip_norm"), "must be positive"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) {
            return Err(Error::config(format!("{key}.adam.beta1"), "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::config(format!("{key}.adam.beta2"), "must lie in [0, 1)"));
        }
        if !(a.epsilon > 0.0) {
            return Err(Error::config(format!("{key}.adam.epsilon"), "must be positive"));
        }
        Ok(())
    }
}

/// Forward-pass weights: `params` plus N(0, sigma²) noise once `step`
/// reaches `start_step`, otherwise an exact copy.
pub fn apply_weight_noise(params: &[Tensor], sigma: f64, step: u64, start_step: u64, rng: &mut Rng) -> Vec<Tensor> {
    if sigma == 0.0 || step < start_step {
        return params.to_vec();
    }
    params
        .iter()
        .map(|t| {
            let data = t.data().iter().map(|w| w + sigma * rng.normal()).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        })
        .collect()
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their joint norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::invalid("optimizer state does not match the parameters"));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
                if lr != 0.0 {
                    p[i] -= step;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Mean negative log-likelihood per utterance.
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Owns a model and its optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: TransducerModel,
    pub frontend: FrontendConfig,
    pub schedule: ScheduleConfig,
    pub config: TrainConfig,
    adam: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(model: TransducerModel, frontend: FrontendConfig, schedule: ScheduleConfig, config: TrainConfig) -> Result<Self> {
        frontend.validate("frontend")?;
        schedule.validate("schedule")?;
        config.validate("train")?;
        let adam = Adam::new(config.adam, model.store.tensors());
        Ok(Self {
            model,
            frontend,
            schedule,
            config,
            adam,
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// One update on `batch`. Features must already be stacked and
    /// subsampled; masking is applied here.
    pub fn train_step(&mut self, batch: &[&Utterance]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let step = self.step;
        let rng = Rng::new(self.config.seed).fork_indexed("step", step);
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged {
                step,
                ids: batch.iter().map(|u| u.id.clone()).collect(),
            },
            e => e,
        };

        let noisy = apply_weight_noise(
            self.model.store.tensors(),
            self.config.weight_noise_sigma,
            step,
            self.config.weight_noise_start,
            &mut rng.fork("weight_noise"),
        );
        let (loss, mut grads) = {
            let mut g = Graph::new();
            let bound = Bound::owned(&mut g, noisy, true);
            let mut lps = Vec::with_capacity(batch.len());
            for (i, u) in batch.iter().enumerate() {
                let features = spec_augment(&u.features, &self.frontend, &mut rng.fork_indexed("augment", i as u64));
                let x = g.constant(features);
                let mut dropout = rng.fork_indexed("dropout", i as u64);
                lps.push(
                    self.model
                        .log_prob_graph(&mut g, &bound, x, &u.labels, Some(&mut dropout))
                        .map_err(diverged)?,
                );
            }
            let total = batch_loss_graph(&mut g, &lps)?;
            let mean = g.scale(total, 1.0 / batch.len() as f64).map_err(diverged)?;
            let loss = g.value(mean).item()?;
            if !loss.is_finite() {
                return Err(diverged(Error::NonFinite { op: "loss" }));
            }
            let mut grads = g.backward(mean).map_err(diverged)?;
            let grads: Vec<Tensor> = bound
                .vars()
                .iter()
                .zip(self.model.store.tensors())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect();
            (loss, grads)
        };

        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        let lr = lr_at(step, &self.schedule);
        self.adam.update(self.model.store.tensors_mut(), &grads, lr)?;
        self.step += 1;
        Ok(StepReport {
            step,
            loss,
            lr,
            grad_norm,
        })
    }

    /// Runs the remaining configured steps over `data`, calling `on_step`
    /// after each. Examples are visited in a fresh seeded order every epoch.
    pub fn fit(&mut self, data: &[Utterance], mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::invalid("no training data"));
        }
        let b = self.config.batch_size;
        let mut order = EpochOrder::new(data.len(), self.config.seed);
        while self.step < self.config.steps {
            let start = self.step as usize * b;
            let batch: Vec<&Utterance> = (start..start + b).map(|k| &data[order.index(k)]).collect();
            let report = self.train_step(&batch)?;
            on_step(self, &report)?;
        }
        Ok(())
    }
}

/// The `k`-th example of an endless sequence of seeded permutations.
struct EpochOrder {
    n: usize,
    seed: u64,
    epoch: Option<usize>,
    perm: Vec<usize>,
}

impl EpochOrder {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            epoch: None,
            perm: Vec::new(),
        }
    }

    fn index(&mut self, k: usize) -> usize {
        let epoch = k / self.n;
        if self.epoch != Some(epoch) {
            self.perm = (0..self.n).collect();
            self.perm
                .shuffle(&mut Rng::new(self.seed).fork_indexed("epoch", epoch as u64));
            self.epoch = Some(epoch);
        }
        self.perm[k % self.n]
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TTCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const LIMIT: u64 = 1 << 32;

/// Everything needed to rebuild a model for decoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub frontend: FrontendConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: TransducerModel,
    pub frontend: FrontendConfig,
}

pub fn write_checkpoint_to(model: &TransducerModel, frontend: &FrontendConfig, w: &mut impl Write) -> Result<()> {
    let config = CheckpointConfig {
        model: model.config.clone(),
        frontend: *frontend,
    };
    let doc = toml::to_string(&config).map_err(|e| Error::format(format!("cannot serialize config: {e}")))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_str(w, &doc)?;
    put_len(w, model.store.len())?;
    for (name, t) in model.store.iter() {
        put_str(w, name)?;
        put_len(w, t.rank())?;
        for &e in t.shape() {
            put_len(w, e)?;
        }
        put_f64s(w, t.data())?;
    }
    Ok(())
}

pub fn read_checkpoint_from(r: impl Read) -> Result<Checkpoint> {
    let mut inp = Input::new(r, "checkpoint");
    inp.magic(CHECKPOINT_MAGIC)?;
    let version = inp.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let doc = inp.string(LIMIT)?;
    let config: CheckpointConfig =
        toml::from_str(&doc).map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
    let count = inp.len(LIMIT, "tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1 << 12));
    for _ in 0..count {
        let name = inp.string(LIMIT)?;
        let rank = inp.len(8, "rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(inp.len(LIMIT, "extent")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| (n as u64) < LIMIT)
            .ok_or_else(|| Error::format(format!("tensor `{name}` of shape {shape:?} is implausibly large")))?;
        let data = inp.f64s(n)?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if !inp.at_end()? {
        return Err(Error::format("checkpoint has trailing bytes"));
    }
    config.frontend.validate("frontend")?;
    let model = TransducerModel::from_tensors(config.model, tensors)?;
    Ok(Checkpoint {
        model,
        frontend: config.frontend,
    })
}

pub fn save_checkpoint(model: &TransducerModel, frontend: &FrontendConfig, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint_to(model, frontend, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint_from(BufReader::new(File::open(path)?))
}
