//! Multitask dataset sampling, the optimizer and the training step.
//!
//! Each step runs `accumulation_steps` micro-batches. Every micro-batch comes
//! from a single dataset drawn with exponentially smoothed weights, so one
//! optimizer update may still mix datasets across its micro-batches.

use serde::{Deserialize, Serialize};

use crate::encoders::{SpeechEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::model::{EncodedExample, TrimodalModel};
use crate::rng::{RngState, SeededRng};
use crate::tensor::{Graph, Real, Tensor};

/// `w_i = p_i^S / Σ_j p_j^S` with `p_i = size_i / Σ sizes`.
pub fn esw_weights(sizes: &[usize], exponent: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Value("no dataset sizes given".into()));
    }
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Value(format!("dataset {i} has size 0")));
    }
    if !(exponent > 0.0 && exponent <= 1.0) {
        return Err(Error::Value(format!("exponent {exponent} must lie in (0, 1]")));
    }
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    let raw: Vec<f64> = sizes.iter().map(|&s| (s as f64 / total).powf(exponent)).collect();
    let norm: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / norm).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EswSampler {
    exponent: f64,
    weights: Vec<f64>,
}

impl EswSampler {
    pub fn new(sizes: &[usize], exponent: f64) -> Result<Self> {
        Ok(Self {
            exponent,
            weights: esw_weights(sizes, exponent)?,
        })
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample(&self, rng: &mut SeededRng) -> usize {
        rng.categorical(&self.weights)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<EncodedExample>,
}

/// Read position of one dataset: which pass over it and where in the pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: u64,
    pub pos: usize,
}

/// Datasets with independent shuffled cursors. The order of every pass is a
/// function of the pool seed, the dataset index and the epoch only.
#[derive(Clone, Debug)]
pub struct DatasetPool {
    datasets: Vec<Dataset>,
    cursors: Vec<Cursor>,
    orders: Vec<Vec<usize>>,
    seed: u64,
}

impl DatasetPool {
    pub fn new(datasets: Vec<Dataset>, seed: u64) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Value("dataset pool is empty".into()));
        }
        for (i, d) in datasets.iter().enumerate() {
            if d.examples.is_empty() {
                return Err(Error::Value(format!("dataset `{}` has no examples", d.name)));
            }
            if datasets[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Value(format!("duplicate dataset name `{}`", d.name)));
            }
        }
        let cursors = vec![Cursor::default(); datasets.len()];
        let mut pool = Self {
            orders: Vec::new(),
            datasets,
            cursors,
            seed,
        };
        pool.orders = (0..pool.datasets.len()).map(|i| pool.order(i, 0)).collect();
        Ok(pool)
    }

    fn order(&self, dataset: usize, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.datasets[dataset].examples.len()).collect();
        let mut rng = SeededRng::derive(self.seed ^ (dataset as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15), epoch);
        rng.shuffle(&mut idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    pub fn datasets(&self) -> &[Dataset] {
        &self.datasets
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.datasets.iter().map(|d| d.examples.len()).collect()
    }

    pub fn cursors(&self) -> &[Cursor] {
        &self.cursors
    }

    pub fn set_cursors(&mut self, cursors: &[Cursor]) -> Result<()> {
        if cursors.len() != self.datasets.len() {
            return Err(Error::Integrity(format!(
                "{} cursors for {} datasets",
                cursors.len(),
                self.datasets.len()
            )));
        }
        for (i, c) in cursors.iter().enumerate() {
            if c.pos > self.datasets[i].examples.len() {
                return Err(Error::Integrity(format!("cursor of `{}` is out of range", self.datasets[i].name)));
            }
            self.orders[i] = self.order(i, c.epoch);
        }
        self.cursors = cursors.to_vec();
        Ok(())
    }

    /// Indices of the next `batch_size` examples of one dataset, wrapping
    /// into a freshly shuffled pass when the current one is exhausted.
    pub fn next_batch(&mut self, dataset: usize, batch_size: usize) -> Vec<usize> {
        let n = self.datasets[dataset].examples.len();
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            let c = &mut self.cursors[dataset];
            if c.pos == n {
                c.epoch += 1;
                c.pos = 0;
                let epoch = c.epoch;
                self.orders[dataset] = self.order(dataset, epoch);
            }
            let c = &mut self.cursors[dataset];
            out.push(self.orders[dataset][c.pos]);
            c.pos += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub esw_exponent: f64,
    /// Encoder freeze flags; `None` leaves the choice to the caller's
    /// default (frozen for pretraining, trainable for finetuning).
    pub freeze_vision: Option<bool>,
    pub freeze_speech: Option<bool>,
    pub seed: u64,
    /// Task names to train on; empty means every dataset in the pool.
    pub tasks: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            accumulation_steps: 3,
            max_steps: 1000,
            warmup_steps: 100,
            clip_norm: 1.0,
            esw_exponent: 0.5,
            freeze_vision: None,
            freeze_speech: None,
            seed: 0,
            tasks: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.accumulation_steps == 0 {
            return bad("accumulation_steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if !(self.esw_exponent > 0.0 && self.esw_exponent <= 1.0) {
            return bad("esw_exponent must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }

    /// Linear warmup to the base rate, constant afterwards. `step` counts
    /// updates already applied.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam moments, created lazily per parameter and dropped when frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `(m, v)` per parameter slot of the model's store.
    pub moments: Vec<Option<(Tensor<F>, Tensor<F>)>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(num_params: usize) -> Self {
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            moments: vec![None; num_params],
        }
    }

    pub fn num_states(&self) -> usize {
        self.moments.iter().filter(|m| m.is_some()).count()
    }

    /// One Adam update over every trainable parameter, using the gradients
    /// currently stored in the model.
    pub fn apply(&mut self, model: &mut TrimodalModel<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (one, eps, wd) = (F::one(), F::lit(self.eps), F::lit(self.weight_decay));
        let step_size = F::lit(lr / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        for (id, p) in model.store.iter_mut() {
            let slot = &mut self.moments[id.0];
            if p.frozen {
                *slot = None;
                continue;
            }
            let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let w = p.value.data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g + wd * *w;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// What one optimizer step did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    /// Mean of the micro-batch losses.
    pub loss: f64,
    /// Dataset of each micro-batch, in order.
    pub datasets: Vec<String>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr: f64,
}

/// Everything besides parameters that a resumed run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub rng: RngState,
    pub cursors: Vec<Cursor>,
    pub datasets: Vec<String>,
}

pub struct Trainer<F> {
    pub model: TrimodalModel<F>,
    pub optimizer: OptimizerState<F>,
    pub cfg: TrainConfig,
    pub pool: DatasetPool,
    sampler: EswSampler,
    rng: SeededRng,
    step: u64,
}

impl<F: Real> Trainer<F> {
    /// Applies the config's task filter and freeze flags to a fresh run.
    pub fn new(model: TrimodalModel<F>, pool: DatasetPool, cfg: TrainConfig) -> Result<Self> {
        let opt = OptimizerState::new(model.store.len());
        Self::resume(model, opt, pool, cfg, None)
    }

    pub fn resume(
        mut model: TrimodalModel<F>,
        optimizer: OptimizerState<F>,
        pool: DatasetPool,
        cfg: TrainConfig,
        state: Option<&TrainerState>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut pool = filter_pool(pool, &cfg.tasks)?;
        if optimizer.moments.len() != model.store.len() {
            return Err(Error::Integrity(format!(
                "optimizer has {} slots for {} parameters",
                optimizer.moments.len(),
                model.store.len()
            )));
        }
        let sampler = EswSampler::new(&pool.sizes(), cfg.esw_exponent)?;
        let mut rng = SeededRng::new(cfg.seed);
        let mut step = 0;
        if let Some(st) = state {
            let names: Vec<String> = pool.datasets().iter().map(|d| d.name.clone()).collect();
            if names != st.datasets {
                return Err(Error::Integrity(format!(
                    "checkpoint was trained on {:?}, pool has {:?}",
                    st.datasets, names
                )));
            }
            pool.set_cursors(&st.cursors)?;
            rng = SeededRng::from_state(st.rng);
            step = st.step;
        }
        model.store.zero_grads();
        let mut t = Self {
            model,
            optimizer,
            cfg,
            pool,
            sampler,
            rng,
            step,
        };
        let (v, s) = (t.cfg.freeze_vision.unwrap_or(true), t.cfg.freeze_speech.unwrap_or(true));
        t.set_frozen(v, s);
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn sampler(&self) -> &EswSampler {
        &self.sampler
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            step: self.step,
            rng: self.rng.state(),
            cursors: self.pool.cursors().to_vec(),
            datasets: self.pool.datasets().iter().map(|d| d.name.clone()).collect(),
        }
    }

    /// Sets the encoder freeze flags and drops optimizer state of every
    /// parameter that is now frozen.
    pub fn set_frozen(&mut self, vision: bool, speech: bool) {
        self.cfg.freeze_vision = Some(vision);
        self.cfg.freeze_speech = Some(speech);
        set_frozen(&mut self.model, &mut self.optimizer, vision, speech);
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let acc = self.cfg.accumulation_steps;
        let scale = F::lit(1.0 / acc as f64);
        let mut datasets = Vec::with_capacity(acc);
        let mut loss_sum = 0.0;
        self.model.store.zero_grads();
        for _ in 0..acc {
            let d = self.sampler.sample(&mut self.rng);
            let idx = self.pool.next_batch(d, self.cfg.batch_size);
            let ds = &self.pool.datasets()[d];
            let batch: Vec<&EncodedExample> = idx.iter().map(|&i| &ds.examples[i]).collect();
            let mut g = Graph::new();
            let loss = self.model.batch_loss(&mut g, &batch)?;
            let l = g.value(loss).data()[0].as_f64();
            if !l.is_finite() {
                self.model.store.zero_grads();
                return Err(Error::Training {
                    dataset: ds.name.clone(),
                    message: format!("non-finite loss {l} at step {}", self.step),
                });
            }
            g.backward_scaled(loss, &mut self.model.store, scale)?;
            loss_sum += l;
            datasets.push(ds.name.clone());
        }
        let grad_norm = self.model.store.grad_norm();
        let clipped = grad_norm > self.cfg.clip_norm;
        if clipped {
            let c = F::lit(self.cfg.clip_norm / grad_norm);
            for (_, p) in self.model.store.iter_mut() {
                if !p.frozen {
                    p.grad.data_mut().iter_mut().for_each(|g| *g = *g * c);
                }
            }
        }
        let lr = self.cfg.lr_at(self.step);
        self.optimizer.apply(&mut self.model, lr);
        self.model.store.zero_grads();
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss: loss_sum / acc as f64,
            datasets,
            grad_norm,
            clipped,
            lr,
        })
    }

    /// Runs steps until `max_steps` is reached, handing each report to `log`.
    pub fn run(&mut self, mut log: impl FnMut(&StepReport) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.max_steps {
            let r = self.train_step()?;
            log(&r)?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (TrimodalModel<F>, OptimizerState<F>, TrainerState) {
        let st = self.state();
        (self.model, self.optimizer, st)
    }
}

/// Freezes or unfreezes the two modality encoders and drops the optimizer
/// moments of the parameters that end up frozen.
pub fn set_frozen<F: Real>(model: &mut TrimodalModel<F>, opt: &mut OptimizerState<F>, vision: bool, speech: bool) {
    model.store.set_frozen_prefix(VisionEncoder::PREFIX, vision);
    model.store.set_frozen_prefix(SpeechEncoder::PREFIX, speech);
    for (id, p) in model.store.iter() {
        if p.frozen {
            opt.moments[id.0] = None;
        }
    }
}

/// Keeps the datasets named in `tasks` (all when empty), in pool order.
pub fn filter_pool(pool: DatasetPool, tasks: &[String]) -> Result<DatasetPool> {
    if tasks.is_empty() {
        return Ok(pool);
    }
    for t in tasks {
        if !pool.datasets().iter().any(|d| &d.name == t) {
            return Err(Error::Config(format!("task filter names unknown dataset `{t}`")));
        }
    }
    let seed = pool.seed;
    let kept: Vec<Dataset> = pool.datasets.into_iter().filter(|d| tasks.contains(&d.name)).collect();
    DatasetPool::new(kept, seed)
}
