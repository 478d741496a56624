//! BCE + Adam training loop with per-batch frequency masking.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{Key, TrialRecord};
use crate::autodiff::{Mode, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::features::{apply_freq_mask, mask_fill_value, sample_freq_mask, FeatureMap, FreqMask, MaskFill};
use crate::metrics::{eer, min_tdcf, TdcfCosts};
use crate::model::{batch_tensor, Model, System};

/// Header of the per-epoch training log.
pub const LOG_HEADER: &str = "epoch,train_loss,dev_eer,dev_min_tdcf";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights instead of the gradient.
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub system: System,
    pub max_mask_width: usize,
    pub mask_fill: MaskFill,
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            decoupled_weight_decay: false,
            batch_size: 64,
            epochs: 300,
            seed: 0,
            system: System::GatT,
            max_mask_width: 12,
            mask_fill: MaskFill::Mean,
            bn_momentum: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Mean binary cross-entropy of logits against labels in {0, 1}.
pub fn bce_loss(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::dim(format!("{} logits for {} labels", logits.len(), labels.len())));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Contract("labels must be 0 or 1".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Contract("logits must be finite".into()));
    }
    let total: f64 = logits.iter().zip(labels).map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()).sum();
    Ok(total / logits.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }
}

/// First and second moments for every parameter in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value().len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update of every trainable parameter from its accumulated grad.
/// Buffers are left alone. Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::dim("optimizer state does not match the parameter store"));
    }
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.requires_grad()).map(|(id, _)| id).collect();
    for &id in &ids {
        let p = store.get(id);
        if p.grad().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name().to_string()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in ids {
        let idx = id.0;
        let (value, grad) = store.value_and_grad_mut(id);
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        for i in 0..value.len() {
            let mut g = grad[i];
            if cfg.decoupled {
                value[i] -= cfg.lr * cfg.weight_decay * value[i];
            } else {
                g += cfg.weight_decay * value[i];
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// A labelled feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub utt_id: String,
    pub features: FeatureMap,
    pub key: Key,
    pub attack_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<Example>,
}

impl Dataset {
    pub fn new(items: Vec<Example>) -> Self {
        Self { items }
    }

    /// Pair protocol trials with cached features, in protocol order.
    pub fn from_records(protocol: &[TrialRecord], features: Vec<(String, FeatureMap)>) -> Result<Self> {
        let mut by_id: HashMap<String, FeatureMap> = features.into_iter().collect();
        let missing: Vec<&str> = protocol.iter().map(|r| r.utt_id.as_str()).filter(|id| !by_id.contains_key(*id)).collect();
        if !missing.is_empty() {
            return Err(Error::Alignment(format!("no features for [{}]", missing.join(", "))));
        }
        Ok(Self::new(
            protocol
                .iter()
                .map(|r| Example {
                    utt_id: r.utt_id.clone(),
                    features: by_id.remove(&r.utt_id).expect("checked above"),
                    key: r.key,
                    attack_id: r.attack_id.clone(),
                })
                .collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `(bona fide, spoof)` counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let b = self.items.iter().filter(|e| e.key == Key::Bonafide).count();
        (b, self.items.len() - b)
    }

    fn check(&self, what: &str, shape: Option<(usize, usize)>) -> Result<(usize, usize)> {
        let first = self.items.first().ok_or_else(|| Error::Config(format!("{what} set is empty")))?;
        let shape = shape.unwrap_or((first.features.n_bands(), first.features.n_frames()));
        if let Some(e) = self.items.iter().find(|e| (e.features.n_bands(), e.features.n_frames()) != shape) {
            return Err(Error::dim(format!(
                "{what} item `{}` is {}x{}, expected {}x{}",
                e.utt_id,
                e.features.n_bands(),
                e.features.n_frames(),
                shape.0,
                shape.1
            )));
        }
        Ok(shape)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// What the network is about to see for one mini-batch.
#[derive(Debug)]
pub struct BatchEvent<'a> {
    pub phase: Phase,
    pub step: usize,
    /// The mask drawn for this batch; `None` outside training.
    pub mask: Option<FreqMask>,
    pub utt_ids: Vec<&'a str>,
    /// Inputs exactly as fed to the model, after any masking.
    pub inputs: &'a [FeatureMap],
}

type Observer = Box<dyn FnMut(&BatchEvent<'_>)>;

pub struct Trainer {
    cfg: TrainConfig,
    adam_cfg: AdamConfig,
    model: Model,
    adam: AdamState,
    rng: ChaCha8Rng,
    step: usize,
    observer: Option<Observer>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if model.system() != cfg.system {
            return Err(Error::Config(format!("model is {} but training config says {}", model.system(), cfg.system)));
        }
        let adam = AdamState::new(model.store());
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            adam_cfg: cfg.adam(),
            cfg,
            model,
            adam,
            step: 0,
            observer: None,
        })
    }

    /// Called with every batch before it reaches the model.
    pub fn set_observer(&mut self, f: impl FnMut(&BatchEvent<'_>) + 'static) {
        self.observer = Some(Box::new(f));
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Check that a dataset fits the model before any update happens.
    pub fn check_dataset(&self, data: &Dataset, what: &str) -> Result<(usize, usize)> {
        let shape = data.check(what, None)?;
        self.model.config().encoder.shape_chain(shape.0, shape.1)?;
        Ok(shape)
    }

    /// One optimizer update on `batch`; returns the batch loss.
    pub fn train_step(&mut self, batch: &[&Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::DegenerateBatch("empty training batch".into()));
        }
        let n_bands = batch[0].features.n_bands();
        let mask = sample_freq_mask(&mut self.rng, n_bands, self.cfg.max_mask_width.min(n_bands))?;
        let inputs = batch
            .iter()
            .map(|e| apply_freq_mask(&e.features, mask, mask_fill_value(&e.features, mask, self.cfg.mask_fill)))
            .collect::<Result<Vec<_>>>()?;
        self.step += 1;
        if let Some(obs) = self.observer.as_mut() {
            obs(&BatchEvent {
                phase: Phase::Train,
                step: self.step,
                mask: Some(mask),
                utt_ids: batch.iter().map(|e| e.utt_id.as_str()).collect(),
                inputs: &inputs,
            });
        }
        let labels: Vec<f64> = batch.iter().map(|e| e.key.label()).collect();
        let refs: Vec<&FeatureMap> = inputs.iter().collect();
        let (loss, mut tape, grads) = {
            let mut tape = Tape::new();
            let x = tape.input(batch_tensor(&refs)?);
            let z = self.model.forward(&mut tape, x, Mode::Train)?;
            let loss = tape.bce_with_logits(z, &labels)?;
            let grads = tape.backward(loss)?;
            (tape.scalar_value(loss)?, tape, grads)
        };
        let store = self.model.store_mut();
        store.zero_grad();
        store.accumulate(&tape, &grads);
        store.apply_bn_updates(&mut tape, self.cfg.bn_momentum);
        drop(grads);
        drop(tape);
        adam_step(self.model.store_mut(), &mut self.adam, &self.adam_cfg)?;
        Ok(loss)
    }

    /// One pass over `data` in a seeded order; returns the mean batch loss.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<f64> {
        self.check_dataset(data, "training")?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.items[i]).collect();
            total += self.train_step(&batch)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// Eval-mode logits for every item, in dataset order. Never masks.
    pub fn score(&mut self, data: &Dataset) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.items.chunks(self.cfg.batch_size) {
            let inputs: Vec<FeatureMap> = chunk.iter().map(|e| e.features.clone()).collect();
            if let Some(obs) = self.observer.as_mut() {
                obs(&BatchEvent {
                    phase: Phase::Eval,
                    step: self.step,
                    mask: None,
                    utt_ids: chunk.iter().map(|e| e.utt_id.as_str()).collect(),
                    inputs: &inputs,
                });
            }
            let refs: Vec<&FeatureMap> = inputs.iter().collect();
            out.extend(self.model.score(&refs)?);
        }
        Ok(out)
    }

    /// Eval-mode `(bce, eer)` on a labelled set.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<Evaluation> {
        let scores = self.score(data)?;
        let labels: Vec<f64> = data.items.iter().map(|e| e.key.label()).collect();
        let (bona, spoof) = split_by_key(data, &scores);
        Ok(Evaluation {
            loss: bce_loss(&scores, &labels)?,
            eer: eer(&bona, &spoof)?,
            scores,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub eer: f64,
    pub scores: Vec<f64>,
}

fn split_by_key(data: &Dataset, scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for (e, &s) in data.items.iter().zip(scores) {
        match e.key {
            Key::Bonafide => bona.push(s),
            Key::Spoof => spoof.push(s),
        }
    }
    (bona, spoof)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_eer: f64,
    pub dev_min_tdcf: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub checkpoint: PathBuf,
}

pub fn format_log(records: &[EpochRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.dev_eer, r.dev_min_tdcf);
    }
    out
}

/// Train for `cfg.epochs` epochs, keep the checkpoint with the lowest dev
/// EER (earliest on ties) at `checkpoint`, and write the per-epoch log.
pub fn train(
    model: Model,
    cfg: TrainConfig,
    train_set: &Dataset,
    dev_set: &Dataset,
    costs: &TdcfCosts,
    checkpoint: &Path,
    log: &Path,
) -> Result<TrainSummary> {
    costs.coefficients()?;
    let mut trainer = Trainer::new(model, cfg)?;
    let shape = trainer.check_dataset(train_set, "training")?;
    dev_set.check("development", Some(shape))?;
    for (what, d) in [("training", train_set), ("development", dev_set)] {
        let (b, s) = d.class_counts();
        if b == 0 || s == 0 {
            return Err(Error::Config(format!("{what} set needs both classes (bona fide {b}, spoof {s})")));
        }
    }
    let mut records = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    for epoch in 1..=trainer.config().epochs {
        let train_loss = trainer.train_epoch(train_set)?;
        let scores = trainer.score(dev_set)?;
        let (bona, spoof) = split_by_key(dev_set, &scores);
        let dev_eer = eer(&bona, &spoof)?;
        let dev_min_tdcf = min_tdcf(&bona, &spoof, costs)?;
        if best.map_or(true, |(e, _)| dev_eer < e) {
            best = Some((dev_eer, epoch));
            trainer.model().save(checkpoint)?;
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            dev_eer,
            dev_min_tdcf,
        });
        fs::write(log, format_log(&records)).map_err(|e| Error::io(log, e))?;
    }
    Ok(TrainSummary {
        epochs: records,
        best_epoch: best.map(|(_, e)| e).unwrap_or(1),
        checkpoint: checkpoint.to_path_buf(),
    })
}
