//! Episodic training, learning-rate schedules, evaluation and snapshot ensembles.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, TrainState};
use crate::episodes::{Dataset, Episode, EpisodeSampler, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{update_running_stats, ParamStore};
use crate::ops;
use crate::similarity::logits_from_distances;
use crate::tensor::Tensor;

pub const TRAIN_STREAM: u64 = 1;
pub const VAL_STREAM: u64 = 2;
pub const TEST_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    /// Divide the rate by 10 every `period` epochs.
    Step { period: usize },
    /// `cycles` equal cosine cycles from the initial rate down to `lr_min`.
    Cosine { lr_min: f64, cycles: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    /// Rescale the gradient to at most this global L2 norm before the update.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.1, momentum: 0.9, weight_decay: 5e-4, nesterov: true, clip_norm: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub schedule: Schedule,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    /// Validate every this many epochs; 0 disables validation.
    pub val_every: usize,
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sgd: SgdConfig::default(),
            schedule: Schedule::Step { period: 40 },
            epochs: 100,
            episodes_per_epoch: 50,
            way: 5,
            shot: 5,
            query_per_class: 15,
            val_every: 20,
            val_episodes: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.sgd.lr >= 0.0 && self.sgd.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.sgd.lr));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) || self.sgd.weight_decay < 0.0 {
            return bad("momentum must be in [0,1) and weight_decay >= 0".into());
        }
        if self.sgd.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return bad("epochs and episodes_per_epoch must be positive".into());
        }
        if self.way < 2 || self.shot == 0 || self.query_per_class == 0 {
            return bad("training episodes need way >= 2, shot >= 1 and query_per_class >= 1".into());
        }
        match self.schedule {
            Schedule::Step { period: 0 } => bad("step schedule period must be positive".into()),
            Schedule::Cosine { lr_min, cycles } => {
                if cycles == 0 || self.epochs % cycles != 0 {
                    bad(format!("epochs ({}) must be a positive multiple of cosine cycles ({cycles})", self.epochs))
                } else if !(0.0..=self.sgd.lr).contains(&lr_min) {
                    bad(format!("lr_min {lr_min} must lie in [0, lr]"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.episodes_per_epoch
    }
}

/// Learning rate at a (possibly fractional) epoch position.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let lr = cfg.sgd.lr;
    match cfg.schedule {
        Schedule::Step { period } => lr * 10f64.powi(-((epoch / period as f64).floor() as i32)),
        Schedule::Cosine { lr_min, cycles } => {
            let len = cfg.epochs as f64 / cycles as f64;
            let t = if epoch >= cfg.epochs as f64 { len } else { epoch % len };
            lr_min + 0.5 * (lr - lr_min) * (1.0 + (PI * t / len).cos())
        }
    }
}

/// SGD with optional Nesterov momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    pub momentum: ParamStore,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, momentum: ParamStore::new() }
    }

    /// `g = grad + wd p; v = mu v + g; p -= lr (g + mu v)` (Nesterov) or `p -= lr v`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        let SgdConfig { momentum: mu, weight_decay: wd, nesterov, clip_norm, .. } = self.config;
        let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        let factor = match clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            if !self.momentum.contains(name) {
                self.momentum.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let v = self.momentum.get_mut(name).expect("inserted above");
            for ((pi, vi), &gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                let g = factor * gi + wd * *pi;
                *vi = mu * *vi + g;
                let update = if nesterov { g + mu * *vi } else { *vi };
                *pi -= lr * update;
            }
        }
    }
}

/// One optimization step on `episode`; returns the query cross-entropy before the update.
pub fn train_step(model: &mut Model, opt: &mut Sgd, dataset: &Dataset, episode: &Episode, lr: f64) -> Result<f64> {
    let images = episode.images(dataset)?;
    let labels = episode.query_labels();
    let (loss, grads, stats) = {
        let tape = Tape::new();
        let vars = model.params.vars(&tape, |n| model.is_trainable(n));
        let ctx = model.forward_context(&tape, &vars, true);
        let pass = model.episode_pass(&ctx, tape.constant(images), episode.way, episode.shot)?;
        let loss = ops::cross_entropy(logits_from_distances(pass.distances), &labels)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {value}")));
        }
        let g = tape.backward(loss)?;
        let grads: BTreeMap<String, Tensor> =
            vars.iter().filter_map(|(n, &v)| g.get(v).map(|t| (n.clone(), t.clone()))).collect();
        (value, grads, ctx.take_stats())
    };
    update_running_stats(&mut model.buffers, &stats, model.config.encoder.bn_momentum)?;
    opt.step(&mut model.params, &grads, lr);
    Ok(loss)
}

/// Repeats one episode for `steps` updates at a constant rate; returns the loss trace.
pub fn fit_episode(model: &mut Model, dataset: &Dataset, episode: &Episode, steps: usize, sgd: &SgdConfig) -> Result<Vec<f64>> {
    let mut opt = Sgd::new(sgd.clone());
    (0..steps).map(|_| train_step(model, &mut opt, dataset, episode, sgd.lr)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { way: 5, shot: 1, query_per_class: 15, episodes: 500, seed: 0 }
    }
}

impl EvalConfig {
    pub fn sampler(&self, split: Split, stream: u64) -> EpisodeSampler {
        EpisodeSampler {
            seed: self.seed,
            stream,
            split,
            way: self.way,
            shot: self.shot,
            query_per_class: self.query_per_class,
        }
    }
}

/// Anything that maps an episode to query class probabilities `[n_query, way]`.
pub trait EpisodeClassifier {
    fn probabilities(&self, dataset: &Dataset, episode: &Episode) -> Result<Tensor>;
}

impl EpisodeClassifier for Model {
    fn probabilities(&self, dataset: &Dataset, episode: &Episode) -> Result<Tensor> {
        Model::probabilities(self, dataset, episode)
    }
}

/// Always puts all mass on the true label.
pub struct OracleClassifier;

impl EpisodeClassifier for OracleClassifier {
    fn probabilities(&self, _: &Dataset, episode: &Episode) -> Result<Tensor> {
        let labels = episode.query_labels();
        let mut p = Tensor::zeros(&[labels.len(), episode.way]);
        for (i, &l) in labels.iter().enumerate() {
            p.set(&[i, l], 1.0);
        }
        Ok(p)
    }
}

/// Guesses a uniformly random label for each query.
pub struct RandomClassifier {
    rng: RefCell<ChaCha8Rng>,
}

impl RandomClassifier {
    pub fn new(seed: u64) -> Self {
        Self { rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)) }
    }
}

impl EpisodeClassifier for RandomClassifier {
    fn probabilities(&self, _: &Dataset, episode: &Episode) -> Result<Tensor> {
        let n = episode.query.len();
        let mut p = Tensor::zeros(&[n, episode.way]);
        let mut rng = self.rng.borrow_mut();
        for i in 0..n {
            p.set(&[i, rng.random_range(0..episode.way)], 1.0);
        }
        Ok(p)
    }
}

/// Snapshot ensemble: mean of the members' probabilities.
pub struct Ensemble {
    pub members: Vec<Model>,
}

impl Ensemble {
    pub fn new(members: Vec<Model>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Config("ensemble needs at least one model".into()))?;
        let hash = first.config.hash();
        if members.iter().any(|m| m.config.hash() != hash) {
            return Err(Error::Config("ensemble members do not share one architecture".into()));
        }
        Ok(Self { members })
    }
}

impl EpisodeClassifier for Ensemble {
    fn probabilities(&self, dataset: &Dataset, episode: &Episode) -> Result<Tensor> {
        let probs = self.members.iter().map(|m| m.probabilities(dataset, episode)).collect::<Result<Vec<_>>>()?;
        average_probabilities(&probs)
    }
}

/// Element-wise mean of equally shaped probability tables.
pub fn average_probabilities(probs: &[Tensor]) -> Result<Tensor> {
    let first = probs.first().ok_or_else(|| Error::Config("nothing to average".into()))?;
    let mut acc = Tensor::zeros(first.shape());
    for p in probs {
        acc = acc.zip_map(p, |a, b| a + b)?;
    }
    Ok(acc.map(|v| v / probs.len() as f64))
}

/// Ensemble prediction for one episode.
pub fn ensemble_classify(members: &[Model], dataset: &Dataset, episode: &Episode) -> Result<Tensor> {
    let probs = members.iter().map(|m| m.probabilities(dataset, episode)).collect::<Result<Vec<_>>>()?;
    average_probabilities(&probs)
}

/// Fraction of rows whose argmax is the label (ties go to the lowest index).
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let way = probs.shape()[1];
    let correct = probs
        .data()
        .chunks(way)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == l
        })
        .count();
    correct as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Per-episode accuracy in `[0,1]`.
    pub accuracies: Vec<f64>,
    /// Mean accuracy in percent.
    pub mean: f64,
    /// Half-width `1.96 sigma / sqrt(n)` in percent.
    pub ci95: f64,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let var = if accuracies.len() > 1 {
            accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean: 100.0 * mean, ci95: 100.0 * 1.96 * var.sqrt() / n.sqrt(), accuracies }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.ci95)
    }
}

pub fn evaluate(classifier: &dyn EpisodeClassifier, dataset: &Dataset, sampler: &EpisodeSampler, episodes: usize) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let accs = (0..episodes as u64)
        .map(|i| {
            let ep = sampler.episode(dataset, i)?;
            Ok(accuracy(&classifier.probabilities(dataset, &ep)?, &ep.query_labels()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies(accs))
}

pub struct TrainOutcome {
    pub model: Model,
    pub final_checkpoint: Checkpoint,
    /// Checkpoint with the best validation accuracy, and that accuracy in percent.
    pub best: Option<(f64, Checkpoint)>,
    /// One checkpoint per cosine cycle, taken after its last step.
    pub snapshots: Vec<Checkpoint>,
    /// `epoch<TAB>step<TAB>loss<TAB>lr` lines.
    pub log: String,
    pub losses: Vec<f64>,
    pub validation: Vec<(usize, EvalReport)>,
}

/// Episodic training: one sampled episode per step, validation every
/// `val_every` epochs on fixed validation episodes.
pub fn train(mut model: Model, dataset: &Dataset, cfg: &TrainConfig, eval: &EvalConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sampler = EpisodeSampler {
        seed: cfg.seed,
        stream: TRAIN_STREAM,
        split: Split::Train,
        way: cfg.way,
        shot: cfg.shot,
        query_per_class: cfg.query_per_class,
    };
    let val_sampler = EpisodeSampler { seed: cfg.seed, stream: VAL_STREAM, split: Split::Val, ..eval.sampler(Split::Val, VAL_STREAM) };
    let validate = cfg.val_every > 0 && cfg.val_episodes > 0 && !dataset.split_classes(Split::Val).is_empty();
    let snapshot_every = match cfg.schedule {
        Schedule::Cosine { cycles, .. } => Some(cfg.epochs / cycles),
        Schedule::Step { .. } => None,
    };

    let mut opt = Sgd::new(cfg.sgd.clone());
    let mut log = String::new();
    let mut losses = Vec::with_capacity(cfg.total_steps());
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut snapshots = Vec::new();
    let mut validation = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for i in 0..cfg.episodes_per_epoch {
            let lr = lr_at(epoch as f64 + i as f64 / cfg.episodes_per_epoch as f64, cfg);
            let episode = sampler.episode(dataset, step as u64)?;
            let loss = train_step(&mut model, &mut opt, dataset, &episode, lr).map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!(
                    "{m} at epoch {epoch}, step {step} (episode seed {}, stream {TRAIN_STREAM}, index {step})",
                    cfg.seed
                )),
                other => other,
            })?;
            log.push_str(&format!("{epoch}\t{step}\t{loss:.6}\t{lr:.8}\n"));
            losses.push(loss);
            step += 1;
        }
        let state = || TrainState { epoch: epoch + 1, step, momentum: opt.momentum.clone() };
        if validate && (epoch + 1) % cfg.val_every == 0 {
            let report = evaluate(&model, dataset, &val_sampler, cfg.val_episodes)?;
            log::info!("epoch {}: validation {}", epoch + 1, report);
            if best.as_ref().is_none_or(|(acc, _)| report.mean > *acc) {
                best = Some((report.mean, Checkpoint::capture(&model, Some(&state()))));
            }
            validation.push((epoch + 1, report));
        }
        if snapshot_every.is_some_and(|n| (epoch + 1) % n == 0) {
            snapshots.push(Checkpoint::capture(&model, Some(&state())));
        }
    }
    let final_checkpoint = Checkpoint::capture(&model, Some(&TrainState { epoch: cfg.epochs, step, momentum: opt.momentum.clone() }));
    Ok(TrainOutcome { model, final_checkpoint, best, snapshots, log, losses, validation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{parse_placement, Backbone, EncoderConfig};
    use crate::episodes::{generate_synthetic_dataset, SyntheticSpec};
    use crate::model::ModelConfig;

    fn cosine(cycles: usize) -> TrainConfig {
        TrainConfig { epochs: 12, schedule: Schedule::Cosine { lr_min: 0.001, cycles }, ..TrainConfig::default() }
    }

    #[test]
    fn step_schedule() {
        let cfg = TrainConfig { schedule: Schedule::Step { period: 400 }, ..TrainConfig::default() };
        assert!((lr_at(400.0, &cfg) - 0.01).abs() < 1e-15);
        assert_eq!(lr_at(399.0, &cfg), 0.1);
        let mut prev = f64::INFINITY;
        for e in 0..2000 {
            let lr = lr_at(e as f64, &cfg);
            assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let cfg = cosine(3);
        assert!((lr_at(0.0, &cfg) - 0.1).abs() < 1e-15);
        assert!((lr_at(2.0, &cfg) - 0.0505).abs() < 1e-12);
        assert!((lr_at(4.0 - 1e-12, &cfg) - 0.001).abs() < 1e-9);
        assert!((lr_at(4.0, &cfg) - 0.1).abs() < 1e-15);
        assert!((lr_at(12.0, &cfg) - 0.001).abs() < 1e-15);
        for c in 0..3 {
            let mut prev = f64::INFINITY;
            for k in 0..400 {
                let lr = lr_at(4.0 * c as f64 + k as f64 / 100.0, &cfg);
                assert!(lr <= prev);
                prev = lr;
            }
        }
        assert!(cosine(5).validate().is_err());
    }

    #[test]
    fn nesterov_update_by_hand() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.5));
        let mut opt = Sgd::new(SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.1, nesterov: true, clip_norm: None });
        opt.step(&mut params, &grads, 0.1);
        // g = 0.6, v = 0.6, update = 0.6 + 0.54
        assert!((params.get("w").unwrap().item() - (1.0 - 0.1 * 1.14)).abs() < 1e-15);
        opt.step(&mut params, &grads, 0.0);
        assert!((params.get("w").unwrap().item() - (1.0 - 0.1 * 1.14)).abs() < 1e-15);
    }

    #[test]
    fn report_arithmetic() {
        let r = EvalReport::from_accuracies(vec![0.8, 0.6]);
        assert!((r.mean - 70.0).abs() < 1e-12);
        assert_eq!(format!("{:.2}", r.mean), "70.00");
        assert_eq!(EvalReport::from_accuracies(vec![1.0; 4]).to_string(), "100.00 ± 0.00");
    }

    #[test]
    fn averaging_snapshots() {
        let a = Tensor::new(vec![1, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 5], vec![0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(average_probabilities(&[a.clone(), b]).unwrap().data(), &[0.5, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(average_probabilities(&[a.clone()]).unwrap(), a);
    }

    fn tiny_setup() -> (Model, Dataset) {
        let mut e = EncoderConfig { widths: vec![4, 4], pool: vec![true, true], image_size: 8, ..EncoderConfig::default() };
        e.arf_placement = parse_placement("all", Backbone::Conv4Mini, 2).unwrap();
        let spec = SyntheticSpec { image_size: 8, samples_per_class: 8, ..SyntheticSpec::default() };
        (Model::new(ModelConfig::new(e), 0).unwrap(), generate_synthetic_dataset(&spec, 0).unwrap())
    }

    #[test]
    fn oracle_and_random_classifiers() {
        let (_, ds) = tiny_setup();
        let sampler = EvalConfig { query_per_class: 3, ..EvalConfig::default() }.sampler(Split::Test, TEST_STREAM);
        assert_eq!(evaluate(&OracleClassifier, &ds, &sampler, 10).unwrap().to_string(), "100.00 ± 0.00");
        let r = evaluate(&RandomClassifier::new(1), &ds, &sampler, 2000).unwrap();
        let sigma = 100.0 * (0.2f64 * 0.8 / (2000.0 * 15.0)).sqrt();
        assert!((r.mean - 20.0).abs() < 3.0 * sigma, "{r}");
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let (model, ds) = tiny_setup();
        let before = model.params.clone();
        let cfg = TrainConfig {
            sgd: SgdConfig { lr: 0.0, ..SgdConfig::default() },
            epochs: 1,
            episodes_per_epoch: 2,
            way: 3,
            shot: 1,
            query_per_class: 2,
            val_every: 0,
            ..TrainConfig::default()
        };
        let out = train(model, &ds, &cfg, &EvalConfig::default()).unwrap();
        assert_eq!(out.model.params, before);
        assert_eq!(out.log.lines().count(), 2);
        assert!(out.log.starts_with("0\t0\t"));
    }

    #[test]
    fn single_episode_loss_decreases() {
        let (mut model, ds) = tiny_setup();
        let sampler = EpisodeSampler { seed: 1, stream: 0, split: Split::Train, way: 3, shot: 1, query_per_class: 2 };
        let ep = sampler.episode(&ds, 0).unwrap();
        let sgd = SgdConfig { lr: 0.01, ..SgdConfig::default() };
        let losses = fit_episode(&mut model, &ds, &ep, 30, &sgd).unwrap();
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    }

    #[test]
    fn ensemble_rejects_mixed_architectures() {
        let (a, _) = tiny_setup();
        let mut cfg = a.config.clone();
        cfg.encoder.kappa = 0.5;
        let b = Model::new(cfg, 0).unwrap();
        assert!(matches!(Ensemble::new(vec![a, b]), Err(Error::Config(_))));
    }
}
