//! NLL pretraining of the backbone and per-project fine-tuning.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, no_grad, Var};
use crate::error::{Error, Result};
use crate::model::{prefix_vars, Dropout, ModelConfig, PrefixParams, Seq2Seq, OUTPUT_BIAS, OUTPUT_WEIGHT};
use crate::params::{Bound, ParamSet};
use crate::seed::{derive_seed, derive_seed_str, rng};
use crate::textcodec::EncodedPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainablePolicy {
    PrefixOnly,
    #[default]
    PrefixPlusOutputLayer,
    Full,
}

impl std::str::FromStr for TrainablePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefix_only" => Ok(Self::PrefixOnly),
            "prefix_plus_output_layer" => Ok(Self::PrefixPlusOutputLayer),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown trainable policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub trainable_policy: TrainablePolicy,
    /// Share of the training pairs held out for early stopping (at least
    /// one when positive). Zero monitors the training loss instead.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            max_epochs: 30,
            patience: 5,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            trainable_policy: TrainablePolicy::default(),
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be a finite non-negative number", self.learning_rate));
        }
        if self.max_epochs > 0 && self.patience >= self.max_epochs {
            return fail(format!("patience {} must be below max_epochs {}", self.patience, self.max_epochs));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return fail("Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    /// Updates every tensor of `params` named in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).ok_or_else(|| Error::Contract(format!("no parameter `{name}` to update")))?;
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Array2::zeros(g.dim()));
                self.v.insert(name.clone(), Array2::zeros(g.dim()));
            }
            let m = self.m.get_mut(name).expect("inserted above");
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.v.get_mut(name).expect("inserted above");
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let (m, v) = (&self.m.get(name).expect("present"), &self.v.get(name).expect("present"));
            ndarray::Zip::from(p).and(*m).and(*v).for_each(|p, &m, &v| {
                *p -= self.lr * (m / c1) / ((v / c2).sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub timestamp: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Line-delimited training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn push(&mut self, epoch: usize, split: &str, loss: f64, seed: u64) {
        self.records.push(LogRecord {
            epoch,
            split: split.to_string(),
            loss,
            timestamp: chrono::Utc::now().to_rfc3339(),
            seed,
            note: None,
        });
    }

    pub fn note(&mut self, epoch: usize, seed: u64, note: impl Into<String>) {
        self.push(epoch, "event", 0.0, seed);
        self.records.last_mut().expect("just pushed").note = Some(note.into());
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Deterministic `(train, validation)` index split.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if fraction <= 0.0 || n < 2 {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut rng(derive_seed(seed, "validation", &[])));
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    idx.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (idx, val)
}

fn check_finite(stage: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { stage, value })
    }
}

/// Mean teacher-forced loss over `pairs` and its gradient for the named
/// tensors. Pairs are evaluated in parallel and reduced in order.
pub(crate) fn batch_gradient(
    model: &Seq2Seq,
    params: &ParamSet,
    trainable: &BTreeSet<String>,
    use_prefix: bool,
    pairs: &[&EncodedPair],
    dropout_seeds: &[u64],
) -> Result<(f64, ParamSet)> {
    let p_drop = model.config().dropout;
    let per_pair: Vec<Result<(f64, Vec<Array2<f64>>)>> = pairs
        .par_iter()
        .zip(dropout_seeds.par_iter())
        .map(|(pair, &seed)| {
            let (b, leaves) = Bound::bind(params, |n| trainable.contains(n));
            let pv = if use_prefix { Some(prefix_vars(model.config(), &b)?) } else { None };
            let loss = model.pair_loss(&b, pv.as_ref(), pair, &mut Dropout::new(p_drop, seed))?;
            let vars: Vec<Var> = leaves.into_iter().map(|(_, v)| v).collect();
            let gs = grad(&loss, &vars, false).into_iter().map(|g| g.value().clone()).collect();
            Ok((loss.item(), gs))
        })
        .collect();
    let n = pairs.len() as f64;
    let mut total = 0.0;
    let mut sums: Option<Vec<Array2<f64>>> = None;
    for r in per_pair {
        let (l, gs) = r?;
        total += l;
        match sums.as_mut() {
            None => sums = Some(gs),
            Some(acc) => acc.iter_mut().zip(gs).for_each(|(a, g)| *a += &g),
        }
    }
    check_finite("training", total)?;
    let grads = trainable
        .iter()
        .zip(sums.unwrap_or_default())
        .map(|(name, g)| (name.clone(), g / n))
        .collect();
    Ok((total / n, grads))
}

/// Mean loss over `pairs` without dropout or graph construction.
pub fn mean_loss(model: &Seq2Seq, params: &ParamSet, use_prefix: bool, pairs: &[EncodedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let losses: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|pair| {
            let _g = no_grad();
            let b = Bound::constants(params);
            let pv = if use_prefix { Some(prefix_vars(model.config(), &b)?) } else { None };
            Ok(model.pair_loss(&b, pv.as_ref(), pair, &mut Dropout::off())?.item())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / pairs.len() as f64)
}

struct LoopOutcome {
    params: ParamSet,
    best_epoch: usize,
    epochs_run: usize,
    history: Vec<EpochStats>,
}

fn run_loop(
    model: &Seq2Seq,
    mut params: ParamSet,
    trainable: &BTreeSet<String>,
    use_prefix: bool,
    pairs: &[EncodedPair],
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<LoopOutcome> {
    cfg.validate()?;
    for n in trainable {
        params.require(n)?;
    }
    let (train_idx, val_idx) = split_validation(pairs.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<EncodedPair> = train_idx.iter().map(|&i| pairs[i].clone()).collect();
    let val: Vec<EncodedPair> = val_idx.iter().map(|&i| pairs[i].clone()).collect();
    let monitor = if val.is_empty() { &train } else { &val };

    let initial = check_finite("validation", mean_loss(model, &params, use_prefix, monitor)?)?;
    log.push(0, "val", initial, cfg.seed);
    let mut best = (0, initial, params.clone());
    let mut history = Vec::new();
    let mut adam = Adam::new(cfg);
    let mut stale = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng(derive_seed(cfg.seed, "shuffle", &[epoch as u64])));
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> =
                (0..batch.len()).map(|i| derive_seed(cfg.seed, "dropout", &[epoch as u64, step as u64, i as u64])).collect();
            let (loss, grads) = batch_gradient(model, &params, trainable, use_prefix, &batch, &seeds)?;
            adam.step(&mut params, &grads)?;
            total += loss * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        log.push(epoch, "train", train_loss, cfg.seed);
        let val_loss = check_finite("validation", mean_loss(model, &params, use_prefix, monitor)?)?;
        log.push(epoch, "val", val_loss, cfg.seed);
        history.push(EpochStats { epoch, train_loss, val_loss });
        if val_loss < best.1 {
            best = (epoch, val_loss, params.clone());
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(LoopOutcome { params: best.2, best_epoch: best.0, epochs_run, history })
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ParamSet,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochStats>,
}

/// Trains a fresh backbone on `corpus`, keeping the best-validation epoch.
pub fn pretrain(
    model_cfg: &ModelConfig,
    corpus: &[EncodedPair],
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Config("pretraining corpus is empty".into()));
    }
    let model = Seq2Seq::new(model_cfg.clone())?;
    let params = model.init_params(&mut rng(derive_seed(cfg.seed, "init", &[])));
    let trainable: BTreeSet<String> = params.names().cloned().collect();
    let out = run_loop(&model, params, &trainable, false, corpus, cfg, log)?;
    Ok(PretrainOutcome { params: out.params, best_epoch: out.best_epoch, epochs_run: out.epochs_run, history: out.history })
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// The prefix stack with the project's trained view absorbed (`None`
    /// when fine-tuning ran without prefixes).
    pub prefix: Option<PrefixParams>,
    /// Backbone after training; tensors outside the trainable set are
    /// bit-identical to the input.
    pub theta: ParamSet,
    pub trainable: BTreeSet<String>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochStats>,
}

impl FinetuneOutcome {
    /// The output layer, when it was part of the trainable set.
    pub fn output_layer(&self) -> Option<ParamSet> {
        if self.trainable.contains(OUTPUT_WEIGHT) {
            self.theta.select([OUTPUT_WEIGHT, OUTPUT_BIAS]).ok()
        } else {
            None
        }
    }
}

/// Fine-tunes `project`'s prefix (and, per policy, the output layer or the
/// whole backbone) on `pairs` with early stopping. Without a prefix stack
/// the policy's backbone part is trained alone.
pub fn finetune_prefix(
    model: &Seq2Seq,
    theta: &ParamSet,
    phi: Option<&PrefixParams>,
    project: &str,
    pairs: &[EncodedPair],
    cfg: &TrainConfig,
    log: &mut RunLog,
) -> Result<FinetuneOutcome> {
    if pairs.is_empty() {
        return Err(Error::Config(format!("no training pairs for project `{project}`")));
    }
    model.check_params(theta)?;
    let mut phi = phi.filter(|p| p.config().prefix_len > 0).cloned();
    let mut params = theta.clone();
    let mut trainable = BTreeSet::new();
    if let Some(phi) = phi.as_mut() {
        if phi.config() != model.config() {
            return Err(Error::Contract("prefix and backbone were built for different model configs".into()));
        }
        if !phi.is_registered(project) {
            let seed = derive_seed_str(cfg.seed, "register", project);
            phi.register_project(project, &mut rng(seed))?;
            log.note(0, seed, format!("registered unknown project `{project}` with a fresh prefix"));
        }
        let view = phi.view(project)?;
        trainable.extend(view.names().cloned());
        params.update_from(&view);
    }
    match cfg.trainable_policy {
        TrainablePolicy::PrefixOnly => {}
        TrainablePolicy::PrefixPlusOutputLayer => {
            trainable.insert(OUTPUT_WEIGHT.to_string());
            trainable.insert(OUTPUT_BIAS.to_string());
        }
        TrainablePolicy::Full => trainable.extend(theta.names().cloned()),
    }
    if trainable.is_empty() {
        return Err(Error::Config("nothing to train: prefix_only policy without a prefix stack".into()));
    }
    let out = run_loop(model, params, &trainable, phi.is_some(), pairs, cfg, log)?;
    let mut theta_out = ParamSet::new();
    let mut view = ParamSet::new();
    for (n, t) in out.params.iter() {
        if theta.contains(n) {
            theta_out.insert(n.clone(), t.clone());
        } else {
            view.insert(n.clone(), t.clone());
        }
    }
    if let Some(phi) = phi.as_mut() {
        phi.absorb(project, &view)?;
    }
    Ok(FinetuneOutcome {
        prefix: phi,
        theta: theta_out,
        trainable,
        best_epoch: out.best_epoch,
        epochs_run: out.epochs_run,
        history: out.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Decoding;
    use crate::textcodec::{BOS, EOS, PAD};

    fn toy_pairs(cfg: &ModelConfig, n: usize) -> Vec<EncodedPair> {
        (0..n)
            .map(|i| {
                let mut code_ids = vec![4 + i % 7, 11 + i, 20 + (i * 3) % 9];
                let mut code_mask = vec![true; 3];
                code_ids.resize(cfg.max_code_len, PAD);
                code_mask.resize(cfg.max_code_len, false);
                let mut summary_ids = vec![BOS, 30 + i % 5, 36 + i, EOS];
                let mut summary_mask = vec![true; 4];
                summary_ids.resize(cfg.max_sum_len, PAD);
                summary_mask.resize(cfg.max_sum_len, false);
                EncodedPair { code_ids, code_mask, summary_ids, summary_mask }
            })
            .collect()
    }

    fn quick(lr: f64, epochs: usize) -> TrainConfig {
        TrainConfig { learning_rate: lr, max_epochs: epochs, patience: 0, batch_size: 4, val_fraction: 0.0, seed: 3, ..Default::default() }
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let cfg = TrainConfig { learning_rate: 0.1, ..Default::default() };
        let mut adam = Adam::new(&cfg);
        let mut p: ParamSet = [("w".to_string(), ndarray::array![[1.0, -2.0]])].into_iter().collect();
        let g: ParamSet = [("w".to_string(), ndarray::array![[0.5, -3.0]])].into_iter().collect();
        adam.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap();
        assert!((w[[0, 0]] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((w[[0, 1]] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn validation_split_is_deterministic_and_disjoint() {
        let (t, v) = split_validation(25, 0.1, 9);
        assert_eq!(v.len(), 3);
        assert_eq!(t.len(), 22);
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(split_validation(25, 0.1, 9), (t, v));
        assert_eq!(split_validation(3, 0.1, 9).1.len(), 1);
        assert!(split_validation(1, 0.1, 9).1.is_empty());
        assert!(split_validation(10, 0.0, 9).1.is_empty());
    }

    #[test]
    fn config_rejects_patience_at_or_above_epochs() {
        assert!(TrainConfig { patience: 30, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let cfg = ModelConfig::tiny();
        let data = toy_pairs(&cfg, 6);
        let a = pretrain(&cfg, &data, &quick(0.0, 3), &mut RunLog::default()).unwrap();
        let init = Seq2Seq::new(cfg.clone()).unwrap().init_params(&mut rng(derive_seed(3, "init", &[])));
        assert_eq!(a.params, init);
    }

    #[test]
    fn empty_corpus_is_a_config_error() {
        assert!(matches!(
            pretrain(&ModelConfig::tiny(), &[], &quick(0.01, 1), &mut RunLog::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pretraining_memorizes_and_is_deterministic() {
        let cfg = ModelConfig { d_model: 16, d_ff: 32, ..ModelConfig::tiny() };
        let data = toy_pairs(&cfg, 10);
        let tc = quick(0.01, 200);
        let mut log = RunLog::default();
        let a = pretrain(&cfg, &data, &tc, &mut log).unwrap();
        let model = Seq2Seq::new(cfg.clone()).unwrap();
        let final_loss = mean_loss(&model, &a.params, false, &data).unwrap();
        assert!(final_loss < 0.1, "{final_loss}");
        assert!(log.records.iter().any(|r| r.split == "train"));

        let b = pretrain(&cfg, &data, &quick(0.01, 20), &mut RunLog::default()).unwrap();
        let c = pretrain(&cfg, &data, &quick(0.01, 20), &mut RunLog::default()).unwrap();
        assert_eq!(b.params, c.params);
    }

    #[test]
    fn memorized_single_pair_is_regenerated() {
        let cfg = ModelConfig { d_model: 16, d_ff: 32, ..ModelConfig::tiny() };
        let data = toy_pairs(&cfg, 1);
        let out = pretrain(&cfg, &data, &quick(0.01, 100), &mut RunLog::default()).unwrap();
        let model = Seq2Seq::new(cfg).unwrap();
        let b = Bound::constants(&out.params);
        let got = model.generate(&b, None, &data[0].code_ids, &data[0].code_mask, Decoding::Greedy).unwrap();
        assert_eq!(got, data[0].summary_ids[1..3].to_vec());
    }

    fn base(cfg: &ModelConfig) -> (Seq2Seq, ParamSet) {
        let model = Seq2Seq::new(cfg.clone()).unwrap();
        let theta = model.init_params(&mut rng(21));
        (model, theta)
    }

    #[test]
    fn finetune_freezes_everything_outside_the_policy() {
        let cfg = ModelConfig::tiny();
        let (model, theta) = base(&cfg);
        let phi = PrefixParams::new(&cfg, &mut rng(22));
        let data = toy_pairs(&cfg, 10);
        // Ten pairs in batches of two: five update steps.
        let tc = TrainConfig { batch_size: 2, ..quick(0.01, 1) };
        let mut log = RunLog::default();
        let out = finetune_prefix(&model, &theta, Some(&phi), "proj", &data, &tc, &mut log).unwrap();
        for (n, t) in theta.iter() {
            let after = out.theta.get(n).unwrap();
            if n == OUTPUT_WEIGHT || n == OUTPUT_BIAS {
                assert_ne!(after, t, "{n} should train");
            } else {
                assert_eq!(after, t, "{n} must stay frozen");
            }
        }
        let trained = out.prefix.as_ref().unwrap();
        assert!(trained.is_registered("proj"));
        assert!(out.output_layer().is_some());
        assert!(log.records.iter().any(|r| r.note.as_deref().is_some_and(|n| n.contains("proj"))));

        let only = TrainConfig { trainable_policy: TrainablePolicy::PrefixOnly, ..tc };
        let out = finetune_prefix(&model, &theta, Some(&phi), "proj", &data, &only, &mut RunLog::default()).unwrap();
        assert_eq!(out.theta, theta);
        assert!(out.output_layer().is_none());
    }

    #[test]
    fn first_epoch_lowers_training_nll() {
        let cfg = ModelConfig::tiny();
        let (model, theta) = base(&cfg);
        let mut phi = PrefixParams::new(&cfg, &mut rng(23));
        phi.register_project("proj", &mut rng(24)).unwrap();
        let data = toy_pairs(&cfg, 10);
        let tc = TrainConfig { batch_size: 2, ..quick(0.01, 1) };
        let mut params = theta.clone();
        params.update_from(&phi.view("proj").unwrap());
        let before = mean_loss(&model, &params, true, &data).unwrap();
        let out = finetune_prefix(&model, &theta, Some(&phi), "proj", &data, &tc, &mut RunLog::default()).unwrap();
        let mut params = out.theta.clone();
        params.update_from(&out.prefix.unwrap().view("proj").unwrap());
        let after = mean_loss(&model, &params, true, &data).unwrap();
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn early_stop_returns_epoch_e_minus_patience() {
        let cfg = ModelConfig::tiny();
        let (model, theta) = base(&cfg);
        let phi = PrefixParams::new(&cfg, &mut rng(25));
        let data = toy_pairs(&cfg, 10);
        // A zero learning rate never improves, so patience runs out at epoch 3.
        let tc = TrainConfig { patience: 3, ..quick(0.0, 10) };
        let out = finetune_prefix(&model, &theta, Some(&phi), "proj", &data, &tc, &mut RunLog::default()).unwrap();
        assert_eq!(out.epochs_run, 3);
        assert_eq!(out.best_epoch, out.epochs_run - tc.patience);

        // With a positive rate the best epoch is the one with the lowest validation loss.
        let tc = TrainConfig { patience: 2, val_fraction: 0.3, ..quick(0.05, 12) };
        let out = finetune_prefix(&model, &theta, Some(&phi), "proj", &data, &tc, &mut RunLog::default()).unwrap();
        let best = out.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
        if out.best_epoch > 0 {
            assert_eq!(out.history[out.best_epoch - 1].val_loss, best);
        }
        if out.epochs_run < 12 {
            assert_eq!(out.best_epoch, out.epochs_run - tc.patience);
        }
    }

    #[test]
    fn output_layer_only_without_prefix_stack() {
        let cfg = ModelConfig::tiny();
        let (model, theta) = base(&cfg);
        let data = toy_pairs(&cfg, 4);
        let out = finetune_prefix(&model, &theta, None, "proj", &data, &quick(0.01, 2), &mut RunLog::default()).unwrap();
        assert!(out.prefix.is_none());
        assert_eq!(out.trainable.len(), 2);
        let only = TrainConfig { trainable_policy: TrainablePolicy::PrefixOnly, ..quick(0.01, 2) };
        assert!(finetune_prefix(&model, &theta, None, "proj", &data, &only, &mut RunLog::default()).is_err());
    }

    #[test]
    fn run_log_is_line_delimited_json() {
        let mut log = RunLog::default();
        log.push(1, "train", 0.5, 7);
        log.note(1, 7, "hello");
        let text = log.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        let r: LogRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!((r.epoch, r.split.as_str(), r.loss, r.seed), (1, "train", 0.5, 7));
    }
}
