//! Supervised and adversarial training with per-epoch dev selection.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, AutodiffError, Gradients, ParamStore, Tape};
use crate::model::{EncodedPair, ErModel, ModelError, MATCH};

/// Decision threshold on p(match).
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite parameters after epoch {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 20,
            adam: AdamConfig::default(),
            seed: 1,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub pair: EncodedPair,
    pub is_match: bool,
}

/// Labeled pairs of one source dataset; `dataset` indexes the model's
/// dataset list.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSet {
    pub dataset: usize,
    pub train: Vec<LabeledPair>,
    pub dev: Vec<LabeledPair>,
}

/// Precision, recall and F1 in percent, with confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let pct = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
        let precision = pct(tp, tp + fp);
        let recall = pct(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
        }
    }

    pub fn from_predictions(predicted: &[bool], gold: &[bool]) -> Self {
        assert_eq!(predicted.len(), gold.len());
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&p, &g) in predicted.iter().zip(gold) {
            match (p, g) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Self::from_counts(tp, fp, fn_, tn)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Report plus mean NLL for probabilities against gold labels.
pub fn score_probs(probs: &[f64], gold: &[bool]) -> (EvalReport, f64) {
    let predicted: Vec<bool> = probs.iter().map(|&p| p >= THRESHOLD).collect();
    let nll = probs
        .iter()
        .zip(gold)
        .map(|(&p, &g)| -(if g { p } else { 1.0 - p }).max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / probs.len().max(1) as f64;
    (EvalReport::from_predictions(&predicted, gold), nll)
}

pub fn evaluate(model: &ErModel, pairs: &[LabeledPair]) -> Result<EvalReport> {
    Ok(evaluate_with_loss(model, pairs)?.0)
}

pub fn evaluate_with_loss(model: &ErModel, pairs: &[LabeledPair]) -> Result<(EvalReport, f64)> {
    if pairs.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let encoded: Vec<EncodedPair> = pairs.iter().map(|p| p.pair.clone()).collect();
    let probs = model.predict_many(&encoded)?;
    let gold: Vec<bool> = pairs.iter().map(|p| p.is_match).collect();
    Ok(score_probs(&probs, &gold))
}

/// Best epoch seen so far.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub epoch: usize,
    pub dev: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<MetricsRow>,
}

/// Appends rows to a metrics CSV, writing the header if the file is new.
pub fn append_metrics_csv(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "epoch,split,precision,recall,f1,loss")?;
    }
    for r in rows {
        writeln!(
            f,
            "{},{},{:.4},{:.4},{:.4},{:.6}",
            r.epoch, r.split, r.precision, r.recall, r.f1, r.loss
        )?;
    }
    Ok(())
}

/// Per-example outputs of a training step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLoss {
    /// Mean matching NLL over the source batch.
    pub matching: f64,
    /// Mean dataset NLL over the source batch (0 without a dataset head).
    pub source_dataset: f64,
    /// Mean dataset NLL over the target batch.
    pub target_dataset: f64,
    /// p(match) of each source example, for online train metrics.
    pub probs: Vec<f64>,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.matching + self.source_dataset + self.target_dataset
    }
}

fn sum_in_order(parts: Vec<Gradients>, scale: f64, into: &mut Gradients) {
    let mut acc: Option<Gradients> = None;
    for g in parts {
        match &mut acc {
            None => acc = Some(g),
            Some(a) => a.add_assign(&g),
        }
    }
    if let Some(mut a) = acc {
        a.scale(scale);
        into.add_assign(&a);
    }
}

/// Gradient of the mean matching loss over a batch. Examples are
/// differentiated in parallel and summed in input order.
pub fn supervised_step(model: &ErModel, batch: &[LabeledPair]) -> Result<(StepLoss, Gradients)> {
    adversarial_step(model, batch, None, &[], 0)
}

/// Gradient of one adversarial step: matching loss on the source batch,
/// plus dataset losses (through gradient reversal) on the source batch with
/// `source_datasets[i]` and on the target batch with `target_dataset`. The
/// three terms are batch means, summed 1:1. With `source_datasets = None`
/// only the matching loss is used.
pub fn adversarial_step(
    model: &ErModel,
    source: &[LabeledPair],
    source_datasets: Option<&[usize]>,
    target: &[EncodedPair],
    target_dataset: usize,
) -> Result<(StepLoss, Gradients)> {
    type PerExample = (f64, f64, f64, Gradients);
    let source_parts: Vec<PerExample> = source
        .par_iter()
        .enumerate()
        .map(|(i, ex)| -> Result<PerExample> {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let (match_loss, record) = model.match_loss(&mut tape, &b, &ex.pair, ex.is_match)?;
            let p = tape.softmax_probs(match_loss).expect("softmax-nll node")[MATCH];
            let mut ds = 0.0;
            let loss = match source_datasets {
                Some(ids) => {
                    let d = model.dataset_logits(&mut tape, &b, record, true)?;
                    let ds_loss = tape.softmax_nll(d, model.dataset_class(ids[i]))?;
                    ds = tape.value(ds_loss)[0];
                    tape.add(match_loss, ds_loss)?
                }
                None => match_loss,
            };
            let grads = tape.backward(loss, model.params())?;
            Ok((tape.value(match_loss)[0], ds, p, grads))
        })
        .collect::<Result<_>>()?;
    let target_parts: Vec<(f64, Gradients)> = target
        .par_iter()
        .map(|pair| -> Result<(f64, Gradients)> {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let s = model.similarity(&mut tape, &b, pair)?;
            let d = model.dataset_logits(&mut tape, &b, s.record, true)?;
            let loss = tape.softmax_nll(d, model.dataset_class(target_dataset))?;
            let grads = tape.backward(loss, model.params())?;
            Ok((tape.value(loss)[0], grads))
        })
        .collect::<Result<_>>()?;

    let mut out = StepLoss::default();
    let mut grads = Gradients::zeros_for(model.params());
    if !source_parts.is_empty() {
        let n = source_parts.len() as f64;
        let mut gs = Vec::with_capacity(source_parts.len());
        for (m, d, p, g) in source_parts {
            out.matching += m / n;
            out.source_dataset += d / n;
            out.probs.push(p);
            gs.push(g);
        }
        sum_in_order(gs, 1.0 / n, &mut grads);
    }
    if !target_parts.is_empty() {
        let n = target_parts.len() as f64;
        let mut gs = Vec::with_capacity(target_parts.len());
        for (d, g) in target_parts {
            out.target_dataset += d / n;
            gs.push(g);
        }
        sum_in_order(gs, 1.0 / n, &mut grads);
    }
    Ok((out, grads))
}

fn check_labels(train: &[LabeledPair]) {
    let pos = train.iter().filter(|p| p.is_match).count();
    if pos == 0 || pos == train.len() {
        warn!(
            "training set of {} pairs has a single class ({})",
            train.len(),
            if pos == 0 { "no matches" } else { "all matches" }
        );
    }
}

struct EpochLoop<'a> {
    cfg: &'a TrainConfig,
    dev: &'a [LabeledPair],
    best: Option<Checkpoint>,
    history: Vec<MetricsRow>,
}

impl<'a> EpochLoop<'a> {
    fn finish_epoch(
        &mut self,
        model: &ErModel,
        epoch: usize,
        train_probs: &[f64],
        train_gold: &[bool],
        train_loss: f64,
    ) -> Result<()> {
        if !model.params().all_finite() {
            return Err(TrainError::NonFinite(epoch));
        }
        let (train_report, _) = score_probs(train_probs, train_gold);
        let (dev_report, dev_loss) = evaluate_with_loss(model, self.dev)?;
        info!(
            "epoch {epoch}/{}: train loss {train_loss:.4}, dev F1 {:.2}",
            self.cfg.epochs, dev_report.f1
        );
        for (split, r, loss) in [("train", train_report, train_loss), ("dev", dev_report, dev_loss)] {
            self.history.push(MetricsRow {
                epoch,
                split: split.into(),
                precision: r.precision,
                recall: r.recall,
                f1: r.f1,
                loss,
            });
        }
        // strict improvement keeps the earliest epoch on ties
        if self.best.as_ref().is_none_or(|b| dev_report.f1 > b.dev.f1) {
            self.best = Some(Checkpoint {
                params: model.params().clone(),
                epoch,
                dev: dev_report,
            });
        }
        Ok(())
    }

    fn into_outcome(self, model: &mut ErModel) -> TrainOutcome {
        let checkpoint = self.best.expect("at least one epoch");
        model.restore(&checkpoint.params);
        TrainOutcome {
            checkpoint,
            history: self.history,
        }
    }
}

fn epoch_order(n: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        order.shuffle(rng);
    }
    order
}

/// Mini-batch Adam on the matching loss; the model is left holding the
/// parameters of the epoch with the best dev F1.
pub fn train_supervised(
    model: &mut ErModel,
    train: &[LabeledPair],
    dev: &[LabeledPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    if dev.is_empty() {
        return Err(TrainError::Empty("dev"));
    }
    check_labels(train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut lp = EpochLoop {
        cfg,
        dev,
        best: None,
        history: Vec::new(),
    };
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg, &mut rng);
        let (mut probs, mut gold, mut loss_sum) = (Vec::new(), Vec::new(), 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<LabeledPair> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = supervised_step(model, &batch)?;
            adam.step(model.params_mut(), &grads)?;
            loss_sum += loss.matching * batch.len() as f64;
            probs.extend(loss.probs);
            gold.extend(batch.iter().map(|p| p.is_match));
        }
        lp.finish_epoch(model, epoch, &probs, &gold, loss_sum / train.len() as f64)?;
    }
    Ok(lp.into_outcome(model))
}

/// Adversarial training: each step takes one batch from the merged sources
/// and the next batch of the (cycling) target, and applies one Adam update
/// on the summed loss. Selection uses the merged source dev sets.
pub fn train_adversarial(
    model: &mut ErModel,
    sources: &[SourceSet],
    target: &[EncodedPair],
    target_dataset: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train: Vec<LabeledPair> = sources.iter().flat_map(|s| s.train.iter().cloned()).collect();
    let ids: Vec<usize> = sources.iter().flat_map(|s| s.train.iter().map(|_| s.dataset)).collect();
    let dev: Vec<LabeledPair> = sources.iter().flat_map(|s| s.dev.iter().cloned()).collect();
    if target.is_empty() {
        warn!("no target pairs; training on sources without adaptation");
        return train_supervised(model, &train, &dev, cfg);
    }
    if train.is_empty() {
        return Err(TrainError::Empty("source training"));
    }
    if dev.is_empty() {
        return Err(TrainError::Empty("source dev"));
    }
    if model.ids().dataset.is_none() {
        return Err(ModelError::Config("adversarial training needs a dataset classifier".into()).into());
    }
    check_labels(&train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut target_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a3d_9e11_c0de_f00d);
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut target_order = epoch_order(target.len(), cfg, &mut target_rng);
    let mut target_pos = 0;
    let mut lp = EpochLoop {
        cfg,
        dev: &dev,
        best: None,
        history: Vec::new(),
    };
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg, &mut rng);
        let (mut probs, mut gold, mut loss_sum) = (Vec::new(), Vec::new(), 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<LabeledPair> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch_ids: Vec<usize> = chunk.iter().map(|&i| ids[i]).collect();
            let mut tbatch = Vec::with_capacity(cfg.batch_size);
            while tbatch.len() < cfg.batch_size.min(target.len()) {
                if target_pos == target_order.len() {
                    target_order = epoch_order(target.len(), cfg, &mut target_rng);
                    target_pos = 0;
                }
                tbatch.push(target[target_order[target_pos]].clone());
                target_pos += 1;
            }
            let (loss, grads) = adversarial_step(model, &batch, Some(&batch_ids), &tbatch, target_dataset)?;
            adam.step(model.params_mut(), &grads)?;
            loss_sum += loss.total() * batch.len() as f64;
            probs.extend(loss.probs);
            gold.extend(batch.iter().map(|p| p.is_match));
        }
        lp.finish_epoch(model, epoch, &probs, &gold, loss_sum / train.len() as f64)?;
    }
    Ok(lp.into_outcome(model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{EmbeddingStore, NgramHashConfig, TokenizerConfig};
    use crate::model::{ModelConfig, PairText};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn model(datasets: usize, seed: u64) -> ErModel {
        let config = ModelConfig {
            datasets: (0..datasets).map(|i| format!("d{i}")).collect(),
            seed,
            ..ModelConfig::toy()
        };
        let store = Arc::new(EmbeddingStore::hashed_only(8, NgramHashConfig::default()));
        ErModel::new(config, TokenizerConfig::default(), store).unwrap()
    }

    /// Matches are identical records from cluster "alpha"; non-matches pair
    /// an alpha record with a "zulu" record.
    fn separable(model: &mut ErModel, n: usize) -> Vec<LabeledPair> {
        let texts: Vec<(PairText, bool)> = (0..n)
            .map(|i| {
                let a = format!("alpha beta gamma {i}");
                let z = format!("zulu yankee xray {}", i + 100);
                let is_match = i % 2 == 0;
                let right = if is_match { a.clone() } else { z };
                (
                    PairText {
                        left: vec![a],
                        right: vec![right],
                    },
                    is_match,
                )
            })
            .collect();
        let enc = model.encode_pairs(&texts.iter().map(|(t, _)| t.clone()).collect::<Vec<_>>());
        enc.into_iter()
            .zip(texts)
            .map(|(pair, (_, is_match))| LabeledPair { pair, is_match })
            .collect()
    }

    #[test]
    fn defaults_match_table() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.epochs), (16, 20));
        assert_eq!((c.adam.lr, c.adam.beta1, c.adam.beta2), (0.001, 0.9, 0.999));
        assert!(TrainConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..c }.validate().is_err());
    }

    #[test]
    fn confusion_example() {
        let r = EvalReport::from_counts(2, 1, 1, 0);
        assert!((r.precision - 66.666_666).abs() < 1e-4);
        assert!((r.recall - 66.666_666).abs() < 1e-4);
        assert!((r.f1 - 66.666_666).abs() < 1e-4);
        let none = EvalReport::from_counts(0, 0, 3, 5);
        assert_eq!((none.precision, none.f1), (0.0, 0.0));
        assert_eq!(EvalReport::from_counts(4, 0, 0, 2).f1, 100.0);
    }

    proptest! {
        #[test]
        fn report_matches_brute_force(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
            let (pred, gold): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
            let r = EvalReport::from_predictions(&pred, &gold);
            prop_assert_eq!(r.total(), pairs.len());
            let tp = pairs.iter().filter(|&&(p, g)| p && g).count() as f64;
            let pp = pred.iter().filter(|&&p| p).count() as f64;
            let gp = gold.iter().filter(|&&g| g).count() as f64;
            let p = if pp > 0.0 { 100.0 * tp / pp } else { 0.0 };
            let rc = if gp > 0.0 { 100.0 * tp / gp } else { 0.0 };
            let f = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
            prop_assert!((r.precision - p).abs() < 1e-9);
            prop_assert!((r.recall - rc).abs() < 1e-9);
            prop_assert!((r.f1 - f).abs() < 1e-9);
        }
    }

    #[test]
    fn separable_fixture_reaches_full_f1() {
        let mut m = model(0, 3);
        let train = separable(&mut m, 32);
        let dev = separable(&mut m, 8);
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train_supervised(&mut m, &train, &dev, &cfg).unwrap();
        assert_eq!(out.checkpoint.dev.f1, 100.0);
        assert_eq!(evaluate(&m, &dev).unwrap().f1, 100.0);
        assert_eq!(out.history.len(), 2 * cfg.epochs);
        assert!(out.history.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn one_epoch_returns_epoch_one() {
        let mut m = model(0, 1);
        let data = separable(&mut m, 6);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train_supervised(&mut m, &data, &data, &cfg).unwrap();
        assert_eq!(out.checkpoint.epoch, 1);
    }

    #[test]
    fn identical_seeds_identical_parameters() {
        let run = || {
            let mut m = model(0, 5);
            let data = separable(&mut m, 20);
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 4,
                ..TrainConfig::default()
            };
            let out = train_supervised(&mut m, &data, &data[..6], &cfg).unwrap();
            (m.params().clone(), out.history)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert!(a.bitwise_eq(&b));
        assert_eq!(ha, hb);
    }

    #[test]
    fn empty_inputs_rejected() {
        let mut m = model(0, 1);
        let data = separable(&mut m, 4);
        let cfg = TrainConfig::default();
        assert!(matches!(train_supervised(&mut m, &[], &data, &cfg), Err(TrainError::Empty(_))));
        assert!(matches!(train_supervised(&mut m, &data, &[], &cfg), Err(TrainError::Empty(_))));
        assert!(matches!(evaluate(&m, &[]), Err(TrainError::Empty(_))));
    }

    #[test]
    fn target_step_leaves_matching_mlp_untouched() {
        let mut m = model(2, 2);
        let data = separable(&mut m, 4);
        let target: Vec<EncodedPair> = data.iter().map(|p| p.pair.clone()).collect();
        let (loss, grads) = adversarial_step(&m, &[], Some(&[]), &target, 1).unwrap();
        assert!(loss.target_dataset > 0.0);
        for id in m.ids().matching.all() {
            assert!(grads.get(id).unwrap().data().iter().all(|&g| g == 0.0));
        }
        let head = m.ids().dataset.as_ref().unwrap().all();
        assert!(head.iter().any(|&id| grads.get(id).unwrap().data().iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn zero_lambda_blocks_encoder_gradient() {
        let mut m = model(2, 2);
        m.set_reversal_lambda(0.0);
        let data = separable(&mut m, 4);
        let target: Vec<EncodedPair> = data.iter().map(|p| p.pair.clone()).collect();
        let (_, grads) = adversarial_step(&m, &[], Some(&[]), &target, 1).unwrap();
        for id in m.ids().gru.all() {
            assert!(grads.get(id).unwrap().data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn adversarial_training_runs_and_selects_on_source_dev() {
        let mut m = model(2, 4);
        let train = separable(&mut m, 16);
        let dev = separable(&mut m, 4);
        let target: Vec<EncodedPair> = separable(&mut m, 5).into_iter().map(|p| p.pair).collect();
        let sources = [SourceSet {
            dataset: 0,
            train,
            dev,
        }];
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let out = train_adversarial(&mut m, &sources, &target, 1, &cfg).unwrap();
        assert!(out.checkpoint.epoch >= 1);
        assert!(m.params().all_finite());
    }

    #[test]
    fn metrics_csv_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = MetricsRow {
            epoch: 1,
            split: "dev".into(),
            precision: 50.0,
            recall: 100.0,
            f1: 66.6667,
            loss: 0.5,
        };
        append_metrics_csv(&path, &[row.clone()]).unwrap();
        append_metrics_csv(&path, &[row]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap(), "epoch,split,precision,recall,f1,loss");
    }
}
