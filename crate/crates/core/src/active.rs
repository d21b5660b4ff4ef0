//! Entropy-based active learning with partition sampling and
//! high-confidence proxy labels.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AdamConfig;
use crate::model::{EncodedPair, ErModel, ModelError};
use crate::trainer::{evaluate, train_supervised, LabeledPair, TrainConfig, TrainError, THRESHOLD};

#[derive(Debug, Error)]
pub enum ActiveError {
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("invalid active learning config: {0}")]
    Config(String),
    #[error("annotator failed: {0}")]
    Annotator(String),
    #[error("pool probabilities are stale (stamp {stamp:?}, model version {current})")]
    Stale { stamp: Option<u64>, current: u64 },
    #[error("pair id {0} out of range")]
    UnknownPair(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ActiveError>;

/// Binary entropy in nats, with 0 ln 0 = 0.
pub fn entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ActiveError::Probability(p));
    }
    let term = |q: f64| if q == 0.0 { 0.0 } else { -q * q.ln() };
    Ok(term(p) + term(1.0 - p))
}

fn h(p: f64) -> f64 {
    entropy(p).expect("model probabilities lie in [0, 1]")
}

/// `(id, p)` split at p >= 0.5 into (predicted match, predicted non-match).
pub fn partition(scored: &[(usize, f64)]) -> (Vec<usize>, Vec<usize>) {
    let (m, n): (Vec<_>, Vec<_>) = scored.iter().partition(|(_, p)| *p >= THRESHOLD);
    (m.into_iter().map(|(i, _)| i).collect(), n.into_iter().map(|(i, _)| i).collect())
}

/// Orders by score, highest first when `descending`, ties by ascending id,
/// and keeps the first `k`.
fn rank(items: &[(usize, f64)], k: usize, descending: bool, score: &dyn Fn(f64) -> f64) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = items.iter().map(|&(id, p)| (id, score(p))).collect();
    scored.sort_by(|a, b| {
        let ord = a.1.total_cmp(&b.1);
        let ord = if descending { ord.reverse() } else { ord };
        ord.then(a.0.cmp(&b.0))
    });
    scored.into_iter().take(k).map(|(id, _)| id).collect()
}

fn split_sides(scored: &[(usize, f64)]) -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
    scored.iter().partition(|(_, p)| *p >= THRESHOLD)
}

/// Top-k entropy in each partition: (likely false positives, likely false
/// negatives). `score` replaces entropy; selection depends only on its order.
pub fn select_uncertain_by(scored: &[(usize, f64)], k: usize, score: &dyn Fn(f64) -> f64) -> (Vec<usize>, Vec<usize>) {
    let (pos, neg) = split_sides(scored);
    (rank(&pos, k, true, score), rank(&neg, k, true, score))
}

pub fn select_uncertain(scored: &[(usize, f64)], k: usize) -> (Vec<usize>, Vec<usize>) {
    select_uncertain_by(scored, k, &h)
}

/// Bottom-k entropy in each partition: (high-confidence positives,
/// high-confidence negatives).
pub fn select_high_confidence_by(
    scored: &[(usize, f64)],
    k: usize,
    score: &dyn Fn(f64) -> f64,
) -> (Vec<usize>, Vec<usize>) {
    let (pos, neg) = split_sides(scored);
    (rank(&pos, k, false, score), rank(&neg, k, false, score))
}

pub fn select_high_confidence(scored: &[(usize, f64)], k: usize) -> (Vec<usize>, Vec<usize>) {
    select_high_confidence_by(scored, k, &h)
}

/// Global top-K entropy, no partitioning.
pub fn select_topk_entropy_by(scored: &[(usize, f64)], k: usize, score: &dyn Fn(f64) -> f64) -> Vec<usize> {
    rank(scored, k, true, score)
}

pub fn select_topk_entropy(scored: &[(usize, f64)], k: usize) -> Vec<usize> {
    select_topk_entropy_by(scored, k, &h)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Partitioned uncertain picks plus partitioned high-confidence proxies.
    #[default]
    HighConfPartition,
    /// Partitioned uncertain picks only.
    Partition,
    /// Global top-K uncertain plus global bottom-K high-confidence.
    HighConf,
    /// Global top-K uncertain only.
    TopKEntropy,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::HighConfPartition,
        Strategy::Partition,
        Strategy::HighConf,
        Strategy::TopKEntropy,
    ];
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub likely_fp: usize,
    pub likely_fn: usize,
    pub hc_pos: usize,
    pub hc_neg: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PickScore {
    pub p: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub likely_fp: Vec<usize>,
    pub likely_fn: Vec<usize>,
    pub hc_pos: Vec<usize>,
    pub hc_neg: Vec<usize>,
    pub scores: BTreeMap<usize, PickScore>,
    pub shortfall: Shortfall,
}

impl SelectionResult {
    /// Ids sent to the annotator, likely false positives first.
    pub fn human_ids(&self) -> Vec<usize> {
        self.likely_fp.iter().chain(&self.likely_fn).copied().collect()
    }
}

/// Runs one selection over `(id, p)` pairs with sampling size `big_k`.
pub fn select(strategy: Strategy, scored: &[(usize, f64)], big_k: usize) -> SelectionResult {
    let k = big_k / 2;
    let mut out = SelectionResult::default();
    let remaining = |taken: &HashSet<usize>| -> Vec<(usize, f64)> {
        scored.iter().filter(|(id, _)| !taken.contains(id)).copied().collect()
    };
    let by_side = |ids: Vec<usize>| -> (Vec<usize>, Vec<usize>) {
        let p_of: BTreeMap<usize, f64> = scored.iter().copied().collect();
        ids.into_iter().partition(|id| p_of[id] >= THRESHOLD)
    };
    match strategy {
        Strategy::HighConfPartition | Strategy::Partition => {
            (out.likely_fp, out.likely_fn) = select_uncertain(scored, k);
            out.shortfall.likely_fp = k - out.likely_fp.len();
            out.shortfall.likely_fn = k - out.likely_fn.len();
            if strategy == Strategy::HighConfPartition {
                let taken: HashSet<usize> = out.human_ids().into_iter().collect();
                (out.hc_pos, out.hc_neg) = select_high_confidence(&remaining(&taken), k);
                out.shortfall.hc_pos = k - out.hc_pos.len();
                out.shortfall.hc_neg = k - out.hc_neg.len();
            }
        }
        Strategy::HighConf | Strategy::TopKEntropy => {
            let top = select_topk_entropy(scored, big_k);
            let short = big_k - top.len();
            (out.likely_fp, out.likely_fn) = by_side(top.clone());
            out.shortfall.likely_fp = short;
            if strategy == Strategy::HighConf {
                let taken: HashSet<usize> = top.into_iter().collect();
                let bottom = rank(&remaining(&taken), big_k, false, &h);
                out.shortfall.hc_pos = big_k - bottom.len();
                (out.hc_pos, out.hc_neg) = by_side(bottom);
            }
        }
    }
    let chosen: Vec<usize> = out
        .likely_fp
        .iter()
        .chain(&out.likely_fn)
        .chain(&out.hc_pos)
        .chain(&out.hc_neg)
        .copied()
        .collect();
    let p_of: BTreeMap<usize, f64> = scored.iter().copied().collect();
    for id in chosen {
        let p = p_of[&id];
        out.scores.insert(id, PickScore { p, entropy: h(p) });
    }
    let s = out.shortfall;
    if s.likely_fp + s.likely_fn + s.hc_pos + s.hc_neg > 0 {
        warn!("selection shortfall: {s:?}");
    }
    out
}

/// Unlabeled pair ids with probabilities cached for one model version.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UnlabeledPool {
    ids: BTreeSet<usize>,
    probs: BTreeMap<usize, f64>,
    stamp: Option<u64>,
}

impl UnlabeledPool {
    pub fn new(ids: impl IntoIterator<Item = usize>) -> Self {
        Self {
            ids: ids.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.contains(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.ids.iter().copied()
    }

    pub fn stamp(&self) -> Option<u64> {
        self.stamp
    }

    /// Recomputes p(match) for every pooled id with `model` at `version`.
    pub fn refresh(&mut self, model: &ErModel, pairs: &[EncodedPair], version: u64) -> Result<()> {
        let ids: Vec<usize> = self.ids.iter().copied().collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= pairs.len()) {
            return Err(ActiveError::UnknownPair(bad));
        }
        let batch: Vec<EncodedPair> = ids.iter().map(|&i| pairs[i].clone()).collect();
        let probs = model.predict_many(&batch)?;
        self.probs = ids.into_iter().zip(probs).collect();
        self.stamp = Some(version);
        Ok(())
    }

    /// `(id, p)` in ascending id order; errors unless refreshed at `version`.
    pub fn scored(&self, version: u64) -> Result<Vec<(usize, f64)>> {
        if self.stamp != Some(version) {
            return Err(ActiveError::Stale {
                stamp: self.stamp,
                current: version,
            });
        }
        Ok(self.ids.iter().map(|&i| (i, self.probs[&i])).collect())
    }

    fn remove(&mut self, id: usize) -> bool {
        self.probs.remove(&id);
        self.ids.remove(&id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Human,
    ProxyPositive,
    ProxyNegative,
    Seed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub is_match: bool,
    pub source: LabelSource,
    /// Model version that produced a proxy label.
    pub model_version: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet {
    entries: BTreeMap<usize, LabelEntry>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&LabelEntry> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &LabelEntry)> {
        self.entries.iter().map(|(&i, e)| (i, e))
    }

    pub fn count(&self, source: LabelSource) -> usize {
        self.entries.values().filter(|e| e.source == source).count()
    }

    /// Human and seed labels always win.
    pub fn insert_human(&mut self, id: usize, is_match: bool, source: LabelSource) {
        debug_assert!(matches!(source, LabelSource::Human | LabelSource::Seed));
        self.entries.insert(
            id,
            LabelEntry {
                is_match,
                source,
                model_version: None,
            },
        );
    }

    /// Adds a proxy label unless a human or seed label exists; returns
    /// whether the entry was written.
    pub fn insert_proxy(&mut self, id: usize, is_match: bool, version: u64) -> bool {
        if let Some(e) = self.entries.get(&id) {
            if matches!(e.source, LabelSource::Human | LabelSource::Seed) {
                return false;
            }
        }
        let source = if is_match {
            LabelSource::ProxyPositive
        } else {
            LabelSource::ProxyNegative
        };
        self.entries.insert(
            id,
            LabelEntry {
                is_match,
                source,
                model_version: Some(version),
            },
        );
        true
    }

    pub fn training_pairs(&self, pairs: &[EncodedPair]) -> Vec<LabeledPair> {
        self.entries
            .iter()
            .map(|(&i, e)| LabeledPair {
                pair: pairs[i].clone(),
                is_match: e.is_match,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ALConfig {
    /// Sampling size K; k = K/2 per partition.
    pub k: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub max_epochs: usize,
    pub strategy: Strategy,
    /// Keep high-confidence picks in the pool after proxy labeling.
    pub retain_high_confidence: bool,
    /// Select W_best on a held-out dev set instead of the labeled set.
    pub select_on_dev: bool,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            k: 20,
            batch_size: 16,
            iterations: 10,
            max_epochs: 20,
            strategy: Strategy::default(),
            retain_high_confidence: false,
            select_on_dev: false,
            adam: AdamConfig::default(),
            seed: 1,
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.k % 2 != 0 {
            return Err(ActiveError::Config(format!("K must be even and at least 2, got {}", self.k)));
        }
        if self.iterations == 0 {
            return Err(ActiveError::Config("T must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(ActiveError::Config("batch size and epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn half_k(&self) -> usize {
        self.k / 2
    }

    pub fn budget(&self) -> usize {
        self.k * self.iterations
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub iteration: usize,
    pub model_version: u64,
    /// Human picks, `selection.human_ids()`.
    pub ids: Vec<usize>,
    pub selection: SelectionResult,
}

/// Supplies labels for requested pair ids, in request order.
pub trait Annotator {
    fn label(&mut self, request: &LabelRequest) -> std::result::Result<Vec<bool>, String>;
}

/// Answers from gold labels indexed by pair id.
#[derive(Clone, Debug)]
pub struct OracleAnnotator {
    gold: Vec<bool>,
}

impl OracleAnnotator {
    pub fn new(gold: Vec<bool>) -> Self {
        Self { gold }
    }
}

impl Annotator for OracleAnnotator {
    fn label(&mut self, request: &LabelRequest) -> std::result::Result<Vec<bool>, String> {
        request
            .ids
            .iter()
            .map(|&i| self.gold.get(i).copied().ok_or_else(|| format!("no gold label for pair {i}")))
            .collect()
    }
}

/// Sends requests over a channel and blocks on the reply.
pub struct ChannelAnnotator {
    pub requests: std::sync::mpsc::Sender<LabelRequest>,
    pub replies: std::sync::mpsc::Receiver<std::result::Result<Vec<bool>, String>>,
}

impl Annotator for ChannelAnnotator {
    fn label(&mut self, request: &LabelRequest) -> std::result::Result<Vec<bool>, String> {
        self.requests
            .send(request.clone())
            .map_err(|_| "annotation session closed".to_string())?;
        self.replies
            .recv()
            .map_err(|_| "annotation session closed".to_string())?
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub model_version: u64,
    pub human_labels: usize,
    pub proxy_labels: usize,
    /// Human picks by prediction at selection time vs the returned label.
    pub fp: usize,
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// Proxy labels that disagree with gold, when gold is known.
    pub proxy_errors: Option<usize>,
    pub f1_on_labeled: f64,
    pub best_epoch: usize,
    pub test_f1: Option<f64>,
    pub pool_size: usize,
    pub labeled_size: usize,
    pub selection: SelectionResult,
}

/// Mutable state of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DtalState {
    pub pool: UnlabeledPool,
    pub labeled: LabeledSet,
    pub model_version: u64,
    pub iteration: usize,
}

impl DtalState {
    pub fn new(pool_ids: impl IntoIterator<Item = usize>) -> Self {
        Self {
            pool: UnlabeledPool::new(pool_ids),
            ..Self::default()
        }
    }
}

/// Pairs addressed by id plus optional evaluation sets.
#[derive(Clone, Copy, Debug)]
pub struct AlData<'a> {
    pub pairs: &'a [EncodedPair],
    /// Gold labels by id, used only for logging proxy accuracy.
    pub gold: Option<&'a [bool]>,
    pub dev: Option<&'a [LabeledPair]>,
    pub test: Option<&'a [LabeledPair]>,
}

/// One iteration: select, label, proxy-label, retrain with W_best tracking.
/// Returns `None` when the pool is empty. On annotator failure nothing in
/// `state` or `model` changes.
pub fn al_iteration(
    state: &mut DtalState,
    model: &mut ErModel,
    annotator: &mut dyn Annotator,
    data: AlData<'_>,
    cfg: &ALConfig,
) -> Result<Option<IterationLog>> {
    cfg.validate()?;
    if state.pool.is_empty() {
        return Ok(None);
    }
    let mut pool = state.pool.clone();
    if pool.stamp() != Some(state.model_version) {
        pool.refresh(model, data.pairs, state.model_version)?;
    }
    let scored = pool.scored(state.model_version)?;
    let selection = select(cfg.strategy, &scored, cfg.k);
    let request = LabelRequest {
        iteration: state.iteration + 1,
        model_version: state.model_version,
        ids: selection.human_ids(),
        selection: selection.clone(),
    };
    let labels = annotator.label(&request).map_err(ActiveError::Annotator)?;
    if labels.len() != request.ids.len() {
        return Err(ActiveError::Annotator(format!(
            "expected {} labels, got {}",
            request.ids.len(),
            labels.len()
        )));
    }

    // commit
    let mut log = IterationLog {
        iteration: request.iteration,
        model_version: state.model_version,
        ..IterationLog::default()
    };
    let mut labeled = state.labeled.clone();
    for (&id, &is_match) in request.ids.iter().zip(&labels) {
        let predicted = selection.scores[&id].p >= THRESHOLD;
        match (predicted, is_match) {
            (true, false) => log.fp += 1,
            (true, true) => log.tp += 1,
            (false, true) => log.fn_ += 1,
            (false, false) => log.tn += 1,
        }
        labeled.insert_human(id, is_match, LabelSource::Human);
        pool.remove(id);
    }
    log.human_labels = request.ids.len();
    let mut proxy_errors = 0;
    for (ids, label) in [(&selection.hc_pos, true), (&selection.hc_neg, false)] {
        for &id in ids {
            if labeled.insert_proxy(id, label, state.model_version) {
                log.proxy_labels += 1;
                if data.gold.is_some_and(|g| g[id] != label) {
                    proxy_errors += 1;
                }
            }
            if !cfg.retain_high_confidence {
                pool.remove(id);
            }
        }
    }
    log.proxy_errors = data.gold.map(|_| proxy_errors);

    // W <- Update(W, D^L, B) for up to I epochs, keeping W_best. By default
    // W_best is scored on D^L itself, which includes the picks just labeled
    // and can overfit; `select_on_dev` scores on a held-out set instead.
    let train = labeled.training_pairs(data.pairs);
    let select_set: &[LabeledPair] = match (cfg.select_on_dev, data.dev) {
        (true, Some(dev)) => dev,
        (true, None) => return Err(ActiveError::Config("select_on_dev needs a dev set".into())),
        (false, _) => &train,
    };
    let mut candidate = model.clone();
    let tcfg = TrainConfig {
        batch_size: cfg.batch_size,
        epochs: cfg.max_epochs,
        adam: cfg.adam,
        seed: cfg.seed.wrapping_add(request.iteration as u64),
        shuffle: true,
    };
    let outcome = train_supervised(&mut candidate, &train, select_set, &tcfg)?;
    *model = candidate;
    log.f1_on_labeled = outcome.checkpoint.dev.f1;
    log.best_epoch = outcome.checkpoint.epoch;
    log.test_f1 = match data.test {
        Some(t) if !t.is_empty() => Some(evaluate(model, t)?.f1),
        _ => None,
    };

    state.labeled = labeled;
    state.pool = pool;
    state.model_version += 1;
    state.iteration = request.iteration;
    log.pool_size = state.pool.len();
    log.labeled_size = state.labeled.len();
    log.selection = selection;
    info!(
        "iteration {}: {} human, {} proxy, |D^L| = {}, F1 on D^L {:.2}{}",
        log.iteration,
        log.human_labels,
        log.proxy_labels,
        log.labeled_size,
        log.f1_on_labeled,
        log.test_f1.map(|f| format!(", test F1 {f:.2}")).unwrap_or_default()
    );
    Ok(Some(log))
}

#[derive(Clone, Debug)]
pub struct DtalOutcome {
    pub state: DtalState,
    pub logs: Vec<IterationLog>,
}

/// Runs up to T iterations, stopping early when the pool runs dry. The
/// model must already be initialized (transferred or random).
pub fn run_dtal(
    model: &mut ErModel,
    state: DtalState,
    annotator: &mut dyn Annotator,
    data: AlData<'_>,
    cfg: &ALConfig,
) -> Result<DtalOutcome> {
    cfg.validate()?;
    let mut state = state;
    let mut logs = Vec::new();
    while state.iteration < cfg.iterations {
        match al_iteration(&mut state, model, annotator, data, cfg)? {
            Some(log) => logs.push(log),
            None => {
                info!("pool exhausted after {} iterations", state.iteration);
                break;
            }
        }
    }
    Ok(DtalOutcome { state, logs })
}

/// `n` ids drawn uniformly without replacement, in draw order.
pub fn sample_random(ids: &[usize], n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.choose_multiple(&mut rng, n.min(ids.len())).copied().collect()
}

pub fn write_iteration_csv(path: &Path, logs: &[IterationLog]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "iter,human_labels,proxy_labels,fp,tp,fn,tn,f1_on_labeled,test_f1")?;
    for l in logs {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{:.4},{}",
            l.iteration,
            l.human_labels,
            l.proxy_labels,
            l.fp,
            l.tp,
            l.fn_,
            l.tn,
            l.f1_on_labeled,
            l.test_f1.map(|t| format!("{t:.4}")).unwrap_or_default()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{EmbeddingStore, NgramHashConfig, TokenizerConfig};
    use crate::model::{ModelConfig, PairText};
    use proptest::{prop_assert, proptest};
    use std::sync::Arc;

    fn ids_of(scored: &[(usize, f64)], ps: &[f64]) -> Vec<usize> {
        ps.iter()
            .map(|p| scored.iter().find(|(_, q)| q == p).unwrap().0)
            .collect()
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(entropy(0.0).unwrap(), 0.0);
        assert_eq!(entropy(1.0).unwrap(), 0.0);
        assert!((entropy(0.9).unwrap() - 0.325_083).abs() < 1e-6);
        assert!(entropy(1.5).is_err());
        assert!(entropy(-0.1).is_err());
        assert!(entropy(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn entropy_shape(p in 0.0f64..=1.0, q in 0.0f64..=1.0) {
            prop_assert!((entropy(p).unwrap() - entropy(1.0 - p).unwrap()).abs() < 1e-12);
            prop_assert!(entropy(p).unwrap() <= std::f64::consts::LN_2 + 1e-15);
            if (p - 0.5).abs() + 1e-9 < (q - 0.5).abs() {
                prop_assert!(entropy(p).unwrap() > entropy(q).unwrap());
            }
        }
    }

    #[test]
    fn partition_boundary() {
        let (m, n) = partition(&[(0, 0.9), (1, 0.5), (2, 0.49)]);
        assert_eq!((m, n), (vec![0, 1], vec![2]));
        assert_eq!(partition(&[]), (vec![], vec![]));
        assert!(partition(&[(0, 0.1), (1, 0.2)]).0.is_empty());
    }

    #[test]
    fn worked_selection_example() {
        let scored: Vec<(usize, f64)> = [0.99, 0.95, 0.8, 0.55, 0.45, 0.2, 0.05, 0.01]
            .iter()
            .enumerate()
            .map(|(i, &p)| (i, p))
            .collect();
        let (fp, fn_) = select_uncertain(&scored, 2);
        assert_eq!(fp, ids_of(&scored, &[0.55, 0.8]));
        assert_eq!(fn_, ids_of(&scored, &[0.45, 0.2]));
        let rest: Vec<_> = scored.iter().filter(|(i, _)| !fp.contains(i) && !fn_.contains(i)).copied().collect();
        let (pos, neg) = select_high_confidence(&rest, 2);
        assert_eq!(pos, ids_of(&scored, &[0.99, 0.95]));
        assert_eq!(neg, ids_of(&scored, &[0.01, 0.05]));

        let sel = select(Strategy::HighConfPartition, &scored, 4);
        assert_eq!((sel.likely_fp, sel.likely_fn), (fp, fn_));
        assert_eq!((sel.hc_pos, sel.hc_neg), (pos, neg));
        assert_eq!(sel.shortfall, Shortfall::default());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let scored: Vec<(usize, f64)> = [7, 3, 9, 1].iter().map(|&i| (i, 0.7)).collect();
        assert_eq!(select_uncertain(&scored, 2).0, vec![1, 3]);
        assert_eq!(select_topk_entropy(&scored, 3), vec![1, 3, 7]);
    }

    #[test]
    fn shortfall_clamps() {
        let scored = vec![(0, 0.9), (1, 0.2), (2, 0.3)];
        let sel = select(Strategy::HighConfPartition, &scored, 4);
        assert_eq!(sel.likely_fp, vec![0]);
        assert_eq!(sel.likely_fn, vec![2, 1]);
        assert!(sel.hc_pos.is_empty() && sel.hc_neg.is_empty());
        assert_eq!(
            sel.shortfall,
            Shortfall {
                likely_fp: 1,
                likely_fn: 0,
                hc_pos: 2,
                hc_neg: 2
            }
        );
    }

    #[test]
    fn topk_examples() {
        let scored = vec![(0, 0.5), (1, 0.9), (2, 0.1)];
        assert_eq!(select_topk_entropy(&scored, 1), vec![0]);
        assert_eq!(select_topk_entropy(&scored, 3).len(), 3);
    }

    #[test]
    fn strategies_respect_partitions() {
        let scored: Vec<(usize, f64)> = (0..40).map(|i| (i, (i as f64 * 0.37).fract())).collect();
        for s in Strategy::ALL {
            let sel = select(s, &scored, 6);
            let p = |id: &usize| scored[*id].1;
            assert!(sel.likely_fp.iter().all(|i| p(i) >= 0.5));
            assert!(sel.hc_pos.iter().all(|i| p(i) >= 0.5));
            assert!(sel.likely_fn.iter().all(|i| p(i) < 0.5));
            assert!(sel.hc_neg.iter().all(|i| p(i) < 0.5));
            let all: Vec<usize> = sel.human_ids().into_iter().chain(sel.hc_pos.clone()).chain(sel.hc_neg.clone()).collect();
            let set: HashSet<_> = all.iter().collect();
            assert_eq!(set.len(), all.len(), "{s:?}");
            if matches!(s, Strategy::Partition | Strategy::TopKEntropy) {
                assert!(sel.hc_pos.is_empty() && sel.hc_neg.is_empty());
            }
        }
    }

    #[test]
    fn proxy_never_overwrites_human() {
        let mut l = LabeledSet::default();
        l.insert_human(3, false, LabelSource::Human);
        assert!(!l.insert_proxy(3, true, 1));
        assert_eq!(l.get(3).unwrap().source, LabelSource::Human);
        assert!(l.insert_proxy(4, true, 1));
        l.insert_human(4, false, LabelSource::Human);
        assert_eq!(l.get(4).unwrap().source, LabelSource::Human);
        assert_eq!(l.count(LabelSource::Human), 2);
    }

    #[test]
    fn stale_pool_refused() {
        let pool = UnlabeledPool::new([1, 2]);
        assert!(matches!(pool.scored(0), Err(ActiveError::Stale { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(ALConfig { k: 3, ..ALConfig::default() }.validate().is_err());
        assert!(ALConfig { k: 0, ..ALConfig::default() }.validate().is_err());
        assert!(ALConfig { iterations: 0, ..ALConfig::default() }.validate().is_err());
        let c = ALConfig::default();
        assert_eq!((c.k, c.half_k(), c.batch_size, c.max_epochs, c.budget()), (20, 10, 16, 20, 200));
    }

    fn fixture() -> (ErModel, Vec<EncodedPair>, Vec<bool>) {
        let store = Arc::new(EmbeddingStore::hashed_only(8, NgramHashConfig::default()));
        let mut model = ErModel::new(ModelConfig::toy(), TokenizerConfig::default(), store).unwrap();
        let texts: Vec<(PairText, bool)> = (0..30)
            .map(|i| {
                let a = format!("record {i} alpha");
                let is_match = i % 3 == 0;
                let b = if is_match { a.clone() } else { format!("other {} zulu", i * 7) };
                (
                    PairText {
                        left: vec![a],
                        right: vec![b],
                    },
                    is_match,
                )
            })
            .collect();
        let enc = model.encode_pairs(&texts.iter().map(|t| t.0.clone()).collect::<Vec<_>>());
        (model, enc, texts.iter().map(|t| t.1).collect())
    }

    struct Failing;
    impl Annotator for Failing {
        fn label(&mut self, _: &LabelRequest) -> std::result::Result<Vec<bool>, String> {
            Err("gone".into())
        }
    }

    #[test]
    fn annotator_failure_is_atomic() {
        let (mut model, enc, _) = fixture();
        let before = model.params().clone();
        let mut state = DtalState::new(0..enc.len());
        let snapshot = state.clone();
        let data = AlData {
            pairs: &enc,
            gold: None,
            dev: None,
            test: None,
        };
        let cfg = ALConfig {
            k: 4,
            max_epochs: 2,
            ..ALConfig::default()
        };
        let err = al_iteration(&mut state, &mut model, &mut Failing, data, &cfg).unwrap_err();
        assert!(matches!(err, ActiveError::Annotator(_)));
        assert_eq!(state, snapshot);
        assert!(model.params().bitwise_eq(&before));
    }

    #[test]
    fn iteration_accounting() {
        let (mut model, enc, gold) = fixture();
        let mut oracle = OracleAnnotator::new(gold.clone());
        let data = AlData {
            pairs: &enc,
            gold: Some(&gold),
            dev: None,
            test: None,
        };
        let cfg = ALConfig {
            k: 4,
            iterations: 3,
            max_epochs: 2,
            ..ALConfig::default()
        };
        let out = run_dtal(&mut model, DtalState::new(0..enc.len()), &mut oracle, data, &cfg).unwrap();
        assert_eq!(out.logs.len(), 3);
        for l in &out.logs {
            let s = &l.selection;
            assert_eq!(l.human_labels, 4 - s.shortfall.likely_fp - s.shortfall.likely_fn);
            assert_eq!(l.fp + l.tp + l.fn_ + l.tn, l.human_labels);
            assert!(l.proxy_labels <= 4);
            assert_eq!(l.pool_size + l.labeled_size, enc.len());
        }
        let human: usize = out.logs.iter().map(|l| l.human_labels).sum();
        assert_eq!(out.state.labeled.count(LabelSource::Human), human);
        for (id, e) in out.state.labeled.iter() {
            if e.source == LabelSource::Human {
                assert_eq!(e.is_match, gold[id]);
            }
            assert!(!out.state.pool.contains(id));
        }
    }

    #[test]
    fn pool_exhaustion_stops_loop() {
        let (mut model, enc, gold) = fixture();
        let mut oracle = OracleAnnotator::new(gold.clone());
        let data = AlData {
            pairs: &enc,
            gold: Some(&gold),
            dev: None,
            test: None,
        };
        let cfg = ALConfig {
            k: 20,
            iterations: 5,
            max_epochs: 1,
            ..ALConfig::default()
        };
        let out = run_dtal(&mut model, DtalState::new(0..enc.len()), &mut oracle, data, &cfg).unwrap();
        assert!(out.logs.len() < 5);
        assert!(out.state.pool.is_empty());
        let human: usize = out.logs.iter().map(|l| l.human_labels).sum();
        assert!(human <= cfg.budget());
    }

    #[test]
    fn random_sample_is_seeded() {
        let ids: Vec<usize> = (0..50).collect();
        assert_eq!(sample_random(&ids, 10, 4), sample_random(&ids, 10, 4));
        assert_eq!(sample_random(&ids, 100, 4).len(), 50);
    }
}
