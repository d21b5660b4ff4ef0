//! End-to-end runs shared by the CLI and the server: encoding prepared
//! datasets, transfer initialization, active learning, and the
//! random-sampling baseline.

use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::active::{run_dtal, ActiveError, ALConfig, AlData, Annotator, DtalOutcome, DtalState};
use crate::data::{block, split, BlockOptions, CandidateSet, DataError, PreparedDataset, SplitSpec, Splits, Stats};
use crate::embed::{EmbeddingStore, TokenizerConfig};
use crate::model::{EncodedPair, ErModel, ModelConfig, ModelError};
use crate::synth::{synth_generate, SynthConfig, SynthCorpus};
use crate::trainer::{
    evaluate, train_adversarial, train_supervised, EvalReport, LabeledPair, SourceSet, TrainConfig, TrainError,
    TrainOutcome,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Active(#[from] ActiveError),
    #[error("dataset `{0}` has no gold labels for its {1} split")]
    Unlabeled(String, &'static str),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// A prepared dataset with every pair encoded by one model.
#[derive(Clone, Debug)]
pub struct EncodedDataset {
    pub name: String,
    pub schema: Vec<String>,
    /// Train pairs in file order; pool ids index this list.
    pub train_pairs: Vec<EncodedPair>,
    pub train_gold: Option<Vec<bool>>,
    pub dev: Vec<LabeledPair>,
    pub test: Vec<LabeledPair>,
}

impl EncodedDataset {
    pub fn train_labeled(&self) -> Option<Vec<LabeledPair>> {
        let gold = self.train_gold.as_ref()?;
        Some(
            self.train_pairs
                .iter()
                .zip(gold)
                .map(|(pair, &is_match)| LabeledPair {
                    pair: pair.clone(),
                    is_match,
                })
                .collect(),
        )
    }

    pub fn require_train_labels(&self) -> Result<Vec<LabeledPair>> {
        self.train_labeled()
            .ok_or_else(|| PipelineError::Unlabeled(self.name.clone(), "train"))
    }
}

/// Interns every value of `ds` into the model's lexicon and encodes all
/// splits. Dev and test pairs without gold labels are dropped.
pub fn encode_dataset(model: &mut ErModel, ds: &PreparedDataset) -> Result<EncodedDataset> {
    let enc = |model: &mut ErModel, pairs: &[crate::data::CandidatePair]| -> Result<Vec<EncodedPair>> {
        Ok(model.encode_pairs(&ds.texts(pairs)?))
    };
    let labeled = |pairs: &[crate::data::CandidatePair], encoded: Vec<EncodedPair>| -> Vec<LabeledPair> {
        pairs
            .iter()
            .zip(encoded)
            .filter_map(|(p, pair)| p.label.map(|is_match| LabeledPair { pair, is_match }))
            .collect()
    };
    let train_pairs = enc(model, &ds.train)?;
    let dev = enc(model, &ds.dev)?;
    let test = enc(model, &ds.test)?;
    let train_gold: Option<Vec<bool>> = ds.train.iter().map(|p| p.label).collect();
    Ok(EncodedDataset {
        name: ds.name.clone(),
        schema: ds.schema().names().to_vec(),
        train_pairs,
        train_gold,
        dev: labeled(&ds.dev, dev),
        test: labeled(&ds.test, test),
    })
}

fn synth_parts(cfg: &SynthConfig, split_seed: u64) -> Result<(SynthCorpus, CandidateSet, Splits)> {
    let corpus = synth_generate(cfg);
    let candidates = block(
        &corpus.left,
        &corpus.right,
        &cfg.blocking(),
        Some(&corpus.gold),
        BlockOptions::default(),
    )?;
    let splits = split(&candidates, SplitSpec { seed: split_seed })?;
    Ok((corpus, candidates, splits))
}

/// Generates, blocks and splits a synthetic corpus in memory.
pub fn synth_dataset(name: &str, cfg: &SynthConfig, split_seed: u64) -> Result<(PreparedDataset, Stats)> {
    let (corpus, candidates, splits) = synth_parts(cfg, split_seed)?;
    let stats = crate::data::stats(&candidates, corpus.left.schema());
    Ok((
        PreparedDataset::from_parts(name, corpus.left, corpus.right, &splits)?,
        stats,
    ))
}

/// Generates, blocks and splits a synthetic corpus into a prepared
/// dataset directory.
pub fn write_synth_dataset(dir: &Path, name: &str, cfg: &SynthConfig, split_seed: u64) -> Result<Stats> {
    let (corpus, candidates, splits) = synth_parts(cfg, split_seed)?;
    Ok(PreparedDataset::write(dir, name, &corpus.left, &corpus.right, &candidates, &splits)?)
}

pub fn new_model(config: ModelConfig, tokenizer: TokenizerConfig, store: Arc<EmbeddingStore>) -> Result<ErModel> {
    Ok(ErModel::new(config, tokenizer, store)?)
}

/// Trains on source datasets for use on `target`. With `adapt` the dataset
/// classifier is trained adversarially against the target's train pairs;
/// otherwise this is plain supervised training on the merged sources.
/// Source indices follow `model.config().datasets`.
pub fn transfer(
    model: &mut ErModel,
    sources: &[(usize, &EncodedDataset)],
    target: &EncodedDataset,
    target_index: usize,
    adapt: bool,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut sets = Vec::with_capacity(sources.len());
    for (idx, ds) in sources {
        sets.push(SourceSet {
            dataset: *idx,
            train: ds.require_train_labels()?,
            dev: ds.dev.clone(),
        });
    }
    let outcome = if adapt {
        train_adversarial(model, &sets, &target.train_pairs, target_index, cfg)?
    } else {
        let train: Vec<LabeledPair> = sets.iter().flat_map(|s| s.train.iter().cloned()).collect();
        let dev: Vec<LabeledPair> = sets.iter().flat_map(|s| s.dev.iter().cloned()).collect();
        train_supervised(model, &train, &dev, cfg)?
    };
    model.schema = target.schema.clone();
    Ok(outcome)
}

/// Active learning over the target's train split as the unlabeled pool.
pub fn active(
    model: &mut ErModel,
    target: &EncodedDataset,
    cfg: &ALConfig,
    annotator: &mut dyn Annotator,
) -> Result<DtalOutcome> {
    let data = AlData {
        pairs: &target.train_pairs,
        gold: target.train_gold.as_deref(),
        dev: (!target.dev.is_empty()).then_some(target.dev.as_slice()),
        test: (!target.test.is_empty()).then_some(target.test.as_slice()),
    };
    let state = DtalState::new(0..target.train_pairs.len());
    let out = run_dtal(model, state, annotator, data, cfg)?;
    model.schema = target.schema.clone();
    Ok(out)
}

/// Baseline: `n` uniformly sampled labeled train pairs, trained from the
/// model's current (normally random) weights. Epoch selection scores the
/// sample itself, mirroring what active learning can see.
pub fn random_sampling(
    model: &mut ErModel,
    target: &EncodedDataset,
    n: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let all = target.require_train_labels()?;
    let ids: Vec<usize> = (0..all.len()).collect();
    let sample: Vec<LabeledPair> = crate::active::sample_random(&ids, n, seed)
        .into_iter()
        .map(|i| all[i].clone())
        .collect();
    let out = train_supervised(model, &sample, &sample, cfg)?;
    model.schema = target.schema.clone();
    Ok(out)
}

pub fn test_report(model: &ErModel, target: &EncodedDataset) -> Result<EvalReport> {
    if target.test.is_empty() {
        return Err(PipelineError::Unlabeled(target.name.clone(), "test"));
    }
    Ok(evaluate(model, &target.test)?)
}
