//! The seeded synthetic comparison of DTAL against random sampling and of
//! High-Conf+Partition against Top-K entropy sampling.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::active::{ALConfig, IterationLog, OracleAnnotator, Strategy};
use crate::autodiff::AdamConfig;
use crate::embed::{EmbeddingStore, NgramHashConfig, TokenizerConfig};
use crate::model::ModelConfig;
use crate::pipeline::{active, encode_dataset, new_model, random_sampling, synth_dataset, test_report, transfer, Result};
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub target_seed: u64,
    pub source_seed: u64,
    pub embedding_dim: usize,
    pub hidden: usize,
    /// Sampling size per iteration.
    pub k: usize,
    pub iterations: usize,
    /// Epoch cap for transfer and for each active-learning retrain.
    pub epochs: usize,
    pub adam: AdamConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: (1..=5).collect(),
            target_seed: 7,
            source_seed: 11,
            embedding_dim: 32,
            hidden: 16,
            k: 20,
            iterations: 10,
            epochs: 20,
            adam: AdamConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Human labels spent by one active-learning run.
    pub fn budget(&self) -> usize {
        self.k * self.iterations
    }
}

/// Test F1 of every method for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub random: f64,
    pub transfer: f64,
    pub high_conf_partition: f64,
    pub top_k_entropy: f64,
    /// Test F1 after each High-Conf+Partition iteration.
    pub curve: Vec<f64>,
    /// Per-iteration logs of the High-Conf+Partition run.
    #[serde(skip)]
    pub logs: Vec<IterationLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seeds: Vec<SeedResult>,
    pub target_pairs: usize,
    pub target_matches: usize,
    pub seconds: f64,
}

impl ExperimentReport {
    fn column(&self, f: impl Fn(&SeedResult) -> f64) -> Summary {
        Summary::of(&self.seeds.iter().map(f).collect::<Vec<_>>())
    }

    pub fn random(&self) -> Summary {
        self.column(|s| s.random)
    }

    pub fn transfer(&self) -> Summary {
        self.column(|s| s.transfer)
    }

    pub fn high_conf_partition(&self) -> Summary {
        self.column(|s| s.high_conf_partition)
    }

    pub fn top_k_entropy(&self) -> Summary {
        self.column(|s| s.top_k_entropy)
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, n }
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Runs every method on the same target for each seed. The seed drives
/// model initialization, shuffling and random sampling; the data is fixed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let store = Arc::new(EmbeddingStore::hashed_only(cfg.embedding_dim, NgramHashConfig::default()));
    let (target, stats) = synth_dataset("target", &SynthConfig::target(cfg.target_seed), cfg.target_seed)?;
    let (source, _) = synth_dataset("source", &SynthConfig::source(cfg.source_seed), cfg.source_seed)?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let model_cfg = ModelConfig {
            embedding_dim: cfg.embedding_dim,
            hidden: cfg.hidden,
            datasets: vec!["source".into(), "target".into()],
            seed,
            ..ModelConfig::default()
        };
        let mut base = new_model(model_cfg, TokenizerConfig::default(), store.clone())?;
        let src = encode_dataset(&mut base, &source)?;
        let tgt = encode_dataset(&mut base, &target)?;
        let train = TrainConfig {
            epochs: cfg.epochs,
            adam: cfg.adam,
            seed,
            ..TrainConfig::default()
        };

        // Random sampling gets as many epochs as a whole active run.
        let mut random = base.clone();
        let random_cfg = TrainConfig {
            epochs: cfg.epochs * cfg.iterations,
            ..train.clone()
        };
        random_sampling(&mut random, &tgt, cfg.budget(), seed, &random_cfg)?;
        let random = test_report(&random, &tgt)?.f1;

        let mut transferred = base;
        transfer(&mut transferred, &[(0, &src)], &tgt, 1, true, &train)?;
        let transfer_f1 = test_report(&transferred, &tgt)?.f1;

        let mut finals = Vec::with_capacity(2);
        let mut curve = Vec::new();
        let mut logs = Vec::new();
        for strategy in [Strategy::HighConfPartition, Strategy::TopKEntropy] {
            let mut model = transferred.clone();
            let al = ALConfig {
                k: cfg.k,
                iterations: cfg.iterations,
                max_epochs: cfg.epochs,
                strategy,
                adam: cfg.adam,
                seed,
                ..ALConfig::default()
            };
            let gold = tgt.require_train_labels()?.iter().map(|p| p.is_match).collect();
            let out = active(&mut model, &tgt, &al, &mut OracleAnnotator::new(gold))?;
            let f1s: Vec<f64> = out.logs.iter().filter_map(|l| l.test_f1).collect();
            finals.push(f1s.last().copied().unwrap_or(f64::NAN));
            if strategy == Strategy::HighConfPartition {
                curve = f1s;
                logs = out.logs;
            }
        }
        log::info!("seed {seed}: random {random:.1} transfer {transfer_f1:.1} dtal {:.1} top-k {:.1}", finals[0], finals[1]);
        seeds.push(SeedResult {
            seed,
            random,
            transfer: transfer_f1,
            high_conf_partition: finals[0],
            top_k_entropy: finals[1],
            curve,
            logs,
        });
    }
    Ok(ExperimentReport {
        seeds,
        target_pairs: stats.pairs,
        target_matches: stats.matches,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_uses_sample_std() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of(&[7.0]).std, 0.0);
        assert_eq!(format!("{}", Summary::of(&[97.5, 98.0])), "97.75 ± 0.35");
    }

    #[test]
    fn tiny_experiment_runs() {
        let cfg = ExperimentConfig {
            seeds: vec![3],
            embedding_dim: 8,
            hidden: 4,
            k: 4,
            iterations: 2,
            epochs: 1,
            ..ExperimentConfig::default()
        };
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.seeds.len(), 1);
        assert_eq!(report.seeds[0].curve.len(), 2);
        assert_eq!(report.seeds[0].logs.len(), 2);
        assert!(report.target_pairs > report.target_matches);
    }
}
