use std::path::{Path, PathBuf};
use std::sync::Arc;

use dtal_core::active::ALConfig;
use dtal_core::data::BlockingRule;
use dtal_core::embed::{EmbeddingStore, NgramHashConfig, TokenizerConfig};
use dtal_core::model::ModelConfig;
use dtal_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Settings shared by every command. Each field may be omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub active: ALConfig,
    pub tokenizer: TokenizerConfig,
    pub ngram: NgramHashConfig,
    /// Pretrained vectors in the whitespace text format.
    pub embeddings: Option<PathBuf>,
    /// Rules used by `prepare --block` when the rules file is omitted.
    pub blocking: Vec<BlockingRule>,
    pub split_seed: u64,
    pub baseline: BaselineConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Logistic regression step size.
    pub lr: f64,
    pub epochs: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { lr: 1.0, epochs: 500 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            active: ALConfig::default(),
            tokenizer: TokenizerConfig::default(),
            ngram: NgramHashConfig::default(),
            embeddings: None,
            blocking: Vec::new(),
            split_seed: 1,
            baseline: BaselineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Overrides every seed.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.active.seed = seed;
        self.split_seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: String| CliError::Config(e);
        self.model.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        self.active.validate().map_err(|e| cfg(e.to_string()))?;
        for rule in &self.blocking {
            rule.validate().map_err(|e| cfg(e.to_string()))?;
        }
        if !(self.baseline.lr > 0.0) || self.baseline.epochs == 0 {
            return Err(cfg("baseline lr and epochs must be positive".into()));
        }
        Ok(())
    }

    /// The configured pretrained vectors, if any.
    pub fn pretrained(&self) -> Result<Option<Arc<EmbeddingStore>>, CliError> {
        let Some(path) = &self.embeddings else {
            return Ok(None);
        };
        let store =
            EmbeddingStore::load(path, self.ngram).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(Some(Arc::new(store)))
    }

    /// The configured vectors, or hashed n-gram vectors only.
    pub fn store(&self) -> Result<Arc<EmbeddingStore>, CliError> {
        match self.pretrained()? {
            None => Ok(Arc::new(EmbeddingStore::hashed_only(self.model.embedding_dim, self.ngram))),
            Some(store) if store.dim() == self.model.embedding_dim => Ok(store),
            Some(store) => Err(CliError::Config(format!(
                "embeddings have dimension {}, model.embedding_dim is {}",
                store.dim(),
                self.model.embedding_dim
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"epoch": 3}}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 16);
    }

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let cfg = RunConfig::load(None).unwrap();
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.adam.lr, 0.001);
        assert_eq!(cfg.active.k, 20);
        assert_eq!(cfg.model.embedding_dim, 300);
        assert_eq!(cfg.model.hidden, 150);
        cfg.validate().unwrap();
    }

    #[test]
    fn echoed_config_reloads_identically() {
        let mut cfg = RunConfig::load(None).unwrap();
        cfg.reseed(4);
        cfg.active.k = 8;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        assert_eq!(RunConfig::load(Some(&path)).unwrap(), cfg);
    }

    fn schema() -> serde_json::Value {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/run-config.schema.json");
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
    }

    /// The object built from every `default` in the schema.
    fn schema_defaults(node: &serde_json::Value, root: &serde_json::Value) -> serde_json::Value {
        if let Some(r) = node.get("$ref").and_then(|r| r.as_str()) {
            let name = r.trim_start_matches("#/$defs/");
            return node.get("default").cloned().unwrap_or_else(|| schema_defaults(&root["$defs"][name], root));
        }
        if let Some(d) = node.get("default") {
            return d.clone();
        }
        let props = node["properties"].as_object().expect("object schema");
        serde_json::Value::Object(props.iter().map(|(k, v)| (k.clone(), schema_defaults(v, root))).collect())
    }

    #[test]
    fn shipped_schema_matches_the_config() {
        let schema = schema();
        let validator = jsonschema::validator_for(&schema).unwrap();
        let defaults = serde_json::to_value(RunConfig::default()).unwrap();
        assert!(validator.is_valid(&defaults));
        assert_eq!(schema_defaults(&schema, &schema), defaults);

        let mut cfg = RunConfig::default();
        cfg.embeddings = Some("vectors.txt".into());
        cfg.blocking = vec![
            BlockingRule::Equality { attribute: "year".into() },
            BlockingRule::QgramJaccard { attribute: "title".into(), q: 3, threshold: 0.25 },
            BlockingRule::TokenOverlap { attribute: "authors".into(), min_shared: 1 },
        ];
        assert!(validator.is_valid(&serde_json::to_value(&cfg).unwrap()));
        for bad in [r#"{"trian": {}}"#, r#"{"active": {"k": 3}}"#, r#"{"blocking": [{"kind": "soundex", "attribute": "a"}]}"#] {
            assert!(!validator.is_valid(&serde_json::from_str(bad).unwrap()), "{bad}");
        }
    }
}
