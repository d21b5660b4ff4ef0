//! The deep matcher: one bidirectional GRU shared by every attribute,
//! absolute-difference attribute similarities summed into a record
//! similarity, and highway-MLP heads for matching and dataset prediction.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::embed::{tokenize, EmbeddingStore, TokenizerConfig};

/// Class index of a match in the two-way matching output.
pub const MATCH: usize = 1;
pub const NON_MATCH: usize = 0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("pair has {found} attributes per side, expected {expected}")]
    Arity { expected: usize, found: usize },
    #[error("record similarity needs at least one attribute")]
    EmptySchema,
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetHead {
    /// One output per participating dataset.
    #[default]
    PerDataset,
    /// Sources merged into one class, target the other.
    SourceVsTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    /// GRU hidden units per direction. Attribute vectors and the MLP width
    /// are twice this.
    pub hidden: usize,
    pub mlp_layers: usize,
    /// Participating dataset names (sources first, target last). Two or more
    /// enable the dataset classifier.
    pub datasets: Vec<String>,
    pub dataset_head: DatasetHead,
    pub reversal_lambda: f64,
    pub fine_tune_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 300,
            hidden: 150,
            mlp_layers: 2,
            datasets: Vec::new(),
            dataset_head: DatasetHead::PerDataset,
            reversal_lambda: 1.0,
            fine_tune_embeddings: false,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for gradient checks and fast tests.
    pub fn toy() -> Self {
        Self {
            embedding_dim: 8,
            hidden: 4,
            ..Self::default()
        }
    }

    pub fn width(&self) -> usize {
        2 * self.hidden
    }

    pub fn dataset_classes(&self) -> usize {
        match self.dataset_head {
            _ if self.datasets.len() < 2 => 0,
            DatasetHead::PerDataset => self.datasets.len(),
            DatasetHead::SourceVsTarget => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if !self.reversal_lambda.is_finite() {
            return Err(ModelError::Config("reversal_lambda must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruDirectionIds {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruDirectionIds {
    pub fn all(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruIds {
    pub forward: GruDirectionIds,
    pub backward: GruDirectionIds,
}

impl GruIds {
    pub fn direction(&self, d: Direction) -> &GruDirectionIds {
        match d {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }

    pub fn all(&self) -> Vec<ParamId> {
        let mut v = self.forward.all().to_vec();
        v.extend(self.backward.all());
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HighwayIds {
    pub w_t: ParamId,
    pub b_t: ParamId,
    pub w_g: ParamId,
    pub b_g: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HighwayMlpIds {
    pub layers: Vec<HighwayIds>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl HighwayMlpIds {
    pub fn all(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self
            .layers
            .iter()
            .flat_map(|l| [l.w_t, l.b_t, l.w_g, l.b_g])
            .collect();
        v.extend([self.out_w, self.out_b]);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelIds {
    pub embedding: ParamId,
    pub gru: GruIds,
    pub matching: HighwayMlpIds,
    pub dataset: Option<HighwayMlpIds>,
}

/// Token vocabulary seen by this model; rows of the `embedding` parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Lexicon {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    fn intern(&mut self, token: &str) -> u32 {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }
}

/// Raw attribute values of both records, in schema order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairText {
    pub left: Vec<String>,
    pub right: Vec<String>,
}

/// Token ids per attribute for both records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub left: Vec<Vec<u32>>,
    pub right: Vec<Vec<u32>>,
}

impl EncodedPair {
    pub fn arity(&self) -> usize {
        self.left.len()
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PairActivation {
    pub left_attrs: Vec<Vec<f64>>,
    pub right_attrs: Vec<Vec<f64>>,
    pub attr_sims: Vec<Vec<f64>>,
    pub record_sim: Vec<f64>,
    /// Softmax over (non-match, match).
    pub probs: [f64; 2],
    pub p_match: f64,
}

/// Tape handles for every model parameter.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Debug)]
pub struct ErModel {
    config: ModelConfig,
    tokenizer: TokenizerConfig,
    store: Arc<EmbeddingStore>,
    lexicon: Lexicon,
    params: ParamStore,
    ids: ModelIds,
    /// Schema of the dataset the model was last trained on (metadata only).
    pub schema: Vec<String>,
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

fn add_highway_mlp(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    width: usize,
    layers: usize,
    outputs: usize,
) -> HighwayMlpIds {
    let layers = (0..layers)
        .map(|l| HighwayIds {
            w_t: params.add(format!("{prefix}.hw{l}.w_t"), init_matrix(rng, width, width), true),
            b_t: params.add(format!("{prefix}.hw{l}.b_t"), Tensor::zeros(&[width]), true),
            w_g: params.add(format!("{prefix}.hw{l}.w_g"), init_matrix(rng, width, width), true),
            b_g: params.add(format!("{prefix}.hw{l}.b_g"), Tensor::zeros(&[width]), true),
        })
        .collect();
    HighwayMlpIds {
        layers,
        out_w: params.add(format!("{prefix}.out.w"), init_matrix(rng, outputs, width), true),
        out_b: params.add(format!("{prefix}.out.b"), Tensor::zeros(&[outputs]), true),
    }
}

fn add_gru_direction(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    hidden: usize,
) -> GruDirectionIds {
    let mut w = |name: &str, params: &mut ParamStore| {
        params.add(format!("{prefix}.{name}"), init_matrix(rng, hidden, input), true)
    };
    let w_z = w("w_z", params);
    let w_r = w("w_r", params);
    let w_h = w("w_h", params);
    let mut u = |name: &str, params: &mut ParamStore| {
        params.add(format!("{prefix}.{name}"), init_matrix(rng, hidden, hidden), true)
    };
    let u_z = u("u_z", params);
    let u_r = u("u_r", params);
    let u_h = u("u_h", params);
    let mut b = |name: &str| params.add(format!("{prefix}.{name}"), Tensor::zeros(&[hidden]), true);
    GruDirectionIds {
        w_z,
        u_z,
        b_z: b("b_z"),
        w_r,
        u_r,
        b_r: b("b_r"),
        w_h,
        u_h,
        b_h: b("b_h"),
    }
}

impl ErModel {
    /// Freshly initialized model with an empty lexicon.
    pub fn new(config: ModelConfig, tokenizer: TokenizerConfig, store: Arc<EmbeddingStore>) -> Result<Self> {
        config.validate()?;
        if store.dim() != config.embedding_dim {
            return Err(ModelError::Config(format!(
                "embedding store has dimension {}, model expects {}",
                store.dim(),
                config.embedding_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let embedding = params.add(
            "embedding",
            Tensor::zeros(&[0, config.embedding_dim]),
            config.fine_tune_embeddings,
        );
        let (d, h, width) = (config.embedding_dim, config.hidden, config.width());
        let gru = GruIds {
            forward: add_gru_direction(&mut params, &mut rng, "gru.fwd", d, h),
            backward: add_gru_direction(&mut params, &mut rng, "gru.bwd", d, h),
        };
        let matching = add_highway_mlp(&mut params, &mut rng, "match", width, config.mlp_layers, 2);
        let n = config.dataset_classes();
        let dataset =
            (n >= 2).then(|| add_highway_mlp(&mut params, &mut rng, "dataset", width, config.mlp_layers, n));
        Ok(Self {
            config,
            tokenizer,
            store,
            lexicon: Lexicon::default(),
            params,
            ids: ModelIds {
                embedding,
                gru,
                matching,
                dataset,
            },
            schema: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &TokenizerConfig {
        &self.tokenizer
    }

    pub fn store(&self) -> &Arc<EmbeddingStore> {
        &self.store
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn ids(&self) -> &ModelIds {
        &self.ids
    }

    pub fn set_reversal_lambda(&mut self, lambda: f64) {
        self.config.reversal_lambda = lambda;
    }

    /// Replaces all parameter values with a snapshot taken from this model.
    pub fn restore(&mut self, snapshot: &ParamStore) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot from another model");
        self.params = snapshot.clone();
    }

    /// Adds tokens to the lexicon, growing the embedding table once.
    pub fn intern_tokens<'a>(&mut self, tokens: impl IntoIterator<Item = &'a str>) {
        let before = self.lexicon.len();
        for t in tokens {
            self.lexicon.intern(t);
        }
        if self.lexicon.len() == before {
            return;
        }
        let dim = self.config.embedding_dim;
        let param = self.params.get_mut(self.ids.embedding);
        let mut data = std::mem::take(&mut param.value).into_data();
        for t in &self.lexicon.tokens[before..] {
            data.extend(self.store.embed_token(t));
        }
        let rows = data.len() / dim;
        param.value = Tensor::matrix(rows, dim, data).expect("shape");
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        tokenize(text, &self.tokenizer)
    }

    /// Tokenizes and interns every value, then maps to token ids.
    pub fn encode_pairs(&mut self, pairs: &[PairText]) -> Vec<EncodedPair> {
        let tokenized: Vec<(Vec<Vec<String>>, Vec<Vec<String>>)> = pairs
            .iter()
            .map(|p| {
                (
                    p.left.iter().map(|v| self.tokenize(v)).collect(),
                    p.right.iter().map(|v| self.tokenize(v)).collect(),
                )
            })
            .collect();
        self.intern_tokens(
            tokenized
                .iter()
                .flat_map(|(l, r)| l.iter().chain(r))
                .flatten()
                .map(String::as_str),
        );
        let ids = |side: &Vec<Vec<String>>| -> Vec<Vec<u32>> {
            side.iter()
                .map(|toks| toks.iter().map(|t| self.lexicon.get(t).unwrap()).collect())
                .collect()
        };
        tokenized
            .iter()
            .map(|(l, r)| EncodedPair {
                left: ids(l),
                right: ids(r),
            })
            .collect()
    }

    pub fn encode_pair(&mut self, pair: &PairText) -> EncodedPair {
        self.encode_pairs(std::slice::from_ref(pair)).remove(0)
    }

    /// Places every parameter on the tape.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Bound {
        Bound {
            vars: self.params.iter().map(|(id, _)| tape.param(&self.params, id)).collect(),
        }
    }

    /// `W x + U h + b`
    fn gate_pre(tape: &mut Tape<'_>, b: &Bound, [w, u, bias]: [ParamId; 3], x: Var, h: Var) -> Result<Var> {
        let wx = tape.matmul(b.var(w), x)?;
        let uh = tape.matmul(b.var(u), h)?;
        let s = tape.add(wx, uh)?;
        Ok(tape.add(s, b.var(bias))?)
    }

    /// One GRU step: reset gate applied before the candidate projection.
    pub fn gru_cell(&self, tape: &mut Tape<'_>, b: &Bound, dir: Direction, x: Var, h: Var) -> Result<Var> {
        let p = self.ids.gru.direction(dir);
        let z_pre = Self::gate_pre(tape, b, [p.w_z, p.u_z, p.b_z], x, h)?;
        let z = tape.sigmoid(z_pre)?;
        let r_pre = Self::gate_pre(tape, b, [p.w_r, p.u_r, p.b_r], x, h)?;
        let r = tape.sigmoid(r_pre)?;
        let rh = tape.mul(r, h)?;
        let cand_pre = Self::gate_pre(tape, b, [p.w_h, p.u_h, p.b_h], x, rh)?;
        let cand = tape.tanh(cand_pre)?;
        let keep = tape.one_minus(z)?;
        let kept = tape.mul(keep, h)?;
        let fresh = tape.mul(z, cand)?;
        Ok(tape.add(kept, fresh)?)
    }

    /// Concatenated last hidden states of both directions; the zero vector
    /// for an empty value.
    pub fn encode_attribute(&self, tape: &mut Tape<'_>, b: &Bound, tokens: &[u32]) -> Result<Var> {
        let h = self.config.hidden;
        if tokens.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[2 * h]))?);
        }
        let xs: Vec<Var> = tokens
            .iter()
            .map(|&t| tape.gather_row(b.var(self.ids.embedding), t as usize))
            .collect::<std::result::Result<_, _>>()?;
        let zero = tape.constant(Tensor::zeros(&[h]))?;
        let mut fwd = zero;
        for &x in &xs {
            fwd = self.gru_cell(tape, b, Direction::Forward, x, fwd)?;
        }
        let mut bwd = zero;
        for &x in xs.iter().rev() {
            bwd = self.gru_cell(tape, b, Direction::Backward, x, bwd)?;
        }
        Ok(tape.concat(&[fwd, bwd])?)
    }

    /// Elementwise sum of attribute similarities.
    pub fn record_similarity(tape: &mut Tape<'_>, sims: &[Var]) -> Result<Var> {
        if sims.is_empty() {
            return Err(ModelError::EmptySchema);
        }
        Ok(tape.sum(sims)?)
    }

    /// Combines a layer's transform and gate: `g*t + (1-g)*x`.
    pub fn highway_combine(tape: &mut Tape<'_>, transform: Var, gate: Var, x: Var) -> Result<Var> {
        let carry_gate = tape.one_minus(gate)?;
        let carried = tape.mul(carry_gate, x)?;
        let moved = tape.mul(gate, transform)?;
        Ok(tape.add(moved, carried)?)
    }

    fn highway_mlp(&self, tape: &mut Tape<'_>, b: &Bound, mlp: &HighwayMlpIds, input: Var) -> Result<Var> {
        let mut x = input;
        for layer in &mlp.layers {
            let t = tape.matmul(b.var(layer.w_t), x)?;
            let t = tape.add(t, b.var(layer.b_t))?;
            let t = tape.relu(t)?;
            let g = tape.matmul(b.var(layer.w_g), x)?;
            let g = tape.add(g, b.var(layer.b_g))?;
            let g = tape.sigmoid(g)?;
            x = Self::highway_combine(tape, t, g, x)?;
        }
        let out = tape.matmul(b.var(mlp.out_w), x)?;
        Ok(tape.add(out, b.var(mlp.out_b))?)
    }

    fn check_arity(pair: &EncodedPair) -> Result<()> {
        if pair.left.len() != pair.right.len() {
            return Err(ModelError::Arity {
                expected: pair.left.len(),
                found: pair.right.len(),
            });
        }
        if pair.left.is_empty() {
            return Err(ModelError::EmptySchema);
        }
        Ok(())
    }

    /// Record similarity vector of a pair plus the per-attribute handles.
    pub fn similarity(&self, tape: &mut Tape<'_>, b: &Bound, pair: &EncodedPair) -> Result<SimilarityVars> {
        Self::check_arity(pair)?;
        let mut left = Vec::with_capacity(pair.arity());
        let mut right = Vec::with_capacity(pair.arity());
        let mut sims = Vec::with_capacity(pair.arity());
        for (l, r) in pair.left.iter().zip(&pair.right) {
            let a1 = self.encode_attribute(tape, b, l)?;
            let a2 = self.encode_attribute(tape, b, r)?;
            sims.push(tape.abs_diff(a1, a2)?);
            left.push(a1);
            right.push(a2);
        }
        let record = Self::record_similarity(tape, &sims)?;
        Ok(SimilarityVars {
            left,
            right,
            sims,
            record,
        })
    }

    pub fn matching_logits(&self, tape: &mut Tape<'_>, b: &Bound, record_sim: Var) -> Result<Var> {
        self.highway_mlp(tape, b, &self.ids.matching, record_sim)
    }

    /// Dataset classifier behind gradient reversal. `reverse = false` builds
    /// the same graph with a plain identity in place of the reversal.
    pub fn dataset_logits(&self, tape: &mut Tape<'_>, b: &Bound, record_sim: Var, reverse: bool) -> Result<Var> {
        let Some(head) = &self.ids.dataset else {
            return Err(ModelError::Config(format!(
                "dataset classifier needs at least 2 datasets, model has {}",
                self.config.datasets.len()
            )));
        };
        let x = if reverse {
            tape.grad_reverse(record_sim, self.config.reversal_lambda)?
        } else {
            record_sim
        };
        self.highway_mlp(tape, b, head, x)
    }

    pub fn classify_pair(&self, pair: &EncodedPair) -> Result<PairActivation> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let s = self.similarity(&mut tape, &b, pair)?;
        let logits = self.matching_logits(&mut tape, &b, s.record)?;
        let probs = crate::autodiff::softmax(tape.value(logits));
        let vals = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).to_vec()).collect::<Vec<_>>();
        Ok(PairActivation {
            left_attrs: vals(&s.left),
            right_attrs: vals(&s.right),
            attr_sims: vals(&s.sims),
            record_sim: tape.value(s.record).to_vec(),
            probs: [probs[NON_MATCH], probs[MATCH]],
            p_match: probs[MATCH],
        })
    }

    pub fn predict(&self, pair: &EncodedPair) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let s = self.similarity(&mut tape, &b, pair)?;
        let logits = self.matching_logits(&mut tape, &b, s.record)?;
        Ok(crate::autodiff::softmax(tape.value(logits))[MATCH])
    }

    /// Attribute vector of one token sequence.
    pub fn encode_value(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let v = self.encode_attribute(&mut tape, &b, tokens)?;
        Ok(tape.value(v).to_vec())
    }

    /// Match probabilities in input order, bitwise equal to [`Self::predict`].
    /// Each distinct token sequence is encoded once, in parallel.
    pub fn predict_many(&self, pairs: &[EncodedPair]) -> Result<Vec<f64>> {
        let mut index: HashMap<&[u32], usize> = HashMap::new();
        let mut seqs: Vec<&[u32]> = Vec::new();
        for p in pairs {
            Self::check_arity(p)?;
            for s in p.left.iter().chain(&p.right) {
                index.entry(s.as_slice()).or_insert_with(|| {
                    seqs.push(s);
                    seqs.len() - 1
                });
            }
        }
        let encoded: Vec<Vec<f64>> = seqs
            .par_iter()
            .map(|s| self.encode_value(s))
            .collect::<Result<_>>()?;
        pairs
            .par_iter()
            .map(|p| {
                let mut tape = Tape::new();
                let b = self.bind(&mut tape);
                let mut sims = Vec::with_capacity(p.arity());
                for (l, r) in p.left.iter().zip(&p.right) {
                    let a1 = tape.constant_ref(&encoded[index[l.as_slice()]])?;
                    let a2 = tape.constant_ref(&encoded[index[r.as_slice()]])?;
                    sims.push(tape.abs_diff(a1, a2)?);
                }
                let record = Self::record_similarity(&mut tape, &sims)?;
                let logits = self.matching_logits(&mut tape, &b, record)?;
                Ok(crate::autodiff::softmax(tape.value(logits))[MATCH])
            })
            .collect()
    }

    /// Matching NLL of one labeled pair; returns (loss, record similarity).
    pub fn match_loss(&self, tape: &mut Tape<'_>, b: &Bound, pair: &EncodedPair, is_match: bool) -> Result<(Var, Var)> {
        let s = self.similarity(tape, b, pair)?;
        let logits = self.matching_logits(tape, b, s.record)?;
        let loss = tape.softmax_nll(logits, if is_match { MATCH } else { NON_MATCH })?;
        Ok((loss, s.record))
    }

    /// Dataset class for a dataset index under the configured head.
    pub fn dataset_class(&self, dataset: usize) -> usize {
        match self.config.dataset_head {
            DatasetHead::PerDataset => dataset,
            DatasetHead::SourceVsTarget => usize::from(dataset + 1 == self.config.datasets.len()),
        }
    }
}

/// Handles produced by [`ErModel::similarity`].
#[derive(Clone, Debug)]
pub struct SimilarityVars {
    pub left: Vec<Var>,
    pub right: Vec<Var>,
    pub sims: Vec<Var>,
    pub record: Var,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::NgramHashConfig;

    fn toy_model(datasets: usize) -> ErModel {
        let config = ModelConfig {
            datasets: (0..datasets).map(|i| format!("d{i}")).collect(),
            ..ModelConfig::toy()
        };
        let store = Arc::new(EmbeddingStore::hashed_only(8, NgramHashConfig::default()));
        ErModel::new(config, TokenizerConfig::default(), store).unwrap()
    }

    fn text(left: &[&str], right: &[&str]) -> PairText {
        PairText {
            left: left.iter().map(|s| s.to_string()).collect(),
            right: right.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn zero_all(model: &mut ErModel) {
        let ids: Vec<ParamId> = model.params().iter().map(|(id, _)| id).collect();
        for id in ids {
            if id != model.ids().embedding {
                model.params_mut().get_mut(id).value.data_mut().fill(0.0);
            }
        }
    }

    #[test]
    fn gru_cell_with_zero_weights() {
        let mut model = toy_model(0);
        zero_all(&mut model);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x = tape.constant(Tensor::vector(vec![0.3; 8])).unwrap();
        let h0 = tape.constant(Tensor::zeros(&[4])).unwrap();
        let h1 = model.gru_cell(&mut tape, &b, Direction::Forward, x, h0).unwrap();
        assert_eq!(tape.value(h1), &[0.0; 4]);
        let v = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 4.0])).unwrap();
        let h2 = model.gru_cell(&mut tape, &b, Direction::Backward, x, v).unwrap();
        assert_eq!(tape.value(h2), &[0.5, -1.0, 0.25, 2.0]);
    }

    #[test]
    fn empty_value_encodes_to_zero() {
        let model = toy_model(0);
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let a = model.encode_attribute(&mut tape, &b, &[]).unwrap();
        assert_eq!(tape.value(a), &[0.0; 8]);
    }

    #[test]
    fn single_token_attribute_has_width_2h() {
        let mut model = toy_model(0);
        let enc = model.encode_pair(&text(&["acm"], &["acm"]));
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let a = model.encode_attribute(&mut tape, &b, &enc.left[0]).unwrap();
        assert_eq!(tape.shape(a), &[8]);
    }

    #[test]
    fn tied_directions_swap_under_reversal() {
        let mut model = toy_model(0);
        let fwd = model.ids().gru.forward.all();
        let bwd = model.ids().gru.backward.all();
        for (f, b) in fwd.iter().zip(bwd) {
            let v = model.params().get(*f).value.clone();
            model.params_mut().get_mut(b).value = v;
        }
        let enc = model.encode_pair(&text(&["deep entity resolution"], &["x"]));
        let seq = enc.left[0].clone();
        let rev: Vec<u32> = seq.iter().rev().copied().collect();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let a = model.encode_attribute(&mut tape, &b, &seq).unwrap();
        let r = model.encode_attribute(&mut tape, &b, &rev).unwrap();
        let (a, r) = (tape.value(a), tape.value(r));
        assert_eq!(&a[..4], &r[4..]);
        assert_eq!(&a[4..], &r[..4]);
    }

    #[test]
    fn record_similarity_sums_and_rejects_empty() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let s = ErModel::record_similarity(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(s), &[4.0, 6.0]);
        let one = ErModel::record_similarity(&mut tape, &[a]).unwrap();
        assert_eq!(tape.value(one), &[1.0, 2.0]);
        assert!(matches!(
            ErModel::record_similarity(&mut tape, &[]),
            Err(ModelError::EmptySchema)
        ));
    }

    #[test]
    fn highway_gate_extremes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.5, -2.0, 0.25])).unwrap();
        let t_pre = tape.constant(Tensor::vector(vec![-1.0, 3.0, 0.5])).unwrap();
        let t = tape.relu(t_pre).unwrap();
        let closed = tape.constant(Tensor::zeros(&[3])).unwrap();
        let open = tape.constant(Tensor::vector(vec![1.0; 3])).unwrap();
        let y0 = ErModel::highway_combine(&mut tape, t, closed, x).unwrap();
        let y1 = ErModel::highway_combine(&mut tape, t, open, x).unwrap();
        assert_eq!(tape.value(y0), &[1.5, -2.0, 0.25]);
        assert_eq!(tape.value(y1), &[0.0, 3.0, 0.5]);
    }

    #[test]
    fn identical_records_give_zero_similarity_and_bias_probability() {
        let mut model = toy_model(0);
        let enc = model.encode_pair(&text(&["sigmod conference", "2000"], &["sigmod conference", "2000"]));
        let act = model.classify_pair(&enc).unwrap();
        assert!(act.record_sim.iter().all(|v| *v == 0.0));
        // zero input: the MLP reduces to its bias path
        let other = model.encode_pair(&text(&["vldb", ""], &["vldb", ""]));
        let act2 = model.classify_pair(&other).unwrap();
        assert_eq!(act.p_match, act2.p_match);
        assert!((act.probs[0] + act.probs[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn attribute_order_does_not_change_probability() {
        let mut model = toy_model(0);
        let p1 = model.encode_pair(&text(&["a b", "2001", "x"], &["a c", "2002", "y"]));
        let p2 = model.encode_pair(&text(&["x", "a b", "2001"], &["y", "a c", "2002"]));
        let a = model.predict(&p1).unwrap();
        let b = model.predict(&p2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn similarity_width_independent_of_schema_size() {
        let mut model = toy_model(0);
        let four = model.encode_pair(&text(&["a", "b", "c", "d"], &["a", "b", "c", "e"]));
        let eight = model.encode_pair(&text(&["a"; 8], &["b"; 8]));
        assert_eq!(model.classify_pair(&four).unwrap().record_sim.len(), 8);
        assert_eq!(model.classify_pair(&eight).unwrap().record_sim.len(), 8);
    }

    #[test]
    fn dataset_head_requires_two_datasets() {
        let mut model = toy_model(1);
        let enc = model.encode_pair(&text(&["a"], &["b"]));
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let s = model.similarity(&mut tape, &b, &enc).unwrap();
        assert!(matches!(
            model.dataset_logits(&mut tape, &b, s.record, true),
            Err(ModelError::Config(_))
        ));

        let mut model = toy_model(3);
        let enc = model.encode_pair(&text(&["a"], &["b"]));
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let s = model.similarity(&mut tape, &b, &enc).unwrap();
        let with = model.dataset_logits(&mut tape, &b, s.record, true).unwrap();
        let without = model.dataset_logits(&mut tape, &b, s.record, false).unwrap();
        assert_eq!(tape.shape(with), &[3]);
        assert_eq!(tape.value(with), tape.value(without));
    }

    #[test]
    fn source_vs_target_head_is_binary() {
        let config = ModelConfig {
            datasets: vec!["s1".into(), "s2".into(), "t".into()],
            dataset_head: DatasetHead::SourceVsTarget,
            ..ModelConfig::toy()
        };
        let store = Arc::new(EmbeddingStore::hashed_only(8, NgramHashConfig::default()));
        let model = ErModel::new(config, TokenizerConfig::default(), store).unwrap();
        assert_eq!(model.config().dataset_classes(), 2);
        assert_eq!(model.dataset_class(0), 0);
        assert_eq!(model.dataset_class(1), 0);
        assert_eq!(model.dataset_class(2), 1);
    }

    #[test]
    fn batched_prediction_equals_single() {
        let mut m = toy_model(1);
        let texts = vec![
            PairText { left: vec!["a b".into(), "x".into()], right: vec!["a c".into(), "".into()] },
            PairText { left: vec!["a b".into(), "y z".into()], right: vec!["a b".into(), "x".into()] },
            PairText { left: vec!["c".into(), "x".into()], right: vec!["a c".into(), "y z".into()] },
        ];
        let enc = m.encode_pairs(&texts);
        let many = m.predict_many(&enc).unwrap();
        for (p, q) in enc.iter().zip(&many) {
            assert_eq!(m.predict(p).unwrap().to_bits(), q.to_bits());
        }
    }

    #[test]
    fn arity_mismatch_is_an_error() {
        let mut model = toy_model(0);
        let mut enc = model.encode_pair(&text(&["a", "b"], &["a", "b"]));
        enc.right.pop();
        assert!(matches!(model.predict(&enc), Err(ModelError::Arity { .. })));
    }

    #[test]
    fn store_dimension_must_match() {
        let store = Arc::new(EmbeddingStore::hashed_only(5, NgramHashConfig::default()));
        assert!(ErModel::new(ModelConfig::toy(), TokenizerConfig::default(), store).is_err());
    }
}
