//! Entity tables, blocking into a candidate set, 3:1:1 splitting, and the
//! prepared-dataset directory layout shared by the CLI and the server.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{tokenize, TokenizerConfig};
use crate::model::PairText;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {msg}")]
    Json { path: PathBuf, msg: String },
    #[error("{context}: row {row}: {msg}")]
    Row {
        context: String,
        row: usize,
        msg: String,
    },
    #[error("{0}: missing header")]
    MissingHeader(String),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("unknown attribute `{0}` in blocking rule")]
    UnknownAttribute(String),
    #[error("invalid blocking rule: {0}")]
    Rule(String),
    #[error("tables have different schemas: {0:?} vs {1:?}")]
    SchemaMismatch(Vec<String>, Vec<String>),
    #[error("cartesian product of {0} pairs exceeds the {CARTESIAN_LIMIT} pair limit; pass an explicit override")]
    TooManyPairs(usize),
    #[error("need at least 5 candidate pairs to split, got {0}")]
    TooFewPairs(usize),
    #[error("pair ({0}, {1}) references an unknown record")]
    UnknownRecord(String, String),
    #[error("duplicate pair ({0}, {1})")]
    DuplicatePair(String, String),
    #[error("gold labels must cover all pairs or none")]
    PartialLabels,
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Largest Cartesian product `block` builds without an override.
pub const CARTESIAN_LIMIT: usize = 5_000_000;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> DataError + '_ {
    move |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Json {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema(Vec<String>);

impl Schema {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(DataError::Schema("no attributes".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(DataError::Schema("empty attribute name".into()));
            }
            if !seen.insert(n) {
                return Err(DataError::Schema(format!("duplicate attribute `{n}`")));
            }
        }
        Ok(Self(names))
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, attr: &str) -> Option<usize> {
        self.0.iter().position(|a| a == attr)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    /// One value per schema attribute; the empty string is NULL.
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntityTable {
    pub id: String,
    schema: Schema,
    records: Vec<Record>,
    index: HashMap<String, usize>,
}

impl EntityTable {
    pub fn new(id: impl Into<String>, schema: Schema, records: Vec<Record>) -> Result<Self> {
        let id = id.into();
        let mut index = HashMap::with_capacity(records.len());
        for (row, r) in records.iter().enumerate() {
            if r.values.len() != schema.len() {
                return Err(DataError::Row {
                    context: id.clone(),
                    row: row + 1,
                    msg: format!("expected {} values, found {}", schema.len(), r.values.len()),
                });
            }
            if index.insert(r.id.clone(), row).is_some() {
                return Err(DataError::Row {
                    context: id.clone(),
                    row: row + 1,
                    msg: format!("duplicate record id `{}`", r.id),
                });
            }
        }
        Ok(Self {
            id,
            schema,
            records,
            index,
        })
    }

    /// Reads a CSV whose header is `id,<attr>,...`. Row numbers in errors
    /// count the header as row 1.
    pub fn load(path: impl AsRef<Path>, table_id: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let table_id = table_id.into();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_path(path)
            .map_err(csv_err(path))?;
        let mut rows = reader.records();
        let header = match rows.next() {
            Some(h) => h.map_err(csv_err(path))?,
            None => return Err(DataError::MissingHeader(path.display().to_string())),
        };
        if header.len() < 2 {
            return Err(DataError::MissingHeader(path.display().to_string()));
        }
        let schema = Schema::new(header.iter().skip(1).map(|s| s.trim().to_string()).collect())?;
        let mut records = Vec::new();
        for (i, row) in rows.enumerate() {
            let row_no = i + 2;
            let row = row.map_err(csv_err(path))?;
            if row.len() != header.len() {
                return Err(DataError::Row {
                    context: path.display().to_string(),
                    row: row_no,
                    msg: format!("expected {} columns, found {}", header.len(), row.len()),
                });
            }
            records.push(Record {
                id: row[0].to_string(),
                values: row.iter().skip(1).map(str::to_string).collect(),
            });
        }
        Self::new(table_id, schema, records).map_err(|e| match e {
            DataError::Row { row, msg, .. } => DataError::Row {
                context: path.display().to_string(),
                row: row + 1,
                msg,
            },
            other => other,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
        let mut header = vec!["id".to_string()];
        header.extend(self.schema.names().iter().cloned());
        w.write_record(&header).map_err(csv_err(path))?;
        for r in &self.records {
            w.write_record(std::iter::once(&r.id).chain(&r.values))
                .map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.index.get(id).map(|&i| &self.records[i])
    }
}

/// Set of character q-grams of the lowercased string.
pub fn qgrams(s: &str, q: usize) -> HashSet<String> {
    let chars: Vec<char> = s.to_lowercase().chars().collect();
    if q == 0 || chars.len() < q {
        // strings shorter than q contribute themselves as a single gram
        return if chars.is_empty() || q == 0 {
            HashSet::new()
        } else {
            HashSet::from([chars.iter().collect()])
        };
    }
    chars.windows(q).map(|w| w.iter().collect()).collect()
}

fn jaccard<T: Eq + std::hash::Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Jaccard similarity of q-gram sets. Two empty gram sets count as equal.
pub fn qgram_jaccard(s1: &str, s2: &str, q: usize) -> f64 {
    jaccard(&qgrams(s1, q), &qgrams(s2, q))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockingRule {
    /// Lowercased, trimmed values must be equal.
    Equality { attribute: String },
    QgramJaccard {
        attribute: String,
        q: usize,
        threshold: f64,
    },
    /// At least `min_shared` distinct tokens in common.
    TokenOverlap { attribute: String, min_shared: usize },
}

impl BlockingRule {
    pub fn attribute(&self) -> &str {
        match self {
            BlockingRule::Equality { attribute }
            | BlockingRule::QgramJaccard { attribute, .. }
            | BlockingRule::TokenOverlap { attribute, .. } => attribute,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BlockingRule::QgramJaccard { q, threshold, .. } => {
                if *q < 1 {
                    return Err(DataError::Rule("q must be at least 1".into()));
                }
                if !(*threshold > 0.0 && *threshold <= 1.0) {
                    return Err(DataError::Rule(format!("threshold {threshold} outside (0, 1]")));
                }
            }
            BlockingRule::TokenOverlap { min_shared, .. } if *min_shared < 1 => {
                return Err(DataError::Rule("min_shared must be at least 1".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Per-record precomputed blocking keys.
enum Key {
    Text(String),
    Grams(HashSet<String>),
    Tokens(HashSet<String>),
}

fn rule_key(rule: &BlockingRule, value: &str) -> Key {
    match rule {
        BlockingRule::Equality { .. } => Key::Text(value.trim().to_lowercase()),
        BlockingRule::QgramJaccard { q, .. } => Key::Grams(qgrams(value, *q)),
        BlockingRule::TokenOverlap { .. } => {
            Key::Tokens(tokenize(value, &TokenizerConfig::default()).into_iter().collect())
        }
    }
}

fn rule_passes(rule: &BlockingRule, a: &Key, b: &Key) -> bool {
    match (rule, a, b) {
        (BlockingRule::Equality { .. }, Key::Text(x), Key::Text(y)) => x == y,
        (BlockingRule::QgramJaccard { threshold, .. }, Key::Grams(x), Key::Grams(y)) => {
            jaccard(x, y) >= *threshold
        }
        (BlockingRule::TokenOverlap { min_shared, .. }, Key::Tokens(x), Key::Tokens(y)) => {
            x.intersection(y).count() >= *min_shared
        }
        _ => unreachable!("key kind follows rule kind"),
    }
}

/// Evaluates every rule on one record pair; the brute-force definition of
/// what `block` keeps.
pub fn pair_passes(rules: &[BlockingRule], schema: &Schema, left: &Record, right: &Record) -> bool {
    rules.iter().all(|rule| {
        let i = schema.position(rule.attribute()).expect("validated attribute");
        rule_passes(rule, &rule_key(rule, &left.values[i]), &rule_key(rule, &right.values[i]))
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidatePair {
    pub left: String,
    pub right: String,
    pub label: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub left_table: String,
    pub right_table: String,
    pub rules: Vec<BlockingRule>,
    pub seed: Option<u64>,
    pub source: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    pub pairs: Vec<CandidatePair>,
    pub provenance: Provenance,
}

/// Gold matches as (left id, right id).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GoldMatches(pub HashSet<(String, String)>);

impl GoldMatches {
    /// Reads `left_id,right_id` rows (header required).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
        let mut set = HashSet::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(csv_err(path))?;
            if row.len() < 2 {
                return Err(DataError::Row {
                    context: path.display().to_string(),
                    row: i + 2,
                    msg: "expected left_id,right_id".into(),
                });
            }
            set.insert((row[0].to_string(), row[1].to_string()));
        }
        Ok(Self(set))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
        w.write_record(["left_id", "right_id"]).map_err(csv_err(path))?;
        let sorted: BTreeSet<_> = self.0.iter().collect();
        for (l, r) in sorted {
            w.write_record([l, r]).map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn contains(&self, left: &str, right: &str) -> bool {
        self.0.contains(&(left.to_string(), right.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockOptions {
    /// Allow Cartesian products above [`CARTESIAN_LIMIT`].
    pub allow_large: bool,
}

/// Keeps a pair iff every rule passes; output sorted by (left id, right id).
pub fn block(
    left: &EntityTable,
    right: &EntityTable,
    rules: &[BlockingRule],
    gold: Option<&GoldMatches>,
    opts: BlockOptions,
) -> Result<CandidateSet> {
    if left.schema() != right.schema() {
        return Err(DataError::SchemaMismatch(
            left.schema().names().to_vec(),
            right.schema().names().to_vec(),
        ));
    }
    let schema = left.schema();
    let mut positions = Vec::with_capacity(rules.len());
    for rule in rules {
        rule.validate()?;
        positions.push(
            schema
                .position(rule.attribute())
                .ok_or_else(|| DataError::UnknownAttribute(rule.attribute().to_string()))?,
        );
    }
    let product = left.len() * right.len();
    if rules.is_empty() && product > CARTESIAN_LIMIT && !opts.allow_large {
        return Err(DataError::TooManyPairs(product));
    }
    let keys = |t: &EntityTable| -> Vec<Vec<Key>> {
        t.records()
            .par_iter()
            .map(|r| {
                rules
                    .iter()
                    .zip(&positions)
                    .map(|(rule, &i)| rule_key(rule, &r.values[i]))
                    .collect()
            })
            .collect()
    };
    let (lk, rk) = (keys(left), keys(right));
    let mut pairs: Vec<CandidatePair> = left
        .records()
        .par_iter()
        .zip(&lk)
        .flat_map_iter(|(l, lkeys)| {
            right
                .records()
                .iter()
                .zip(&rk)
                .filter(move |(_, rkeys)| {
                    rules
                        .iter()
                        .zip(lkeys.iter().zip(rkeys.iter()))
                        .all(|(rule, (a, b))| rule_passes(rule, a, b))
                })
                .map(move |(r, _)| CandidatePair {
                    left: l.id.clone(),
                    right: r.id.clone(),
                    label: gold.map(|g| g.contains(&l.id, &r.id)),
                })
        })
        .collect();
    pairs.sort();
    Ok(CandidateSet {
        pairs,
        provenance: Provenance {
            left_table: left.id.clone(),
            right_table: right.id.clone(),
            rules: rules.to_vec(),
            seed: None,
            source: "blocking".into(),
        },
    })
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(|p| p.label.is_some())
    }

    /// Labels every pair from a gold match list; absent pairs are non-matches.
    pub fn attach_labels(&mut self, gold: &GoldMatches) {
        for p in &mut self.pairs {
            p.label = Some(gold.contains(&p.left, &p.right));
        }
    }

    /// Checks uniqueness, id resolution, and all-or-none labels.
    pub fn validate(&self, left: &EntityTable, right: &EntityTable) -> Result<()> {
        let mut seen = HashSet::new();
        let labeled = self.pairs.iter().filter(|p| p.label.is_some()).count();
        if labeled != 0 && labeled != self.pairs.len() {
            return Err(DataError::PartialLabels);
        }
        for p in &self.pairs {
            if left.get(&p.left).is_none() || right.get(&p.right).is_none() {
                return Err(DataError::UnknownRecord(p.left.clone(), p.right.clone()));
            }
            if !seen.insert((&p.left, &p.right)) {
                return Err(DataError::DuplicatePair(p.left.clone(), p.right.clone()));
            }
        }
        Ok(())
    }

    /// Reads `left_id,right_id[,label]`; label is 0/1 or empty.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(csv_err(path))?;
        let mut pairs = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(csv_err(path))?;
            let row_err = |msg: String| DataError::Row {
                context: path.display().to_string(),
                row: i + 2,
                msg,
            };
            if row.len() < 2 {
                return Err(row_err("expected left_id,right_id[,label]".into()));
            }
            let label = match row.get(2).map(str::trim) {
                None | Some("") => None,
                Some("1") | Some("true") => Some(true),
                Some("0") | Some("false") => Some(false),
                Some(other) => return Err(row_err(format!("bad label `{other}`"))),
            };
            pairs.push(CandidatePair {
                left: row[0].to_string(),
                right: row[1].to_string(),
                label,
            });
        }
        let labeled = pairs.iter().filter(|p| p.label.is_some()).count();
        if labeled != 0 && labeled != pairs.len() {
            return Err(DataError::PartialLabels);
        }
        Ok(Self {
            pairs,
            provenance: Provenance {
                source: path.display().to_string(),
                ..Provenance::default()
            },
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_pairs_csv(path, &self.pairs)
    }
}

pub fn write_pairs_csv(path: &Path, pairs: &[CandidatePair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["left_id", "right_id", "label"]).map_err(csv_err(path))?;
    for p in pairs {
        let label = match p.label {
            Some(true) => "1",
            Some(false) => "0",
            None => "",
        };
        w.write_record([p.left.as_str(), p.right.as_str(), label])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub total: usize,
    pub ratio: [usize; 3],
    /// Start of dev and start of test within the shuffled order.
    pub cuts: [usize; 2],
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<CandidatePair>,
    pub dev: Vec<CandidatePair>,
    pub test: Vec<CandidatePair>,
    pub manifest: SplitManifest,
}

/// Seeded shuffle, then dev and test take floor(N/5) pairs each and the
/// remainder goes to train.
pub fn split(candidates: &CandidateSet, spec: SplitSpec) -> Result<Splits> {
    let n = candidates.len();
    if n < 5 {
        return Err(DataError::TooFewPairs(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let fifth = n / 5;
    let train_len = n - 2 * fifth;
    let cuts = [train_len, train_len + fifth];
    let take = |r: std::ops::Range<usize>| -> Vec<CandidatePair> {
        order[r].iter().map(|&i| candidates.pairs[i].clone()).collect()
    };
    Ok(Splits {
        train: take(0..cuts[0]),
        dev: take(cuts[0]..cuts[1]),
        test: take(cuts[1]..n),
        manifest: SplitManifest {
            seed: spec.seed,
            total: n,
            ratio: [3, 1, 1],
            cuts,
            train: train_len,
            dev: fifth,
            test: fifth,
        },
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub pairs: usize,
    pub matches: usize,
    pub attributes: usize,
}

pub fn stats(candidates: &CandidateSet, schema: &Schema) -> Stats {
    Stats {
        pairs: candidates.len(),
        matches: candidates.pairs.iter().filter(|p| p.label == Some(true)).count(),
        attributes: if candidates.is_empty() { 0 } else { schema.len() },
    }
}

/// Metadata written by `prepare`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub schema: Vec<String>,
    pub labeled: bool,
    pub provenance: Provenance,
}

/// A prepared dataset directory: both tables, candidate set, and splits.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub name: String,
    pub left: EntityTable,
    pub right: EntityTable,
    pub train: Vec<CandidatePair>,
    pub dev: Vec<CandidatePair>,
    pub test: Vec<CandidatePair>,
    pub labeled: bool,
}

pub const LEFT_FILE: &str = "left.csv";
pub const RIGHT_FILE: &str = "right.csv";
pub const CANDIDATES_FILE: &str = "candidates.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const STATS_FILE: &str = "stats.json";
pub const META_FILE: &str = "dataset.json";

impl PreparedDataset {
    /// Writes tables, candidates, splits, stats, and metadata into `dir`.
    pub fn write(
        dir: &Path,
        name: &str,
        left: &EntityTable,
        right: &EntityTable,
        candidates: &CandidateSet,
        splits: &Splits,
    ) -> Result<Stats> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        left.write_csv(&dir.join(LEFT_FILE))?;
        right.write_csv(&dir.join(RIGHT_FILE))?;
        candidates.write_csv(&dir.join(CANDIDATES_FILE))?;
        write_pairs_csv(&dir.join("train.csv"), &splits.train)?;
        write_pairs_csv(&dir.join("dev.csv"), &splits.dev)?;
        write_pairs_csv(&dir.join("test.csv"), &splits.test)?;
        write_json(&dir.join(SPLIT_FILE), &splits.manifest)?;
        let s = stats(candidates, left.schema());
        write_json(&dir.join(STATS_FILE), &s)?;
        write_json(
            &dir.join(META_FILE),
            &DatasetMeta {
                name: name.to_string(),
                schema: left.schema().names().to_vec(),
                labeled: candidates.is_labeled(),
                provenance: Provenance {
                    seed: Some(splits.manifest.seed),
                    ..candidates.provenance.clone()
                },
            },
        )?;
        Ok(s)
    }

    /// In-memory dataset from tables and a split.
    pub fn from_parts(name: &str, left: EntityTable, right: EntityTable, splits: &Splits) -> Result<Self> {
        let labeled = splits.train.iter().chain(&splits.dev).chain(&splits.test).all(|p| p.label.is_some());
        for set in [&splits.train, &splits.dev, &splits.test] {
            CandidateSet {
                pairs: set.clone(),
                provenance: Provenance::default(),
            }
            .validate(&left, &right)?;
        }
        Ok(Self {
            name: name.to_string(),
            left,
            right,
            train: splits.train.clone(),
            dev: splits.dev.clone(),
            test: splits.test.clone(),
            labeled,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = read_json(&dir.join(META_FILE))?;
        let left = EntityTable::load(dir.join(LEFT_FILE), format!("{}.left", meta.name))?;
        let right = EntityTable::load(dir.join(RIGHT_FILE), format!("{}.right", meta.name))?;
        let read = |f: &str| -> Result<Vec<CandidatePair>> {
            let set = CandidateSet::load(dir.join(f))?;
            set.validate(&left, &right)?;
            Ok(set.pairs)
        };
        Ok(Self {
            train: read("train.csv")?,
            dev: read("dev.csv")?,
            test: read("test.csv")?,
            name: meta.name,
            left,
            right,
            labeled: meta.labeled,
        })
    }

    pub fn schema(&self) -> &Schema {
        self.left.schema()
    }

    pub fn pair_text(&self, pair: &CandidatePair) -> Result<PairText> {
        let l = self.left.get(&pair.left);
        let r = self.right.get(&pair.right);
        match (l, r) {
            (Some(l), Some(r)) => Ok(PairText {
                left: l.values.clone(),
                right: r.values.clone(),
            }),
            _ => Err(DataError::UnknownRecord(pair.left.clone(), pair.right.clone())),
        }
    }

    pub fn texts(&self, pairs: &[CandidatePair]) -> Result<Vec<PairText>> {
        pairs.iter().map(|p| self.pair_text(p)).collect()
    }
}
