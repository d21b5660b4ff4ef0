//! Seeded synthetic citation tables with controlled noise.
//!
//! Entities come in topic clusters that share title words, authors, venues
//! and years, so blocking on title keeps roughly a cluster's worth of
//! candidates per record and most of them are hard non-matches. The right
//! table is a perturbed copy of the left one; gold is the identity pairing.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BlockingRule, EntityTable, GoldMatches, Record, Schema};

const TOPIC_WORDS: &[&str] = &[
    "query", "optimization", "index", "transaction", "stream", "graph", "mining", "learning",
    "neural", "probabilistic", "spatial", "temporal", "xml", "web", "semantic", "schema",
    "matching", "integration", "cleaning", "provenance", "privacy", "crowdsourcing", "distributed",
    "parallel", "cache", "storage", "compression", "sampling", "approximate", "join", "aggregation",
    "olap", "warehouse", "ranking", "keyword", "search", "recommendation", "clustering",
    "classification", "outlier", "sequence", "series", "similarity", "nearest", "neighbor",
    "trajectory", "sensor", "network", "peer", "cloud", "scalable", "efficient", "adaptive",
    "incremental", "interactive", "visual", "exploration", "benchmark", "workload", "concurrency",
    "recovery", "replication", "consistency", "logging", "memory", "flash", "hardware", "compiler",
    "language", "declarative", "datalog", "document", "entity", "resolution", "deduplication",
    "linkage", "uncertain", "incomplete", "quality", "lineage", "versioning", "scientific", "array",
    "matrix", "tensor", "embedding", "inference", "estimation", "cardinality", "cost", "plan",
    "execution", "vectorized", "columnar", "partitioning", "sharding", "elastic", "federated",
    "secure", "encrypted", "differential", "access", "control", "views", "materialized",
    "maintenance", "constraints", "dependencies", "repair", "discovery", "profiling",
    "summarization", "sketch", "synopsis", "histogram", "wavelet", "bloom", "hashing", "sorting",
    "skyline", "preference", "road", "location", "mobile", "social", "influence", "community",
    "knowledge", "ontology", "reasoning", "rdf", "sparql", "question", "answering", "text",
    "extraction", "retrieval", "workflow", "spreadsheet", "feedback", "lakes", "catalog", "metadata",
];

const FILLERS: &[&str] = &["for", "of", "in", "with", "using", "via", "towards", "over"];

const FIRST_NAMES: &[&str] = &[
    "james", "mary", "wei", "li", "anna", "peter", "maria", "david", "sarah", "michael", "yuki",
    "hans", "sofia", "raj", "priya", "carlos", "elena", "omar", "fatima", "ivan", "olga", "chen",
    "jun", "laura", "thomas", "nina", "paul", "rosa", "ahmed", "julia", "marco", "eva", "ken",
    "lucas", "emma", "victor", "irene", "samuel", "alice", "bruno",
];

const LAST_NAMES: &[&str] = &[
    "smith", "wang", "garcia", "mueller", "kim", "tanaka", "rossi", "novak", "silva", "kumar",
    "chen", "johnson", "lee", "brown", "martin", "dubois", "ivanov", "nguyen", "lopez", "schmidt",
    "kowalski", "sato", "ali", "hansen", "jensen", "moreau", "fischer", "weber", "costa", "santos",
    "patel", "singh", "zhang", "liu", "yang", "huang", "zhao", "wu", "sun", "ma", "hughes",
    "walker", "young", "king", "wright", "scott", "green", "baker", "adams", "nelson",
];

const VENUES: &[(&str, &str)] = &[
    ("international conference on management of data", "sigmod"),
    ("very large data bases", "vldb"),
    ("international conference on data engineering", "icde"),
    ("conference on information and knowledge management", "cikm"),
    ("knowledge discovery and data mining", "kdd"),
    ("extending database technology", "edbt"),
    ("international conference on database theory", "icdt"),
    ("principles of database systems", "pods"),
    ("transactions on database systems", "tods"),
    ("transactions on knowledge and data engineering", "tkde"),
    ("world wide web conference", "www"),
    ("web search and data mining", "wsdm"),
    ("conference on innovative data systems research", "cidr"),
    ("scientific and statistical database management", "ssdbm"),
    ("database systems for advanced applications", "dasfaa"),
    ("international semantic web conference", "iswc"),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Per title token: probability of one character edit.
    pub typo_rate: f64,
    /// Per title token: probability of dropping it (at least two remain).
    pub token_drop_rate: f64,
    /// Probability of writing author first names as initials.
    pub initials_rate: f64,
    /// Probability of replacing a venue by its acronym.
    pub abbreviation_rate: f64,
    /// Per non-title attribute: probability of a NULL.
    pub null_rate: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self::target()
    }
}

impl PerturbationConfig {
    pub fn none() -> Self {
        Self {
            typo_rate: 0.0,
            token_drop_rate: 0.0,
            initials_rate: 0.0,
            abbreviation_rate: 0.0,
            null_rate: 0.0,
        }
    }

    pub fn target() -> Self {
        Self {
            typo_rate: 0.12,
            token_drop_rate: 0.08,
            initials_rate: 0.7,
            abbreviation_rate: 0.5,
            null_rate: 0.15,
        }
    }

    pub fn source() -> Self {
        Self {
            typo_rate: 0.06,
            token_drop_rate: 0.05,
            initials_rate: 0.2,
            abbreviation_rate: 0.3,
            null_rate: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub entities: usize,
    pub cluster_size: usize,
    /// Fraction of entities that copy a cluster mate's title and authors
    /// but differ in venue and year.
    pub sibling_rate: f64,
    /// Any subset of title, authors, venue, year (title is required).
    pub attributes: Vec<String>,
    pub perturbation: PerturbationConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::target(7)
    }
}

impl SynthConfig {
    /// Four-attribute citation tables.
    pub fn target(seed: u64) -> Self {
        Self {
            entities: 300,
            cluster_size: 10,
            sibling_rate: 0.1,
            attributes: ["title", "authors", "venue", "year"].map(String::from).to_vec(),
            perturbation: PerturbationConfig::target(),
            seed,
        }
    }

    /// Three-attribute tables with milder noise, used as a transfer source.
    pub fn source(seed: u64) -> Self {
        Self {
            entities: 300,
            cluster_size: 10,
            sibling_rate: 0.1,
            attributes: ["title", "authors", "year"].map(String::from).to_vec(),
            perturbation: PerturbationConfig::source(),
            seed,
        }
    }

    /// Blocking that keeps pairs whose titles share trigrams.
    pub fn blocking(&self) -> Vec<BlockingRule> {
        vec![BlockingRule::QgramJaccard {
            attribute: "title".into(),
            q: 3,
            threshold: 0.25,
        }]
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub left: EntityTable,
    pub right: EntityTable,
    pub gold: GoldMatches,
}

#[derive(Clone, Debug)]
struct Author {
    first: String,
    last: String,
}

#[derive(Clone, Debug)]
struct Entity {
    title: Vec<String>,
    authors: Vec<Author>,
    venue: usize,
    year: u32,
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &'a [&'a str]) -> &'a str {
    pool[rng.gen_range(0..pool.len())]
}

fn gen_entities(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Entity> {
    let mut out: Vec<Entity> = Vec::with_capacity(cfg.entities);
    let mut seen_titles = HashSet::new();
    let cluster_size = cfg.cluster_size.max(1);
    while out.len() < cfg.entities {
        let core: Vec<&str> = TOPIC_WORDS.choose_multiple(rng, 3).copied().collect();
        let group: Vec<Author> = (0..5)
            .map(|_| Author {
                first: pick(rng, FIRST_NAMES).to_string(),
                last: pick(rng, LAST_NAMES).to_string(),
            })
            .collect();
        let venues: Vec<usize> = (0..3).map(|_| rng.gen_range(0..VENUES.len())).collect();
        let base_year = rng.gen_range(1995..2018);
        let start = out.len();
        for _ in 0..cluster_size.min(cfg.entities - start) {
            let venue = venues[rng.gen_range(0..venues.len())];
            let year = base_year + rng.gen_range(0..4);
            if out.len() > start && rng.gen_bool(cfg.sibling_rate) {
                let mate = out[rng.gen_range(start..out.len())].clone();
                let other_venue = (mate.venue + 1 + rng.gen_range(0..VENUES.len() - 1)) % VENUES.len();
                out.push(Entity {
                    venue: other_venue,
                    year: mate.year + 1 + rng.gen_range(0..2),
                    ..mate
                });
                continue;
            }
            let title = loop {
                let mut words: Vec<String> = core.iter().map(|w| w.to_string()).collect();
                words.shuffle(rng);
                words.insert(2, pick(rng, FILLERS).to_string());
                for _ in 0..rng.gen_range(2..=3) {
                    words.push(pick(rng, TOPIC_WORDS).to_string());
                }
                if seen_titles.insert(words.join(" ")) {
                    break words;
                }
            };
            let n_authors = rng.gen_range(1..=3);
            let authors = group.choose_multiple(rng, n_authors).cloned().collect();
            out.push(Entity {
                title,
                authors,
                venue,
                year,
            });
        }
    }
    out
}

fn typo(word: &str, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    if chars.len() < 3 {
        return word.to_string();
    }
    let i = rng.gen_range(1..chars.len());
    let letter = (b'a' + rng.gen_range(0..26u8)) as char;
    match rng.gen_range(0..4) {
        0 => {
            chars.remove(i);
        }
        1 => chars.insert(i, letter),
        2 => chars[i] = letter,
        _ => chars.swap(i - 1, i),
    }
    chars.into_iter().collect()
}

fn render(e: &Entity, attr: &str, noise: Option<(&PerturbationConfig, &mut ChaCha8Rng)>) -> String {
    let Some((p, rng)) = noise else {
        return match attr {
            "title" => e.title.join(" "),
            "authors" => e
                .authors
                .iter()
                .map(|a| format!("{} {}", a.first, a.last))
                .collect::<Vec<_>>()
                .join(", "),
            "venue" => VENUES[e.venue].0.to_string(),
            "year" => e.year.to_string(),
            other => unreachable!("unknown attribute {other}"),
        };
    };
    if attr != "title" && rng.gen_bool(p.null_rate) {
        return String::new();
    }
    match attr {
        "title" => {
            let mut kept: Vec<String> = Vec::new();
            for (i, w) in e.title.iter().enumerate() {
                let remaining = e.title.len() - i;
                if kept.len() + remaining > 2 && rng.gen_bool(p.token_drop_rate) {
                    continue;
                }
                kept.push(if rng.gen_bool(p.typo_rate) { typo(w, rng) } else { w.clone() });
            }
            kept.join(" ")
        }
        "authors" => {
            let initials = rng.gen_bool(p.initials_rate);
            e.authors
                .iter()
                .map(|a| {
                    if initials {
                        format!("{}. {}", &a.first[..1], a.last)
                    } else {
                        format!("{} {}", a.first, a.last)
                    }
                })
                .collect::<Vec<_>>()
                .join(", ")
        }
        "venue" => {
            let (full, abbr) = VENUES[e.venue];
            if rng.gen_bool(p.abbreviation_rate) { abbr } else { full }.to_string()
        }
        "year" => e.year.to_string(),
        other => unreachable!("unknown attribute {other}"),
    }
}

/// Generates both tables and the gold pairing `(a{i}, b{i})`.
pub fn synth_generate(cfg: &SynthConfig) -> SynthCorpus {
    assert!(cfg.entities >= 10, "need at least 10 entities");
    for a in &cfg.attributes {
        assert!(
            matches!(a.as_str(), "title" | "authors" | "venue" | "year"),
            "unknown synthetic attribute `{a}`"
        );
    }
    assert!(cfg.attributes.iter().any(|a| a == "title"), "title is required");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let entities = gen_entities(cfg, &mut rng);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_5eed);
    let schema = Schema::new(cfg.attributes.clone()).expect("valid attribute list");
    let mut left = Vec::with_capacity(entities.len());
    let mut right = Vec::with_capacity(entities.len());
    let mut gold = HashSet::new();
    for (i, e) in entities.iter().enumerate() {
        let (a, b) = (format!("a{i}"), format!("b{i}"));
        left.push(Record {
            id: a.clone(),
            values: cfg.attributes.iter().map(|attr| render(e, attr, None)).collect(),
        });
        right.push(Record {
            id: b.clone(),
            values: cfg
                .attributes
                .iter()
                .map(|attr| render(e, attr, Some((&cfg.perturbation, &mut noise_rng))))
                .collect(),
        });
        gold.insert((a, b));
    }
    SynthCorpus {
        left: EntityTable::new("left", schema.clone(), left).expect("unique ids"),
        right: EntityTable::new("right", schema, right).expect("unique ids"),
        gold: GoldMatches(gold),
    }
}
