//! Classical baselines: per-attribute string similarity features with
//! logistic regression and Gaussian naive Bayes.
//!
//! All string measures compare lowercased, trimmed values; token-based
//! measures use the default tokenizer.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::qgram_jaccard;
use crate::embed::{tokenize, TokenizerConfig};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("no training examples")]
    Empty,
    #[error("training set has a single class")]
    SingleClass,
    #[error("feature vector has {found} entries, model expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("feature file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

pub const FEATURE_NAMES: [&str; 6] = [
    "qgram_jaccard",
    "cosine",
    "lev_distance",
    "lev_similarity",
    "monge_elkan",
    "exact",
];

/// Unit-cost edit distance over chars.
pub fn levenshtein(s1: &str, s2: &str) -> usize {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Distance divided by the longer length; two empty strings give 0.
pub fn levenshtein_distance_normalized(s1: &str, s2: &str) -> f64 {
    let max = s1.chars().count().max(s2.chars().count());
    if max == 0 {
        0.0
    } else {
        levenshtein(s1, s2) as f64 / max as f64
    }
}

pub fn levenshtein_similarity(s1: &str, s2: &str) -> f64 {
    1.0 - levenshtein_distance_normalized(s1, s2)
}

pub fn jaro(s1: &str, s2: &str) -> f64 {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let window = (a.len().max(b.len()) / 2).saturating_sub(1);
    let mut a_match = vec![false; a.len()];
    let mut b_match = vec![false; b.len()];
    let mut matches = 0usize;
    for (i, ca) in a.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let hi = (i + window + 1).min(b.len());
        for j in lo..hi {
            if !b_match[j] && b[j] == *ca {
                a_match[i] = true;
                b_match[j] = true;
                matches += 1;
                break;
            }
        }
    }
    if matches == 0 {
        return 0.0;
    }
    let a_seq = a.iter().zip(&a_match).filter(|(_, &m)| m).map(|(c, _)| c);
    let b_seq = b.iter().zip(&b_match).filter(|(_, &m)| m).map(|(c, _)| c);
    let transpositions = a_seq.zip(b_seq).filter(|(x, y)| x != y).count() / 2;
    let m = matches as f64;
    (m / a.len() as f64 + m / b.len() as f64 + (m - transpositions as f64) / m) / 3.0
}

/// Jaro-Winkler with prefix scale 0.1 over at most 4 shared prefix chars.
pub fn jaro_winkler(s1: &str, s2: &str) -> f64 {
    let j = jaro(s1, s2);
    let prefix = s1.chars().zip(s2.chars()).take(4).take_while(|(a, b)| a == b).count();
    j + prefix as f64 * 0.1 * (1.0 - j)
}

fn monge_elkan_directed<S: AsRef<str>>(t1: &[S], t2: &[S]) -> f64 {
    t1.iter()
        .map(|a| {
            t2.iter()
                .map(|b| jaro_winkler(a.as_ref(), b.as_ref()))
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / t1.len() as f64
}

/// Mean of both Monge-Elkan directions with Jaro-Winkler inside; 0 if
/// either side has no tokens.
pub fn monge_elkan<S: AsRef<str>>(t1: &[S], t2: &[S]) -> f64 {
    if t1.is_empty() || t2.is_empty() {
        return 0.0;
    }
    0.5 * (monge_elkan_directed(t1, t2) + monge_elkan_directed(t2, t1))
}

/// Cosine of token count vectors; 0 if either side is empty.
pub fn cosine_tokens<S: AsRef<str>>(t1: &[S], t2: &[S]) -> f64 {
    if t1.is_empty() || t2.is_empty() {
        return 0.0;
    }
    fn count<S: AsRef<str>>(t: &[S]) -> HashMap<&str, f64> {
        let mut m: HashMap<&str, f64> = HashMap::new();
        for s in t {
            *m.entry(s.as_ref()).or_default() += 1.0;
        }
        m
    }
    let (c1, c2) = (count(t1), count(t2));
    let dot: f64 = c1.iter().map(|(k, v)| v * c2.get(k).copied().unwrap_or(0.0)).sum();
    let sq = |c: &HashMap<&str, f64>| c.values().map(|v| v * v).sum::<f64>();
    // one sqrt keeps identical bags at exactly 1
    (dot / (sq(&c1) * sq(&c2)).sqrt()).min(1.0)
}

/// The six features of one attribute pair, in [`FEATURE_NAMES`] order.
pub fn attribute_features(v1: &str, v2: &str) -> [f64; 6] {
    let (a, b) = (v1.trim().to_lowercase(), v2.trim().to_lowercase());
    let cfg = TokenizerConfig::default();
    let (t1, t2) = (tokenize(&a, &cfg), tokenize(&b, &cfg));
    [
        qgram_jaccard(&a, &b, 3),
        cosine_tokens(&t1, &t2),
        levenshtein_distance_normalized(&a, &b),
        levenshtein_similarity(&a, &b),
        monge_elkan(&t1, &t2),
        if a == b { 1.0 } else { 0.0 },
    ]
}

/// Attribute-major concatenation of per-attribute features.
pub fn extract_features<S: AsRef<str>>(left: &[S], right: &[S]) -> Vec<f64> {
    assert_eq!(left.len(), right.len(), "records must share a schema");
    left.iter()
        .zip(right)
        .flat_map(|(a, b)| attribute_features(a.as_ref(), b.as_ref()))
        .collect()
}

pub fn extract_many(pairs: &[(Vec<String>, Vec<String>)]) -> Vec<Vec<f64>> {
    pairs.par_iter().map(|(l, r)| extract_features(l, r)).collect()
}

pub fn feature_names(schema: &[String]) -> Vec<String> {
    schema
        .iter()
        .flat_map(|a| FEATURE_NAMES.iter().map(move |f| format!("{a}.{f}")))
        .collect()
}

/// Writes `left_id,right_id,label,<attr.func>...`.
pub fn write_features_csv(
    path: &Path,
    schema: &[String],
    ids: &[(String, String)],
    labels: &[Option<bool>],
    features: &[Vec<f64>],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["left_id".to_string(), "right_id".into(), "label".into()];
    header.extend(feature_names(schema));
    w.write_record(&header)?;
    for ((id, label), f) in ids.iter().zip(labels).zip(features) {
        let mut row = vec![
            id.0.clone(),
            id.1.clone(),
            label.map(|l| u8::from(l).to_string()).unwrap_or_default(),
        ];
        row.extend(f.iter().map(|x| format!("{x:.6}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// A feature dump read back from [`write_features_csv`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureDump {
    pub names: Vec<String>,
    pub ids: Vec<(String, String)>,
    pub labels: Vec<Option<bool>>,
    pub features: Vec<Vec<f64>>,
}

pub fn read_features_csv(path: &Path) -> Result<FeatureDump> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "left_id" || &header[1] != "right_id" || &header[2] != "label" {
        return Err(BaselineError::Format("header must start with left_id,right_id,label".into()));
    }
    let mut dump = FeatureDump {
        names: header.iter().skip(3).map(String::from).collect(),
        ..FeatureDump::default()
    };
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let label = match &row[2] {
            "" => None,
            "1" => Some(true),
            "0" => Some(false),
            other => return Err(BaselineError::Format(format!("row {}: bad label `{other}`", line + 1))),
        };
        let features = row
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| BaselineError::Format(format!("row {}: {e}", line + 1)))?;
        dump.ids.push((row[0].to_string(), row[1].to_string()));
        dump.labels.push(label);
        dump.features.push(features);
    }
    Ok(dump)
}

fn check_training(features: &[Vec<f64>], labels: &[bool]) -> Result<usize> {
    assert_eq!(features.len(), labels.len());
    let Some(first) = features.first() else {
        return Err(BaselineError::Empty);
    };
    let dim = first.len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(BaselineError::Dimension {
            expected: dim,
            found: bad.len(),
        });
    }
    Ok(dim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogReg {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogReg {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        crate::autodiff::sigmoid(z)
    }

    /// Mean logistic loss.
    pub fn loss(&self, features: &[Vec<f64>], labels: &[bool]) -> f64 {
        features
            .iter()
            .zip(labels)
            .map(|(x, &y)| {
                let p = self.predict(x).clamp(1e-15, 1.0 - 1e-15);
                if y {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / features.len() as f64
    }

    /// Full-batch gradient descent from zero weights.
    pub fn train(features: &[Vec<f64>], labels: &[bool], lr: f64, epochs: usize) -> Result<Self> {
        let dim = check_training(features, labels)?;
        let pos = labels.iter().filter(|&&l| l).count();
        if pos == 0 || pos == labels.len() {
            warn!("logistic regression trained on a single class");
        }
        let mut m = Self::zeros(dim);
        let n = features.len() as f64;
        for _ in 0..epochs {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, &y) in features.iter().zip(labels) {
                let err = m.predict(x) - f64::from(u8::from(y));
                for (g, v) in gw.iter_mut().zip(x) {
                    *g += err * v;
                }
                gb += err;
            }
            for (w, g) in m.weights.iter_mut().zip(&gw) {
                *w -= lr * g / n;
            }
            m.bias -= lr * gb / n;
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianNb {
    /// Indexed by class: 0 = non-match, 1 = match.
    pub priors: [f64; 2],
    pub means: [Vec<f64>; 2],
    pub variances: [Vec<f64>; 2],
}

pub const GNB_VARIANCE_FLOOR: f64 = 1e-9;

impl GaussianNb {
    /// Maximum-likelihood moments per class, variances floored.
    pub fn train(features: &[Vec<f64>], labels: &[bool]) -> Result<Self> {
        let dim = check_training(features, labels)?;
        let mut means = [vec![0.0; dim], vec![0.0; dim]];
        let mut variances = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for (x, &y) in features.iter().zip(labels) {
            let c = usize::from(y);
            counts[c] += 1;
            for (m, v) in means[c].iter_mut().zip(x) {
                *m += v;
            }
        }
        if counts.contains(&0) {
            return Err(BaselineError::SingleClass);
        }
        for c in 0..2 {
            for m in &mut means[c] {
                *m /= counts[c] as f64;
            }
        }
        for (x, &y) in features.iter().zip(labels) {
            let c = usize::from(y);
            for ((var, m), v) in variances[c].iter_mut().zip(&means[c]).zip(x) {
                *var += (v - m) * (v - m);
            }
        }
        for c in 0..2 {
            for var in &mut variances[c] {
                *var = (*var / counts[c] as f64).max(GNB_VARIANCE_FLOOR);
            }
        }
        let n = features.len() as f64;
        Ok(Self {
            priors: [counts[0] as f64 / n, counts[1] as f64 / n],
            means,
            variances,
        })
    }

    /// Posterior p(match | x).
    pub fn predict(&self, x: &[f64]) -> f64 {
        let log_joint = |c: usize| -> f64 {
            self.priors[c].ln()
                + x.iter()
                    .zip(&self.means[c])
                    .zip(&self.variances[c])
                    .map(|((v, m), var)| {
                        -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (v - m) * (v - m) / (2.0 * var)
                    })
                    .sum::<f64>()
        };
        let (l0, l1) = (log_joint(0), log_joint(1));
        crate::autodiff::softmax(&[l0, l1])[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn feature_dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let schema = vec!["title".to_string()];
        let ids = vec![("a".to_string(), "b".to_string()), ("c".into(), "d".into())];
        let features = vec![extract_features(&["kitten"], &["sitting"]), extract_features(&["x"], &["x"])];
        write_features_csv(&path, &schema, &ids, &[Some(true), None], &features).unwrap();
        let dump = read_features_csv(&path).unwrap();
        assert_eq!(dump.names, feature_names(&schema));
        assert_eq!(dump.ids, ids);
        assert_eq!(dump.labels, vec![Some(true), None]);
        for (a, b) in dump.features.iter().flatten().zip(features.iter().flatten()) {
            assert!((a - b).abs() <= 5e-7);
        }
    }

    fn lev_oracle(a: &str, b: &str) -> usize {
        // full-matrix DP, independent of the two-row version
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = usize::from(a[i - 1] != b[j - 1]);
                d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + c);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("same", "same"), 0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert!((levenshtein_similarity("kitten", "sitting") - (1.0 - 3.0 / 7.0)).abs() < 1e-12);
        assert_eq!(levenshtein_similarity("", ""), 1.0);
        assert_eq!(levenshtein_similarity("abc", "xyz"), 0.0);
    }

    proptest! {
        #[test]
        fn levenshtein_matches_oracle(a in "[a-d]{0,9}", b in "[a-d]{0,9}", c in "[a-d]{0,9}") {
            prop_assert_eq!(levenshtein(&a, &b), lev_oracle(&a, &b));
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }

        #[test]
        fn features_bounded_and_symmetric(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
            let f = attribute_features(&a, &b);
            let g = attribute_features(&b, &a);
            for (x, y) in f.iter().zip(&g) {
                prop_assert!((0.0..=1.0).contains(x));
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!(f[5] == 0.0 || f[5] == 1.0);
        }

        #[test]
        fn monge_elkan_is_mean_of_directions(
            a in prop::collection::vec("[a-c]{1,4}", 1..4),
            b in prop::collection::vec("[a-c]{1,4}", 1..4),
        ) {
            let expect = 0.5 * (monge_elkan_directed(&a, &b) + monge_elkan_directed(&b, &a));
            prop_assert!((monge_elkan(&a, &b) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn jaro_winkler_reference_values() {
        // textbook values
        assert!((jaro("martha", "marhta") - 0.944_444).abs() < 1e-6);
        assert!((jaro_winkler("martha", "marhta") - 0.961_111).abs() < 1e-6);
        assert!((jaro_winkler("dwayne", "duane") - 0.84).abs() < 1e-6);
        assert!((jaro("dixon", "dicksonx") - 0.766_667).abs() < 1e-6);
        assert!((jaro_winkler("dixon", "dicksonx") - 0.813_333).abs() < 1e-6);
    }

    #[test]
    fn monge_elkan_and_cosine_examples() {
        assert_eq!(monge_elkan(&["ab"], &["ab", "xy"]), monge_elkan(&["ab", "xy"], &["ab"]));
        assert_eq!(monge_elkan_directed(&["ab"], &["ab", "xy"]), 1.0);
        assert_eq!(monge_elkan(&["a", "b"], &["a", "b"]), 1.0);
        assert_eq!(monge_elkan::<&str>(&[], &["a"]), 0.0);
        assert!((cosine_tokens(&["a", "b"], &["a", "c"]) - 0.5).abs() < 1e-12);
        assert_eq!(cosine_tokens(&["a"], &["b"]), 0.0);
        assert!((cosine_tokens(&["a", "b"], &["b", "a"]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn null_conventions() {
        assert_eq!(attribute_features("", ""), [1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(attribute_features("", "acm"), [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let same = attribute_features("Deep ER", "deep er");
        assert_eq!(same, [1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn feature_layout() {
        let l = ["a", "b", "c", "d"];
        assert_eq!(extract_features(&l, &l).len(), 24);
        let names = feature_names(&["title".into(), "year".into()]);
        assert_eq!(names[0], "title.qgram_jaccard");
        assert_eq!(names[11], "year.exact");
    }

    #[test]
    fn logreg_zero_and_separable() {
        assert_eq!(LogReg::zeros(3).predict(&[1.0, -2.0, 5.0]), 0.5);
        let xs = vec![vec![0.9, 0.8], vec![0.8, 0.95], vec![0.1, 0.2], vec![0.2, 0.05]];
        let ys = vec![true, true, false, false];
        let m = LogReg::train(&xs, &ys, 1.0, 500).unwrap();
        for (x, &y) in xs.iter().zip(&ys) {
            assert_eq!(m.predict(x) >= 0.5, y);
        }
        let mut last = f64::INFINITY;
        for e in [1, 5, 20, 100] {
            let l = LogReg::train(&xs, &ys, 0.1, e).unwrap().loss(&xs, &ys);
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn gnb_moments() {
        let xs = vec![vec![1.0, 0.0], vec![3.0, 0.0], vec![0.0, 2.0], vec![0.0, 4.0]];
        let ys = vec![true, true, false, false];
        let m = GaussianNb::train(&xs, &ys).unwrap();
        assert_eq!(m.priors, [0.5, 0.5]);
        assert_eq!(m.means[1], vec![2.0, 0.0]);
        assert_eq!(m.means[0], vec![0.0, 3.0]);
        assert_eq!(m.variances[1], vec![1.0, GNB_VARIANCE_FLOOR]);
        assert_eq!(m.variances[0], vec![GNB_VARIANCE_FLOOR, 1.0]);
        assert!(m.predict(&[2.0, 0.0]) > 0.99);
        assert!(m.predict(&[0.0, 3.0]) < 0.01);
        assert!(matches!(GaussianNb::train(&xs, &[true; 4]), Err(BaselineError::SingleClass)));
        assert!(matches!(GaussianNb::train(&[], &[]), Err(BaselineError::Empty)));
    }
}
