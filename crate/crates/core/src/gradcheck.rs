//! Central finite-difference checks of tape gradients, per op and per
//! composed model layer, plus the gradient reversal negation check.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::embed::{EmbeddingStore, NgramHashConfig, TokenizerConfig};
use crate::model::{Bound, Direction, EncodedPair, ErModel, ModelConfig, ModelError, PairText};

#[derive(Debug, Error)]
pub enum GradcheckError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, GradcheckError>;

/// Step of the fourth-order central difference.
pub const FD_STEP: f64 = 1e-4;
/// Disagreement between the two second-order estimates that marks a
/// stencil crossing a non-differentiable point.
const KINK_TOLERANCE: f64 = 1e-3;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;
/// Coordinates checked per parameter, sampled when a parameter is larger.
const MAX_COORDS: usize = 24;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub coords: usize,
    /// Coordinates skipped because the stencil straddles a relu or abs kink
    /// at both step sizes.
    pub kinks: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.max_rel_err)
    }

    pub fn coords(&self) -> usize {
        self.cases.iter().map(|c| c.coords).sum()
    }

    pub fn kinks(&self) -> usize {
        self.cases.iter().map(|c| c.kinks).sum()
    }

    /// Distinct case names with the case count of each.
    pub fn kinds(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|(n, _)| *n == c.name) {
                Some(e) => e.1 += 1,
                None => out.push((c.name.clone(), 1)),
            }
        }
        out
    }
}

/// Compares analytic gradients of `loss(store)` against `sign(param)` times
/// five-point central differences for every trainable parameter. The sign is -lambda
/// for parameters upstream of a gradient reversal, whose forward pass is
/// the identity.
pub fn check_fn(
    name: &str,
    store: &ParamStore,
    sign: &dyn Fn(ParamId) -> f64,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&ParamStore) -> Result<(f64, Gradients)>,
) -> Result<CaseResult> {
    let (_, grads) = loss(store)?;
    let mut perturbed = store.clone();
    let mut coords = 0;
    let mut kinks = 0;
    let mut worst: f64 = 0.0;
    for (id, param) in store.iter() {
        let Some(g) = grads.get(id) else { continue };
        let sign = sign(id);
        let n = param.value.len();
        let picks: Vec<usize> = if n <= MAX_COORDS {
            (0..n).collect()
        } else {
            (0..MAX_COORDS).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in picks {
            let orig = param.value.data()[i];
            let mut numeric = None;
            for step in [FD_STEP, FD_STEP / 100.0] {
                let mut at = |offset: f64| -> Result<f64> {
                    perturbed.get_mut(id).value.data_mut()[i] = orig + offset * step;
                    Ok(loss(&perturbed)?.0)
                };
                let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
                let (near, far) = ((p1 - m1) / (2.0 * step), (p2 - m2) / (4.0 * step));
                if relative_error(near, far) <= KINK_TOLERANCE {
                    numeric = Some((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step));
                    break;
                }
            }
            perturbed.get_mut(id).value.data_mut()[i] = orig;
            let Some(numeric) = numeric else {
                kinks += 1;
                continue;
            };
            worst = worst.max(relative_error(g.data()[i], sign * numeric));
            coords += 1;
        }
    }
    Ok(CaseResult {
        name: name.to_string(),
        coords,
        kinks,
        max_rel_err: worst,
    })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.5..1.5);
            if away_from_zero && v.abs() < 0.1 {
                v.signum() * 0.1 + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Reduces any tensor to a scalar with fixed random weights so every output
/// coordinate contributes.
fn project(tape: &mut Tape<'_>, v: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let flat = match shape.len() {
        0 => return Ok(v),
        1 => v,
        _ => {
            let rows = (0..shape[0])
                .map(|r| tape.gather_row(v, r))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            tape.concat(&rows)?
        }
    };
    let n = tape.value(flat).len();
    let w = tape.constant(Tensor::matrix(1, n, weights[..n].to_vec())?)?;
    Ok(tape.matmul(w, flat)?)
}

type OpBuilder = fn(&mut Tape<'_>, &[Var], &[usize]) -> std::result::Result<Var, AutodiffError>;

struct OpCase {
    name: &'static str,
    /// Input shapes given a random (rows, cols) pair.
    shapes: fn(usize, usize) -> Vec<Vec<usize>>,
    build: OpBuilder,
    /// Inputs kept away from kinks of relu and abs.
    away_from_zero: bool,
    sign: f64,
}

const REVERSAL_LAMBDA: f64 = 0.7;

fn op_cases() -> Vec<OpCase> {
    let vec2 = |_: usize, c: usize| vec![vec![c], vec![c]];
    let vec1 = |_: usize, c: usize| vec![vec![c]];
    vec![
        OpCase {
            name: "matmul_vector",
            shapes: |r, c| vec![vec![r, c], vec![c]],
            build: |t, v, _| t.matmul(v[0], v[1]),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "matmul_matrix",
            shapes: |r, c| vec![vec![r, c], vec![c, r]],
            build: |t, v, _| t.matmul(v[0], v[1]),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "add",
            shapes: vec2,
            build: |t, v, _| t.add(v[0], v[1]),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "sub",
            shapes: vec2,
            build: |t, v, _| t.sub(v[0], v[1]),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "mul",
            shapes: vec2,
            build: |t, v, _| t.mul(v[0], v[1]),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "abs_diff",
            shapes: vec2,
            // Second operand is shifted so no coordinate sits on the kink.
            build: |t, v, _| {
                let shifted = t.scale(v[1], 0.5)?;
                t.abs_diff(v[0], shifted)
            },
            away_from_zero: true,
            sign: 1.0,
        },
        OpCase {
            name: "sigmoid",
            shapes: vec1,
            build: |t, v, _| t.sigmoid(v[0]),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "tanh",
            shapes: vec1,
            build: |t, v, _| t.tanh(v[0]),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "relu",
            shapes: vec1,
            build: |t, v, _| t.relu(v[0]),
            away_from_zero: true,
            sign: 1.0,
        },
        OpCase {
            name: "one_minus",
            shapes: vec1,
            build: |t, v, _| t.one_minus(v[0]),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "scale",
            shapes: vec1,
            build: |t, v, _| t.scale(v[0], -1.7),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "grad_reverse",
            shapes: vec1,
            build: |t, v, _| {
                let s = t.tanh(v[0])?;
                t.grad_reverse(s, REVERSAL_LAMBDA)
            },
            away_from_zero: false,
            sign: -REVERSAL_LAMBDA,
        },
        OpCase {
            name: "concat",
            shapes: |r, c| vec![vec![r], vec![c], vec![1]],
            build: |t, v, _| t.concat(v),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "sum",
            shapes: |_, c| vec![vec![c], vec![c], vec![c]],
            build: |t, v, _| t.sum(v),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "mean",
            shapes: |_, c| vec![vec![c], vec![c], vec![c]],
            build: |t, v, _| t.mean(v),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "gather_row",
            shapes: |r, c| vec![vec![r, c]],
            build: |t, v, extra| t.gather_row(v[0], extra[0]),
            away_from_zero: false,
            sign: 1.0,
        },
        OpCase {
            name: "softmax_nll",
            shapes: |_, c| vec![vec![c + 1]],
            build: |t, v, extra| t.softmax_nll(v[0], extra[1]),
            away_from_zero: false,
            sign: 1.0,
        },
    ]
}

fn check_op(case: &OpCase, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    let (r, c) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
    let extra = [rng.gen_range(0..r), rng.gen_range(0..=c)];
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = (case.shapes)(r, c)
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("x{i}"), random_tensor(rng, s, case.away_from_zero), true))
        .collect();
    let weights: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let build = case.build;
    let loss = |s: &ParamStore| -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
        let out = build(&mut tape, &vars, &extra)?;
        let l = project(&mut tape, out, &weights)?;
        Ok((tape.value(l)[0], tape.backward(l, s)?))
    };
    let sign = case.sign;
    check_fn(case.name, &store.clone(), &|_| sign, rng, loss)
}

const WORDS: &[&str] = &[
    "deep", "entity", "resolution", "transfer", "active", "learning", "graph", "query", "index", "vldb", "sigmod",
    "smith", "chen", "garcia", "2001", "1998", "stream", "join",
];

fn random_value(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=3);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// A toy model whose every parameter, biases included, is random and
/// trainable, with a few encoded pairs whose attributes differ.
pub fn toy_model(seed: u64, datasets: usize) -> Result<(ErModel, Vec<EncodedPair>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        datasets: (0..datasets).map(|i| format!("d{i}")).collect(),
        fine_tune_embeddings: true,
        mlp_layers: rng.gen_range(1..=2),
        seed,
        ..ModelConfig::toy()
    };
    let store = Arc::new(EmbeddingStore::hashed_only(
        cfg.embedding_dim,
        NgramHashConfig::default(),
    ));
    let mut model = ErModel::new(cfg, TokenizerConfig::default(), store)?;
    let arity = rng.gen_range(1..=3);
    let texts: Vec<PairText> = (0..3)
        .map(|_| {
            let mut left = Vec::new();
            let mut right = Vec::new();
            for _ in 0..arity {
                let l = random_value(&mut rng);
                let mut r = random_value(&mut rng);
                while r == l {
                    r = random_value(&mut rng);
                }
                left.push(l);
                right.push(r);
            }
            PairText { left, right }
        })
        .collect();
    let pairs = model.encode_pairs(&texts);
    let ids: Vec<ParamId> = model.params().iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = model.params_mut().get_mut(id);
        let scale = if p.name == "embedding" { 1.0 } else { 0.6 };
        for v in p.value.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
    Ok((model, pairs))
}

type LayerLoss = fn(&ErModel, &mut Tape<'_>, &Bound, &EncodedPair, &mut ChaCha8Rng) -> Result<Var>;

fn layer_cases() -> Vec<(&'static str, LayerLoss, f64)> {
    vec![
        ("gru_cell", |m, t, b, _, rng| {
            let h = m.config().hidden;
            let x = t.constant(random_tensor(rng, &[m.config().embedding_dim], false))?;
            let h0 = t.constant(random_tensor(rng, &[h], false))?;
            let h1 = m.gru_cell(t, b, Direction::Forward, x, h0)?;
            let h2 = m.gru_cell(t, b, Direction::Backward, x, h1)?;
            Ok(h2)
        }, 1.0),
        ("highway_mlp", |m, t, b, _, rng| {
            let x = t.constant(random_tensor(rng, &[m.config().width()], false))?;
            Ok(m.matching_logits(t, b, x)?)
        }, 1.0),
        ("attribute_encoder", |m, t, b, p, _| Ok(m.encode_attribute(t, b, &p.left[0])?), 1.0),
        ("abs_diff_sum_similarity", |m, t, b, p, _| Ok(m.similarity(t, b, p)?.record), 1.0),
        ("matching_softmax_nll", |m, t, b, p, _| Ok(m.match_loss(t, b, p, true)?.0), 1.0),
        ("dataset_softmax_nll", |m, t, b, p, _| {
            let s = m.similarity(t, b, p)?;
            let logits = m.dataset_logits(t, b, s.record, false)?;
            Ok(t.softmax_nll(logits, 1)?)
        }, 1.0),
        ("reversed_dataset_softmax_nll", |m, t, b, p, _| {
            let s = m.similarity(t, b, p)?;
            let logits = m.dataset_logits(t, b, s.record, true)?;
            Ok(t.softmax_nll(logits, 0)?)
        }, -1.0),
    ]
}

fn check_layer(name: &str, build: LayerLoss, sign: f64, seed: u64) -> Result<CaseResult> {
    let (model, pairs) = toy_model(seed, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let pair = pairs[rng.gen_range(0..pairs.len())].clone();
    let weights: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let input_seed: u64 = rng.gen();
    let loss = |s: &ParamStore| -> Result<(f64, Gradients)> {
        let mut m = model.clone();
        m.restore(s);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let mut inputs = ChaCha8Rng::seed_from_u64(input_seed);
        let out = build(&m, &mut tape, &b, &pair, &mut inputs)?;
        let l = project(&mut tape, out, &weights)?;
        Ok((tape.value(l)[0], tape.backward(l, m.params())?))
    };
    let mut upstream = model.ids().gru.all();
    upstream.push(model.ids().embedding);
    let param_sign = |id: ParamId| if upstream.contains(&id) { sign } else { 1.0 };
    check_fn(name, model.params(), &param_sign, &mut rng, loss)
}

/// Every op kind and composed layer, `per_kind` random cases each.
pub fn run(seed: u64, per_kind: usize) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport::default();
    for case in op_cases() {
        for _ in 0..per_kind {
            report.cases.push(check_op(&case, &mut rng)?);
        }
    }
    for (name, build, sign) in layer_cases() {
        for _ in 0..per_kind {
            report.cases.push(check_layer(name, build, sign, rng.gen())?);
        }
    }
    Ok(report)
}

/// Largest |g_rev + lambda * g_plain| over encoder parameters of the dataset
/// loss, across `models` random models with lambda = 1.
pub fn reversal_deviation(seed: u64, models: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..models {
        let (mut model, pairs) = toy_model(rng.gen(), rng.gen_range(2..=3))?;
        model.set_reversal_lambda(1.0);
        let target = rng.gen_range(0..model.config().dataset_classes());
        let grads = |reverse: bool| -> Result<Gradients> {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let mut losses = Vec::new();
            for p in &pairs {
                let s = model.similarity(&mut tape, &b, p)?;
                let logits = model.dataset_logits(&mut tape, &b, s.record, reverse)?;
                losses.push(tape.softmax_nll(logits, target)?);
            }
            let l = tape.mean(&losses)?;
            Ok(tape.backward(l, model.params())?)
        };
        let (rev, plain) = (grads(true)?, grads(false)?);
        let mut encoder = model.ids().gru.all();
        encoder.push(model.ids().embedding);
        for id in encoder {
            let (a, b) = (rev.get(id).expect("trainable"), plain.get(id).expect("trainable"));
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x + y).abs());
            }
        }
    }
    Ok(worst)
}
