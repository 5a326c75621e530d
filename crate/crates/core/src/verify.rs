//! Independent reference computations used to validate the fast paths:
//! exhaustive CRF path enumeration and a finite-difference gradient suite
//! over every layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, AttentionParams};
use crate::autodiff::{Graph, Var};
use crate::crf::{nll_graph, CrfParams};
use crate::embeddings::{self, Vocabulary};
use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheckReport};
use crate::model::{derived_rng, Model, ModelConfig, Variant};
use crate::recurrent::{bilstm_encode, lstm_forward, LstmParams, LstmVars};
use crate::tags::{SchemeKind, TagScheme};
use crate::tensor::Tensor;

/// All `k^n` tag paths in lexicographic order.
pub fn all_paths(k: usize, n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(k.pow(n as u32));
    let mut path = vec![0; n];
    loop {
        out.push(path.clone());
        let mut t = n;
        loop {
            if t == 0 {
                return out;
            }
            t -= 1;
            path[t] += 1;
            if path[t] < k {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Path score summed term by term from the transition table.
pub fn path_score(crf: &CrfParams, emissions: &Tensor, path: &[usize]) -> f64 {
    let k = crf.num_tags();
    let mut s = crf.transition(k, path[0]) + crf.transition(path[path.len() - 1], k + 1);
    for (t, &y) in path.iter().enumerate() {
        s += emissions.get(t, y);
        if t > 0 {
            s += crf.transition(path[t - 1], y);
        }
    }
    s
}

#[derive(Clone, Debug)]
pub struct Enumerated {
    pub log_partition: f64,
    /// Highest-scoring path. Among exact ties the one with the smallest
    /// last tag wins, then the smallest tag before it, and so on.
    pub best_path: Vec<usize>,
    pub best_score: f64,
}

pub fn enumerate_crf(crf: &CrfParams, emissions: &Tensor) -> Enumerated {
    let paths = all_paths(crf.num_tags(), emissions.rows());
    let scores: Vec<f64> = paths.iter().map(|p| path_score(crf, emissions, p)).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_partition = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    let best = (0..paths.len())
        .filter(|&i| scores[i] == max)
        .min_by(|&a, &b| paths[a].iter().rev().cmp(paths[b].iter().rev()))
        .expect("at least one path");
    Enumerated {
        log_partition,
        best_path: paths[best].clone(),
        best_score: max,
    }
}

/// A random CRF instance. With `integer` set, scores are drawn from
/// `{-1, 0, 1}` so that exact ties are common.
pub fn random_crf_instance(rng: &mut ChaCha8Rng, n: usize, k: usize, integer: bool) -> (CrfParams, Tensor) {
    let draw = |rng: &mut ChaCha8Rng| {
        if integer {
            rng.random_range(-1i32..=1) as f64
        } else {
            rng.random_range(-3.0..3.0)
        }
    };
    let transitions = Tensor::matrix(k + 2, k + 2, (0..(k + 2) * (k + 2)).map(|_| draw(rng)).collect())
        .expect("shape matches data");
    let emissions = Tensor::matrix(n, k, (0..n * k).map(|_| draw(rng)).collect()).expect("shape matches data");
    (CrfParams::new(k, transitions).expect("square transitions"), emissions)
}

#[derive(Clone, Debug)]
pub struct CrfCheck {
    pub n: usize,
    pub k: usize,
    pub log_partition_error: f64,
    pub viterbi_matches: bool,
    pub probability_sum_error: f64,
}

impl CrfCheck {
    pub fn passes(&self) -> bool {
        self.log_partition_error <= 1e-8 && self.viterbi_matches && self.probability_sum_error <= 1e-10
    }
}

/// Compares forward, Viterbi and path probabilities against enumeration.
pub fn check_crf(crf: &CrfParams, emissions: &Tensor) -> Result<CrfCheck> {
    let n = emissions.rows();
    let mask = vec![true; n];
    let reference = enumerate_crf(crf, emissions);
    let log_z = crf.log_partition(emissions, &mask)?;
    let (path, _) = crf.viterbi(emissions, &mask)?;
    let mut total = 0.0;
    for p in all_paths(crf.num_tags(), n) {
        total += crf.sequence_probability(emissions, &p, &mask)?;
    }
    Ok(CrfCheck {
        n,
        k: crf.num_tags(),
        log_partition_error: (log_z - reference.log_partition).abs(),
        viterbi_matches: path == reference.best_path,
        probability_sum_error: (total - 1.0).abs(),
    })
}

/// Runs `count` random instances with `n` in `1..=5` and `K` in `2..=5`;
/// every fifth uses integer scores.
pub fn crf_oracle_sweep(count: usize, seed: u64) -> Result<Vec<CrfCheck>> {
    let mut rng = derived_rng(&[seed, 0xC4F]);
    (0..count)
        .map(|i| {
            let n = rng.random_range(1..=5);
            let k = rng.random_range(2..=5);
            let (crf, e) = random_crf_instance(&mut rng, n, k, i % 5 == 4);
            check_crf(&crf, &e)
        })
        .collect()
}

pub const GRADIENT_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-5;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

/// Reduces `x` to a scalar through a fixed random projection so that
/// every output element carries a distinct weight.
fn project(g: &mut Graph, x: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let m = g.mul(x, w)?;
    g.sum(m)
}

fn lstm_inputs(p: &LstmParams) -> [Tensor; 3] {
    [p.w_ih.clone(), p.w_hh.clone(), p.bias.clone()]
}

fn lstm_vars(v: &[Var]) -> LstmVars {
    LstmVars {
        w_ih: v[0],
        w_hh: v[1],
        bias: v[2],
    }
}

/// Finite-difference check of every layer and of each full model
/// variant on a four-token input. Returns `(layer, report)` pairs.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = derived_rng(&[seed, 0x6AD]);
    let mut out = Vec::new();
    let (n, d, h, a) = (4, 3, 3, 4);

    let table = random_matrix(&mut rng, 6, d);
    let ids = [2usize, 5, 2, 3];
    let w = random_matrix(&mut rng, n, d);
    out.push((
        "embedding".to_string(),
        check_gradients(&[table], EPS, |g, v| {
            let x = embeddings::lookup(g, v[0], &ids)?;
            project(g, x, &w)
        })?,
    ));

    let x = random_matrix(&mut rng, n, d);
    let p = LstmParams::init(d, h, &mut rng);
    let w = random_matrix(&mut rng, n, h);
    let mut inputs = vec![x.clone()];
    inputs.extend(lstm_inputs(&p));
    out.push((
        "lstm".to_string(),
        check_gradients(&inputs, EPS, |g, v| {
            let y = lstm_forward(g, &lstm_vars(&v[1..4]), v[0], &[true; 4])?;
            project(g, y, &w)
        })?,
    ));

    let q = LstmParams::init(d, h, &mut rng);
    inputs.extend(lstm_inputs(&q));
    let w = random_matrix(&mut rng, n, 2 * h);
    for sigmoid in [false, true] {
        let name = if sigmoid { "bilstm+sigmoid" } else { "bilstm" };
        out.push((
            name.to_string(),
            check_gradients(&inputs, EPS, |g, v| {
                let y = bilstm_encode(g, &lstm_vars(&v[1..4]), &lstm_vars(&v[4..7]), v[0], &[true; 4], sigmoid)?;
                project(g, y, &w)
            })?,
        ));
    }

    let hidden = random_matrix(&mut rng, n, 2 * h);
    let ap = AttentionParams::init(2 * h, a, &mut rng);
    let w_l = random_matrix(&mut rng, n, 2 * h);
    let w_a = random_matrix(&mut rng, n, n);
    let inputs = [hidden, ap.w_g, ap.w_g2, ap.b_g, ap.w_a, ap.b_a];
    out.push((
        "attention".to_string(),
        check_gradients(&inputs, EPS, |g, v| {
            let av = crate::attention::AttentionVars {
                w_g: v[1],
                w_g2: v[2],
                b_g: v[3],
                w_a: v[4],
                b_a: v[5],
            };
            let (attn, l) = attend(g, &av, v[0], &[true; 4])?;
            let s1 = project(g, l, &w_l)?;
            let s2 = project(g, attn, &w_a)?;
            g.add(s1, s2)
        })?,
    ));

    let k = 5;
    let e = random_matrix(&mut rng, n, k);
    let t = random_matrix(&mut rng, k + 2, k + 2);
    let tags: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    out.push((
        "crf-nll".to_string(),
        check_gradients(&[e, t], EPS, |g, v| nll_graph(g, v[0], v[1], &tags, &[true; 4], None))?,
    ));

    let scheme = TagScheme::single(SchemeKind::Bioe, "flavor");
    let tokens = ["duck", "and", "lamb", "food"];
    let vocab = Vocabulary::build(&[tokens.to_vec()], 1, true)?;
    let gold = scheme.parse_tags(&["B", "I", "E", "O"]).expect("valid tags");
    let variants = [
        ("opentag", Variant::Opentag, false, true),
        ("opentag-concat", Variant::Opentag, true, false),
        ("bilstm-crf", Variant::BilstmCrf, false, true),
        ("bilstm", Variant::Bilstm, false, true),
    ];
    for (name, variant, concat, sigmoid) in variants {
        let config = ModelConfig {
            variant,
            embed_dim: 3,
            hidden: 2,
            attention_dim: 3,
            attention_concat_variant: concat,
            bilstm_sigmoid_concat: sigmoid,
            seed,
            ..ModelConfig::default()
        };
        let mut model = Model::new(config, scheme.clone(), vocab.clone())?;
        // nonzero transitions so their gradient is exercised away from the origin
        if let Some(i) = model.params().index_of("crf.transitions") {
            let shape = model.params().value(i).shape().to_vec();
            *model.params_mut().value_mut(i) = random_matrix(&mut rng, shape[0], shape[1]);
        }
        let ids = model.encode_tokens(&tokens);
        let inputs: Vec<Tensor> = (0..model.params().len()).map(|i| model.params().value(i).clone()).collect();
        out.push((
            name.to_string(),
            check_gradients(&inputs, EPS, |g, v| model.loss(g, v, &ids, &gold, None))?,
        ));
    }
    Ok(out)
}
