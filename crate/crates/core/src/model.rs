//! The three tagger variants, their training loop, prediction and
//! checkpointing.
//!
//! * `bilstm`: per-token softmax over `h_t W + b`, trained with token
//!   cross-entropy.
//! * `bilstm-crf`: emissions from `tanh(h_t W_d + b_d) W + b` into a CRF.
//! * `opentag`: emissions from the attention-focused `l_t` (or
//!   `[h_t ; l_t]`) into a CRF.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionMatrix, AttentionParams, AttentionVars};
use crate::autodiff::{Graph, Var};
use crate::corpus::{tokenize, TaggedSequence};
use crate::crf::{nll_graph, CrfParams};
use crate::embeddings::{self, EmbeddingTable, Vocabulary, PAD, UNK};
use crate::error::{Error, Result};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::params::{checkpoint_bytes, parse_checkpoint, ParamStore};
use crate::recurrent::{bilstm_encode, xavier, LstmParams, LstmVars};
use crate::tags::{evaluate, Evaluation, ExtractionResult, SchemeKind, TagScheme};
use crate::tensor::Tensor;

pub const MODEL_FORMAT: &str = "avtag.model/1";
pub const METRICS_FORMAT: &str = "avtag.metrics/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Bilstm,
    BilstmCrf,
    Opentag,
}

impl Variant {
    pub fn uses_crf(self) -> bool {
        !matches!(self, Variant::Bilstm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Bilstm => "bilstm",
            Variant::BilstmCrf => "bilstm-crf",
            Variant::Opentag => "opentag",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(Variant::Bilstm),
            "bilstm-crf" => Ok(Variant::BilstmCrf),
            "opentag" => Ok(Variant::Opentag),
            other => Err(Error::Config(format!("unknown model variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub hidden: usize,
    pub attention_dim: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub last_k_average: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub scheme: SchemeKind,
    /// Elementwise sigmoid over the concatenated BiLSTM states.
    pub bilstm_sigmoid_concat: bool,
    /// Feed `[h_t ; l_t]` to the emission layer instead of `l_t`.
    pub attention_concat_variant: bool,
    /// Forbid transitions that no well-formed tag sequence takes.
    pub crf_hard_constraints: bool,
    pub min_count: usize,
    /// Global gradient-norm clip per batch; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Probability of replacing a training token by the unknown token.
    pub word_dropout: f64,
    pub pretrained: Option<PathBuf>,
    /// Only evaluate during the last `last_k_average` epochs.
    pub eval_window_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Opentag,
            embed_dim: 100,
            hidden: 100,
            attention_dim: 200,
            dropout: 0.4,
            batch_size: 32,
            epochs: 500,
            last_k_average: 20,
            seed: 0,
            learning_rate: 1e-3,
            scheme: SchemeKind::Bioe,
            bilstm_sigmoid_concat: true,
            attention_concat_variant: false,
            crf_hard_constraints: false,
            min_count: 1,
            clip_norm: Some(5.0),
            word_dropout: 0.0,
            pretrained: None,
            eval_window_only: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("attention_dim", self.attention_dim),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return Err(Error::Config(format!("word_dropout {} outside [0, 1)", self.word_dropout)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Parameter indices inside the store.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embedding: usize,
    fwd: [usize; 3],
    bwd: [usize; 3],
    attention: Option<[usize; 5]>,
    dense: Option<[usize; 2]>,
    output: [usize; 2],
    transitions: Option<usize>,
}

impl Layout {
    fn resolve(params: &ParamStore, variant: Variant) -> Result<Self> {
        let idx = |name: &str| {
            params
                .index_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))
        };
        let lstm = |dir: &str| -> Result<[usize; 3]> {
            Ok([
                idx(&format!("lstm.{dir}.w_ih"))?,
                idx(&format!("lstm.{dir}.w_hh"))?,
                idx(&format!("lstm.{dir}.bias"))?,
            ])
        };
        let attention = if variant == Variant::Opentag {
            Some([
                idx("attention.w_g")?,
                idx("attention.w_g2")?,
                idx("attention.b_g")?,
                idx("attention.w_a")?,
                idx("attention.b_a")?,
            ])
        } else {
            None
        };
        let dense = if variant == Variant::BilstmCrf {
            Some([idx("dense.w")?, idx("dense.b")?])
        } else {
            None
        };
        Ok(Layout {
            embedding: idx("embedding")?,
            fwd: lstm("fwd")?,
            bwd: lstm("bwd")?,
            attention,
            dense,
            output: [idx("output.w")?, idx("output.b")?],
            transitions: if variant.uses_crf() { Some(idx("crf.transitions")?) } else { None },
        })
    }
}

/// A tagger: configuration, vocabulary, tag scheme and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub scheme: TagScheme,
    pub vocab: Vocabulary,
    params: ParamStore,
    layout: Layout,
}

/// Graph outputs for one sample.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `n x K`: logits for `bilstm`, emissions for the CRF variants.
    pub scores: Var,
    /// `n x n` attention weights for `opentag`.
    pub attention: Option<Var>,
}

/// A decoded sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub tokens: Vec<String>,
    pub tags: Vec<usize>,
    pub tag_names: Vec<String>,
    pub values: ExtractionResult,
    pub attention: Option<AttentionMatrix>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    scheme: TagScheme,
    vocab: Vocabulary,
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Seeded generator for a `(seed, purpose, ...)` tuple.
pub fn derived_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

fn bernoulli_mask<R: Rng>(rows: usize, cols: usize, keep: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < keep { 1.0 } else { 0.0 })
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl Model {
    /// Fresh parameters for `vocab` and `scheme`, initialized from
    /// `config.seed`.
    pub fn new(config: ModelConfig, scheme: TagScheme, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if scheme.kind != config.scheme {
            return Err(Error::Config(format!(
                "scheme {} does not match configured {}",
                scheme.kind, config.scheme
            )));
        }
        let mut rng = derived_rng(&[config.seed, 0x1417]);
        let embedding = match &config.pretrained {
            Some(path) => EmbeddingTable::load_pretrained(path, &vocab, config.embed_dim, &mut rng)?,
            None => EmbeddingTable::random(vocab.len(), config.embed_dim, &mut rng),
        };
        let h = config.hidden;
        let dh = 2 * h;
        let k = scheme.num_tags();
        let mut params = ParamStore::new();
        params.insert("embedding", embedding.weights);
        for dir in ["fwd", "bwd"] {
            let lstm = LstmParams::init(config.embed_dim, h, &mut rng);
            params.insert(format!("lstm.{dir}.w_ih"), lstm.w_ih);
            params.insert(format!("lstm.{dir}.w_hh"), lstm.w_hh);
            params.insert(format!("lstm.{dir}.bias"), lstm.bias);
        }
        let feature_dim = match config.variant {
            Variant::Bilstm => dh,
            Variant::BilstmCrf => {
                params.insert("dense.w", xavier(dh, dh, &mut rng));
                params.insert("dense.b", Tensor::zeros(1, dh));
                dh
            }
            Variant::Opentag => {
                let a = AttentionParams::init(dh, config.attention_dim, &mut rng);
                params.insert("attention.w_g", a.w_g);
                params.insert("attention.w_g2", a.w_g2);
                params.insert("attention.b_g", a.b_g);
                params.insert("attention.w_a", a.w_a);
                params.insert("attention.b_a", a.b_a);
                if config.attention_concat_variant {
                    2 * dh
                } else {
                    dh
                }
            }
        };
        params.insert("output.w", xavier(feature_dim, k, &mut rng));
        params.insert("output.b", Tensor::zeros(1, k));
        if config.variant.uses_crf() {
            params.insert("crf.transitions", Tensor::zeros(k + 2, k + 2));
        }
        let layout = Layout::resolve(&params, config.variant)?;
        Ok(Model {
            config,
            scheme,
            vocab,
            params,
            layout,
        })
    }

    /// Builds the vocabulary from `train` and initializes a model.
    pub fn for_training(config: ModelConfig, scheme: TagScheme, train: &[TaggedSequence]) -> Result<Self> {
        let corpus: Vec<&[String]> = train.iter().map(|s| s.tokens.as_slice()).collect();
        let corpus: Vec<Vec<&str>> = corpus.iter().map(|t| t.iter().map(String::as_str).collect()).collect();
        let vocab = Vocabulary::build(&corpus, config.min_count, true)?;
        Model::new(config, scheme, vocab)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn num_tags(&self) -> usize {
        self.scheme.num_tags()
    }

    /// The CRF layer with the current transitions, or `None` for `bilstm`.
    pub fn crf(&self) -> Option<CrfParams> {
        let idx = self.layout.transitions?;
        let crf = CrfParams::new(self.num_tags(), self.params.value(idx).clone()).expect("validated shape");
        Some(if self.config.crf_hard_constraints {
            crf.with_constraints(self.scheme.allowed_transitions()).expect("grid size")
        } else {
            crf
        })
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        self.vocab.encode(tokens)
    }

    /// Registers every parameter on `g`, in store order.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.params.register(g)
    }

    /// Builds the per-token scores for `ids` using parameter handles
    /// `vars` (one per stored parameter, in store order). When the graph
    /// is training, `rng` drives dropout.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], ids: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        if vars.len() != self.params.len() {
            return Err(Error::contract(format!(
                "{} parameter handles for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let n = ids.len();
        if n == 0 {
            return Err(Error::contract("cannot score an empty sequence"));
        }
        let l = &self.layout;
        let keep = 1.0 - self.config.dropout;
        let mut rng = if g.is_training() && self.config.dropout > 0.0 { rng } else { None };

        let mut x = embeddings::lookup(g, vars[l.embedding], ids)?;
        if let Some(r) = rng.as_deref_mut() {
            let m = bernoulli_mask(n, self.config.embed_dim, keep, r);
            x = g.dropout(x, m, keep)?;
        }
        let lstm = |ix: [usize; 3]| LstmVars {
            w_ih: vars[ix[0]],
            w_hh: vars[ix[1]],
            bias: vars[ix[2]],
        };
        let mask = vec![true; n];
        let mut h = bilstm_encode(g, &lstm(l.fwd), &lstm(l.bwd), x, &mask, self.config.bilstm_sigmoid_concat)?;
        if let Some(r) = rng.as_deref_mut() {
            let m = bernoulli_mask(n, 2 * self.config.hidden, keep, r);
            h = g.dropout(h, m, keep)?;
        }
        let mut attention = None;
        let features = match self.config.variant {
            Variant::Bilstm => h,
            Variant::BilstmCrf => {
                let [w, b] = l.dense.expect("layout has dense layer");
                let z = g.matmul(h, vars[w])?;
                let z = g.add(z, vars[b])?;
                g.tanh(z)?
            }
            Variant::Opentag => {
                let [w_g, w_g2, b_g, w_a, b_a] = l.attention.expect("layout has attention");
                let av = AttentionVars {
                    w_g: vars[w_g],
                    w_g2: vars[w_g2],
                    b_g: vars[b_g],
                    w_a: vars[w_a],
                    b_a: vars[b_a],
                };
                let (a, focused) = attend(g, &av, h, &mask)?;
                attention = Some(a);
                if self.config.attention_concat_variant {
                    g.concat(&[h, focused], 1)?
                } else {
                    focused
                }
            }
        };
        let scores = g.matmul(features, vars[l.output[0]])?;
        let scores = g.add(scores, vars[l.output[1]])?;
        Ok(Forward { scores, attention })
    }

    /// Training objective for one sample: mean token cross-entropy for
    /// `bilstm`, sequence NLL otherwise.
    pub fn loss(&self, g: &mut Graph, vars: &[Var], ids: &[usize], tags: &[usize], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        if tags.len() != ids.len() {
            return Err(Error::contract(format!("{} tags for {} tokens", tags.len(), ids.len())));
        }
        let k = self.num_tags();
        if let Some(&bad) = tags.iter().find(|&&t| t >= k) {
            return Err(Error::contract(format!("tag index {bad} out of range for {k} tags")));
        }
        let out = self.forward(g, vars, ids, rng)?;
        match self.layout.transitions {
            Some(t) => {
                let allowed = self.config.crf_hard_constraints.then(|| self.scheme.allowed_transitions());
                nll_graph(g, out.scores, vars[t], tags, &vec![true; ids.len()], allowed.as_deref())
            }
            None => {
                let n = ids.len();
                let lse = g.log_sum_exp(out.scores)?;
                let mut onehot = Tensor::zeros(n, k);
                for (t, &y) in tags.iter().enumerate() {
                    onehot.set(t, y, 1.0);
                }
                let onehot = g.constant(onehot);
                let picked = g.mul(out.scores, onehot)?;
                let picked = g.sum(picked)?;
                let total = g.sum(lse)?;
                let diff = g.sub(total, picked)?;
                g.scale(diff, 1.0 / n as f64)
            }
        }
    }

    /// Evaluation-mode scores `n x K` and, for `opentag`, the `n x n`
    /// attention matrix. `ids` must be non-empty.
    pub fn scores(&self, ids: &[usize]) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::new(false);
        let vars = self.register(&mut g);
        let out = self.forward(&mut g, &vars, ids, None)?;
        let attention = out.attention.map(|a| g.value(a).clone());
        Ok((g.value(out.scores).clone(), attention))
    }

    /// Best tag path for the given scores: Viterbi for the CRF variants,
    /// per-token argmax for `bilstm`.
    pub fn decode_scores(&self, scores: &Tensor) -> Result<Vec<usize>> {
        match self.crf() {
            Some(crf) => Ok(crf.viterbi(scores, &vec![true; scores.rows()])?.0),
            None => Ok((0..scores.rows()).map(|t| argmax(scores.row(t))).collect()),
        }
    }

    /// Probability of the decoded path: exact for the CRF variants and
    /// `prod_t max_k p_t(k)` for `bilstm`.
    pub fn best_path_probability(&self, scores: &Tensor) -> Result<f64> {
        match self.crf() {
            Some(crf) => {
                let mask = vec![true; scores.rows()];
                let (path, _) = crf.viterbi(scores, &mask)?;
                crf.sequence_probability(scores, &path, &mask)
            }
            None => Ok(softmax_rows(scores)
                .iter()
                .map(|row| row.iter().copied().fold(0.0, f64::max))
                .product()),
        }
    }

    pub fn predict_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Prediction> {
        let tokens: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        if tokens.is_empty() {
            return Ok(Prediction {
                tokens,
                tags: Vec::new(),
                tag_names: Vec::new(),
                values: ExtractionResult::new(),
                attention: None,
            });
        }
        let ids = self.encode_tokens(&tokens);
        let (scores, attention) = self.scores(&ids)?;
        let tags = self.decode_scores(&scores)?;
        let values = self.scheme.decode_tags(&tokens, &tags);
        let attention = attention.map(|a| AttentionMatrix::new(tokens.clone(), &a)).transpose()?;
        Ok(Prediction {
            tag_names: tags.iter().map(|&t| self.scheme.tag_name(t)).collect(),
            tokens,
            tags,
            values,
            attention,
        })
    }

    pub fn predict_text(&self, text: &str) -> Result<Prediction> {
        self.predict_tokens(&tokenize(text))
    }

    /// Per-token softmax distributions (`bilstm`) or CRF marginals.
    pub fn token_distributions(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let (scores, _) = self.scores(&self.encode_tokens(tokens))?;
        match self.crf() {
            Some(crf) => {
                let m = crf.marginals(&scores, &vec![true; scores.rows()])?;
                Ok((0..m.rows()).map(|t| m.row(t).to_vec()).collect())
            }
            None => Ok(softmax_rows(&scores)),
        }
    }

    /// Full-credit evaluation on gold-tagged samples. Scoring fans out over
    /// worker threads; results are joined in sample order.
    pub fn evaluate(&self, data: &[TaggedSequence]) -> Result<Evaluation> {
        let predicted: Vec<Result<ExtractionResult>> = data
            .par_iter()
            .map(|s| self.predict_tokens(&s.tokens).map(|p| p.values))
            .collect();
        let mut pred = BTreeMap::new();
        let mut gold = BTreeMap::new();
        for (s, p) in data.iter().zip(predicted) {
            pred.insert(s.id.clone(), p?);
            gold.insert(s.id.clone(), self.scheme.decode_tags(&s.tokens, &s.tags));
        }
        evaluate(&pred, &gold)
    }

    /// Mean evaluation-mode training loss over non-empty samples.
    pub fn mean_loss(&self, data: &[TaggedSequence]) -> Result<f64> {
        let losses: Vec<f64> = data
            .par_iter()
            .filter(|s| !s.tokens.is_empty())
            .map(|s| {
                let mut g = Graph::new(false);
                let vars = self.register(&mut g);
                let loss = self.loss(&mut g, &vars, &self.encode_tokens(&s.tokens), &s.tags, None)?;
                Ok(g.value(loss).item())
            })
            .collect::<Result<_>>()?;
        if losses.is_empty() {
            return Ok(0.0);
        }
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: MODEL_FORMAT.into(),
            config: self.config.clone(),
            scheme: self.scheme.clone(),
            vocab: self.vocab.clone(),
        };
        checkpoint_bytes(&serde_json::to_value(&header)?, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params) = parse_checkpoint(bytes)?;
        let header: Header = serde_json::from_value(header)?;
        if header.format != MODEL_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported model format {:?}", header.format)));
        }
        let layout = Layout::resolve(&params, header.config.variant)?;
        let reference = Model::new(header.config.clone(), header.scheme.clone(), header.vocab.clone())?;
        for (name, t) in reference.params.iter() {
            let found = params.get(name).expect("layout resolved");
            if found.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    found.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Model {
            config: header.config,
            scheme: header.scheme,
            vocab: header.vocab,
            params,
            layout,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Fails with a configuration error when the checkpoint was trained
    /// for a different variant or scheme than the caller expects.
    pub fn check_compatible(&self, variant: Option<Variant>, scheme: Option<SchemeKind>) -> Result<()> {
        if let Some(v) = variant.filter(|&v| v != self.config.variant) {
            return Err(Error::Config(format!("checkpoint holds a {} model, not {v}", self.config.variant)));
        }
        if let Some(s) = scheme.filter(|&s| s != self.scheme.kind) {
            return Err(Error::Config(format!("checkpoint uses the {} scheme, not {s}", self.scheme.kind)));
        }
        Ok(())
    }
}

fn softmax_rows(scores: &Tensor) -> Vec<Vec<f64>> {
    (0..scores.rows())
        .map(|t| {
            let row = scores.row(t);
            let lse = crate::autodiff::log_sum_exp(row);
            row.iter().map(|v| (v - lse).exp()).collect()
        })
        .collect()
}

/// One line of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricHistory {
    pub records: Vec<EpochRecord>,
}

impl MetricHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean P/R/F over the evaluated epochs among the last `k`.
    pub fn last_k_average(&self, k: usize) -> Option<AveragedMetrics> {
        let start = self.records.len().saturating_sub(k);
        let window: Vec<&EpochRecord> = self.records[start..].iter().filter(|r| r.f1.is_some()).collect();
        if window.is_empty() {
            return None;
        }
        let mean = |f: fn(&EpochRecord) -> Option<f64>| {
            window.iter().map(|r| f(r).unwrap_or(0.0)).sum::<f64>() / window.len() as f64
        };
        Some(AveragedMetrics {
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
            epochs: window.len(),
        })
    }

    /// One JSON object per epoch, each tagged with the format version.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            version: &'static str,
            #[serde(flatten)]
            record: &'a EpochRecord,
        }
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(&Line {
                version: METRICS_FORMAT,
                record,
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(s: &str) -> Result<Self> {
        let records = s
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Ingestion {
                    line: i + 1,
                    msg: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricHistory { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub const OPTIMIZER_FORMAT: &str = "avtag.optimizer/1";

#[derive(Serialize, Deserialize)]
struct OptimizerFile {
    version: String,
    epoch: usize,
    adam: AdamState,
}

/// Optimizer state and epoch counter around a model.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    adam: AdamState,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Model) -> Self {
        let refs: Vec<&Tensor> = model.params.iter().map(|(_, t)| t).collect();
        let adam = AdamState::new(&refs);
        Trainer { model, adam, epoch: 0 }
    }

    /// Rebuilds a trainer from a model and saved optimizer state.
    pub fn resume(model: Model, adam: AdamState, epoch: usize) -> Result<Self> {
        let n = model.params.len();
        let fits = adam.first.len() == n
            && adam.second.len() == n
            && (0..n).all(|i| {
                let shape = model.params.value(i).shape();
                adam.first[i].shape() == shape && adam.second[i].shape() == shape
            });
        if !fits {
            return Err(Error::Checkpoint("optimizer state does not match the model parameters".into()));
        }
        Ok(Trainer { model, adam, epoch })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.adam
    }

    /// Writes `model.avt` and `optimizer.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join("model.avt"))?;
        let state = OptimizerFile {
            version: OPTIMIZER_FORMAT.into(),
            epoch: self.epoch,
            adam: self.adam.clone(),
        };
        let path = dir.join("optimizer.json");
        fs::write(&path, serde_json::to_vec(&state)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = Model::load(&dir.join("model.avt"))?;
        let path = dir.join("optimizer.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let state: OptimizerFile = serde_json::from_slice(&bytes)?;
        if state.version != OPTIMIZER_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported optimizer format {:?}", state.version)));
        }
        Trainer::resume(model, state.adam, state.epoch)
    }

    /// One pass over `data` in a seeded shuffled order with mini-batch
    /// Adam updates. Returns the mean per-sample loss.
    pub fn train_epoch(&mut self, data: &[TaggedSequence]) -> Result<f64> {
        self.epoch += 1;
        let epoch = self.epoch;
        let seed = self.model.config.seed;
        let mut order: Vec<usize> = (0..data.len()).filter(|&i| !data[i].tokens.is_empty()).collect();
        if order.is_empty() {
            return Ok(0.0);
        }
        order.shuffle(&mut derived_rng(&[seed, 0x5348, epoch as u64]));
        let num_params = self.model.params.len();
        let batch = self.model.config.batch_size;
        let mut total = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let model = &self.model;
            let results: Vec<Result<(f64, Vec<Option<Tensor>>)>> = chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = derived_rng(&[seed, 0xD0, epoch as u64, b as u64, i as u64]);
                    let mut ids = model.encode_tokens(&data[i].tokens);
                    if model.config.word_dropout > 0.0 {
                        for id in ids.iter_mut().filter(|id| **id != PAD) {
                            if rng.random::<f64>() < model.config.word_dropout {
                                *id = UNK;
                            }
                        }
                    }
                    let mut g = Graph::new(true);
                    let vars = model.register(&mut g);
                    let loss = model.loss(&mut g, &vars, &ids, &data[i].tags, Some(&mut rng))?;
                    let value = g.value(loss).item();
                    let grads = g.backward(loss)?.param_grads(num_params);
                    Ok((value, grads))
                })
                .collect();
            let mut sum: Vec<Option<Tensor>> = (0..num_params).map(|_| None).collect();
            for r in results {
                let (value, grads) = r.map_err(|e| match e {
                    Error::Numeric { .. } => Error::Divergence { epoch },
                    other => other,
                })?;
                if !value.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                total += value;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    match (acc.as_mut(), g) {
                        (Some(a), Some(g)) => a.add_assign(&g),
                        (None, Some(g)) => *acc = Some(g),
                        _ => {}
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in sum.iter_mut().flatten() {
                g.scale_in_place(scale);
            }
            if let Some(max) = self.model.config.clip_norm {
                clip_global_norm(&mut sum, max);
            }
            let cfg = self.model.config.adam();
            let mut params = self.model.params.values_mut();
            adam_step(&mut params, &sum, &mut self.adam, &cfg)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence { epoch });
            }
        }
        Ok(total / order.len() as f64)
    }
}

/// Trains `config.variant` on `train`, evaluating on `eval` after each
/// epoch (or only inside the averaging window when `eval_window_only`).
pub fn train(
    train: &[TaggedSequence],
    eval: &[TaggedSequence],
    config: &ModelConfig,
    scheme: &TagScheme,
) -> Result<(Model, MetricHistory)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let model = Model::for_training(config.clone(), scheme.clone(), train)?;
    let mut trainer = Trainer::new(model);
    let mut history = MetricHistory::default();
    for epoch in 1..=config.epochs {
        let loss = trainer.train_epoch(train)?;
        let in_window = epoch + config.last_k_average > config.epochs;
        let (precision, recall, f1) = if !eval.is_empty() && (!config.eval_window_only || in_window) {
            let m = trainer.model.evaluate(eval)?.micro;
            (Some(m.precision), Some(m.recall), Some(m.f1))
        } else {
            (None, None, None)
        };
        log::info!("epoch {epoch}: loss {loss:.4} f1 {f1:?}");
        history.records.push(EpochRecord {
            epoch,
            loss,
            precision,
            recall,
            f1,
        });
    }
    Ok((trainer.model, history))
}
