//! Pool-based active learning with tag-flip, least-confidence and random
//! query strategies.
//!
//! A round trains the learner on the labeled set for `E` epochs with
//! dropout on. The model before the first epoch and after each epoch forms
//! the committee. Every member tags the pool. Samples whose tags flip most
//! often between successive members are queried first.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TaggedSequence;
use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::model::{derived_rng, Model, ModelConfig, Trainer};
use crate::tags::{Prf, TagScheme};
use crate::tensor::Tensor;

pub const ROUNDS_FORMAT: &str = "avtag.rounds/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "TF")]
    TagFlip,
    #[serde(rename = "LC")]
    LeastConfidence,
    #[serde(rename = "random")]
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::TagFlip => "TF",
            Strategy::LeastConfidence => "LC",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TF" | "tf" => Ok(Strategy::TagFlip),
            "LC" | "lc" => Ok(Strategy::LeastConfidence),
            "random" | "RANDOM" => Ok(Strategy::Random),
            other => Err(Error::Config(format!("unknown query strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ALConfig {
    pub strategy: Strategy,
    pub initial_labeled: usize,
    /// Queries per round.
    pub batch_size: usize,
    pub rounds: usize,
    /// Committee epochs per round.
    pub committee_epochs: usize,
    /// Stop once the validation loss moves less than this between rounds.
    pub stop_threshold: Option<f64>,
    /// Divide flip counts by sequence length.
    pub normalize_flips: bool,
    /// Start every round from freshly initialized weights.
    pub reinit_each_round: bool,
    pub seed: u64,
}

impl Default for ALConfig {
    fn default() -> Self {
        ALConfig {
            strategy: Strategy::TagFlip,
            initial_labeled: 50,
            batch_size: 25,
            rounds: 20,
            committee_epochs: 10,
            stop_threshold: None,
            normalize_flips: false,
            reinit_each_round: false,
            seed: 0,
        }
    }
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("query batch size must be at least 1".into()));
        }
        if self.committee_epochs < 2 {
            return Err(Error::Config("tag flips need at least 2 committee epochs".into()));
        }
        Ok(())
    }
}

/// Predicted tags of one pool sample under each committee member, oldest
/// first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub id: String,
    pub predictions: Vec<Vec<usize>>,
}

impl FlipRecord {
    /// Positions whose tag differs between successive snapshots, summed
    /// over all successive pairs.
    pub fn flips(&self) -> Result<usize> {
        if self.predictions.len() < 2 {
            return Err(Error::contract(format!(
                "{}: flip count needs at least two snapshots, have {}",
                self.id,
                self.predictions.len()
            )));
        }
        let n = self.predictions[0].len();
        if self.predictions.iter().any(|p| p.len() != n) {
            return Err(Error::contract(format!("{}: snapshots differ in length", self.id)));
        }
        Ok(self.predictions.windows(2).map(|w| tag_differences(&w[0], &w[1])).sum())
    }

    pub fn max_flips(&self) -> usize {
        self.predictions.len().saturating_sub(1) * self.predictions.first().map_or(0, Vec::len)
    }
}

/// Number of positions at which two equal-length tag sequences differ.
pub fn tag_differences(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Tag-flip score of a record, optionally divided by sequence length.
pub fn q_tf(record: &FlipRecord, normalize: bool) -> Result<f64> {
    let flips = record.flips()? as f64;
    let n = record.predictions[0].len();
    Ok(if normalize && n > 0 { flips / n as f64 } else { flips })
}

/// `1 - Pr(best path)` under a CRF.
pub fn least_confidence_crf(crf: &CrfParams, emissions: &Tensor) -> Result<f64> {
    let mask = vec![true; emissions.rows()];
    let (path, _) = crf.viterbi(emissions, &mask)?;
    Ok(1.0 - crf.sequence_probability(emissions, &path, &mask)?)
}

/// Least-confidence score `1 - Pr(best path)` of a token sequence under
/// `model`. Empty input scores 0.
pub fn q_lc(model: &Model, tokens: &[String]) -> Result<f64> {
    if tokens.is_empty() {
        return Ok(0.0);
    }
    let (scores, _) = model.scores(&model.encode_tokens(tokens))?;
    Ok((1.0 - model.best_path_probability(&scores)?).clamp(0.0, 1.0))
}

/// Source of gold labels for queried samples.
pub trait Oracle {
    /// Tag sequences for `ids`, in order.
    fn label(&mut self, ids: &[String]) -> Result<Vec<Vec<usize>>>;
}

/// Answers from stored gold tags.
#[derive(Clone, Debug, Default)]
pub struct SimulatedOracle {
    gold: HashMap<String, Vec<usize>>,
}

impl SimulatedOracle {
    pub fn new(samples: &[TaggedSequence]) -> Self {
        SimulatedOracle {
            gold: samples.iter().map(|s| (s.id.clone(), s.tags.clone())).collect(),
        }
    }
}

impl Oracle for SimulatedOracle {
    fn label(&mut self, ids: &[String]) -> Result<Vec<Vec<usize>>> {
        ids.iter()
            .map(|id| {
                self.gold
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::contract(format!("oracle has no gold tags for {id:?}")))
            })
            .collect()
    }
}

/// An unlabeled pool sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSample {
    pub id: String,
    pub tokens: Vec<String>,
}

/// A queried sample with the learner's current guess.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub sample_id: String,
    pub tokens: Vec<String>,
    pub strategy_score: f64,
    pub prior_prediction_tags: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub strategy: Strategy,
    /// Labeled-set size the learner was trained on this round.
    pub labeled: usize,
    pub queried_ids: Vec<String>,
    pub strategy_scores: Vec<f64>,
    pub post_round_metrics: Option<Prf>,
    pub validation_loss: Option<f64>,
}

/// Outcome of training and ranking, before any label arrives.
#[derive(Clone, Debug)]
pub struct Selection {
    pub round: usize,
    pub queries: Vec<Query>,
    pub flip_records: Vec<FlipRecord>,
    pub metrics: Option<Prf>,
    pub validation_loss: Option<f64>,
    /// The learner after this round's committee epochs.
    pub learner: Trainer,
}

/// Labeled set, pool, learner and round history.
#[derive(Clone, Debug)]
pub struct ActiveLearningState {
    pub labeled: Vec<TaggedSequence>,
    pub unlabeled: Vec<PoolSample>,
    pub history: Vec<RoundRecord>,
    pub model_config: ModelConfig,
    pub scheme: TagScheme,
    learner: Option<Trainer>,
}

impl ActiveLearningState {
    pub fn new(
        labeled: Vec<TaggedSequence>,
        unlabeled: Vec<PoolSample>,
        model_config: ModelConfig,
        scheme: TagScheme,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for id in labeled.iter().map(|s| &s.id).chain(unlabeled.iter().map(|s| &s.id)) {
            if !seen.insert(id.clone()) {
                return Err(Error::contract(format!("sample {id:?} appears twice in L and U")));
            }
        }
        model_config.validate()?;
        Ok(ActiveLearningState {
            labeled,
            unlabeled,
            history: Vec::new(),
            model_config,
            scheme,
            learner: None,
        })
    }

    /// Draws `cfg.initial_labeled` samples from `pool` as the seed set (in
    /// pool order) and leaves the rest unlabeled.
    pub fn from_pool(pool: &[TaggedSequence], cfg: &ALConfig, model_config: ModelConfig, scheme: TagScheme) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derived_rng(&[cfg.seed, 0x1AB]);
        let n = cfg.initial_labeled.min(pool.len());
        let chosen: BTreeSet<usize> = rand::seq::index::sample(&mut rng, pool.len(), n).into_iter().collect();
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for (i, s) in pool.iter().enumerate() {
            if chosen.contains(&i) {
                labeled.push(s.clone());
            } else {
                unlabeled.push(PoolSample {
                    id: s.id.clone(),
                    tokens: s.tokens.clone(),
                });
            }
        }
        Self::new(labeled, unlabeled, model_config, scheme)
    }

    pub fn round(&self) -> usize {
        self.history.len()
    }

    pub fn learner(&self) -> Option<&Trainer> {
        self.learner.as_ref()
    }

    pub fn set_learner(&mut self, learner: Option<Trainer>) {
        self.learner = learner;
    }

    fn fresh_learner(&self) -> Result<Trainer> {
        // vocabulary over all pool text; labels are not needed for it
        let mut all: Vec<TaggedSequence> = self.labeled.clone();
        all.extend(self.unlabeled.iter().map(|u| TaggedSequence {
            id: u.id.clone(),
            tags: vec![0; u.tokens.len()],
            tokens: u.tokens.clone(),
        }));
        let model = Model::for_training(self.model_config.clone(), self.scheme.clone(), &all)?;
        Ok(Trainer::new(model))
    }

    /// Trains the committee on a copy of the learner and ranks the pool.
    /// Leaves `self` untouched.
    pub fn select_queries(&self, cfg: &ALConfig, eval: Option<&[TaggedSequence]>) -> Result<Selection> {
        cfg.validate()?;
        if self.unlabeled.is_empty() {
            return Err(Error::contract("the unlabeled pool is empty"));
        }
        let mut learner = match (&self.learner, cfg.reinit_each_round) {
            (Some(l), false) => l.clone(),
            _ => self.fresh_learner()?,
        };
        let tf = cfg.strategy == Strategy::TagFlip;
        let predict_pool = |m: &Model| -> Result<Vec<Vec<usize>>> {
            self.unlabeled
                .par_iter()
                .map(|u| m.predict_tokens(&u.tokens).map(|p| p.tags))
                .collect()
        };
        let mut snapshots: Vec<Vec<Vec<usize>>> = Vec::new();
        if tf {
            snapshots.push(predict_pool(&learner.model)?);
        }
        for _ in 0..cfg.committee_epochs {
            learner.train_epoch(&self.labeled)?;
            if tf {
                snapshots.push(predict_pool(&learner.model)?);
            }
        }
        let model = &learner.model;
        let final_tags = match snapshots.last() {
            Some(last) => last.clone(),
            None => predict_pool(model)?,
        };
        let flip_records: Vec<FlipRecord> = if tf {
            (0..self.unlabeled.len())
                .map(|i| FlipRecord {
                    id: self.unlabeled[i].id.clone(),
                    predictions: snapshots.iter().map(|s| s[i].clone()).collect(),
                })
                .collect()
        } else {
            Vec::new()
        };
        let scores: Vec<f64> = match cfg.strategy {
            Strategy::TagFlip => flip_records
                .iter()
                .map(|r| q_tf(r, cfg.normalize_flips))
                .collect::<Result<_>>()?,
            Strategy::LeastConfidence => self
                .unlabeled
                .par_iter()
                .map(|u| q_lc(model, &u.tokens))
                .collect::<Result<_>>()?,
            Strategy::Random => {
                let mut rng = derived_rng(&[cfg.seed, 0x4A4D, self.round() as u64]);
                self.unlabeled.iter().map(|_| rng.random::<f64>()).collect()
            }
        };
        let mut order: Vec<usize> = (0..self.unlabeled.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.unlabeled[a].id.cmp(&self.unlabeled[b].id))
        });
        let queries = order
            .iter()
            .take(cfg.batch_size)
            .map(|&i| Query {
                sample_id: self.unlabeled[i].id.clone(),
                tokens: self.unlabeled[i].tokens.clone(),
                strategy_score: scores[i],
                prior_prediction_tags: final_tags[i].clone(),
            })
            .collect();
        let (metrics, validation_loss) = match eval {
            Some(data) if !data.is_empty() => (Some(model.evaluate(data)?.micro), Some(model.mean_loss(data)?)),
            _ => (None, None),
        };
        Ok(Selection {
            round: self.round(),
            queries,
            flip_records,
            metrics,
            validation_loss,
            learner,
        })
    }

    /// Moves the answered queries from U to L, adopts the trained learner
    /// and appends the round record. Labels are validated first, so an
    /// error leaves the state unchanged.
    pub fn commit(&mut self, selection: Selection, strategy: Strategy, labels: &BTreeMap<String, Vec<usize>>) -> Result<&RoundRecord> {
        if selection.round != self.round() {
            return Err(Error::contract(format!(
                "selection is for round {}, state is at round {}",
                selection.round,
                self.round()
            )));
        }
        let k = self.scheme.num_tags();
        let position: HashMap<&str, usize> = self.unlabeled.iter().enumerate().map(|(i, u)| (u.id.as_str(), i)).collect();
        for q in &selection.queries {
            let tags = labels
                .get(&q.sample_id)
                .ok_or_else(|| Error::Oracle(format!("no label for {:?}", q.sample_id)))?;
            let Some(&i) = position.get(q.sample_id.as_str()) else {
                return Err(Error::contract(format!("{:?} is not in the unlabeled pool", q.sample_id)));
            };
            if tags.len() != self.unlabeled[i].tokens.len() || tags.iter().any(|&t| t >= k) {
                return Err(Error::Oracle(format!("label for {:?} does not fit the sample", q.sample_id)));
            }
        }
        let queried: BTreeSet<&str> = selection.queries.iter().map(|q| q.sample_id.as_str()).collect();
        let labeled_before = self.labeled.len();
        let mut kept = Vec::with_capacity(self.unlabeled.len());
        for u in std::mem::take(&mut self.unlabeled) {
            if queried.contains(u.id.as_str()) {
                let tags = labels[&u.id].clone();
                self.labeled.push(TaggedSequence {
                    id: u.id,
                    tokens: u.tokens,
                    tags,
                });
            } else {
                kept.push(u);
            }
        }
        self.unlabeled = kept;
        self.learner = Some(selection.learner);
        self.history.push(RoundRecord {
            round: selection.round,
            strategy,
            labeled: labeled_before,
            queried_ids: selection.queries.iter().map(|q| q.sample_id.clone()).collect(),
            strategy_scores: selection.queries.iter().map(|q| q.strategy_score).collect(),
            post_round_metrics: selection.metrics,
            validation_loss: selection.validation_loss,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// One synchronous round: select, ask the oracle, commit. An oracle
    /// failure aborts the round with the state unchanged.
    pub fn run_round(&mut self, cfg: &ALConfig, oracle: &mut dyn Oracle, eval: Option<&[TaggedSequence]>) -> Result<&RoundRecord> {
        let selection = self.select_queries(cfg, eval)?;
        let ids: Vec<String> = selection.queries.iter().map(|q| q.sample_id.clone()).collect();
        let answers = oracle.label(&ids)?;
        if answers.len() != ids.len() {
            return Err(Error::Oracle(format!("{} answers for {} queries", answers.len(), ids.len())));
        }
        let labels: BTreeMap<String, Vec<usize>> = ids.into_iter().zip(answers).collect();
        self.commit(selection, cfg.strategy, &labels)
    }

    /// True once the validation loss changed less than the threshold
    /// between the last two rounds.
    pub fn converged(&self, cfg: &ALConfig) -> bool {
        let Some(threshold) = cfg.stop_threshold else { return false };
        let losses: Vec<f64> = self.history.iter().filter_map(|r| r.validation_loss).collect();
        matches!(losses.as_slice(), [.., a, b] if (a - b).abs() < threshold)
    }

    /// Runs up to `cfg.rounds` rounds, stopping early when the pool runs
    /// dry or the validation loss converges.
    pub fn run(&mut self, cfg: &ALConfig, oracle: &mut dyn Oracle, eval: Option<&[TaggedSequence]>) -> Result<()> {
        for _ in 0..cfg.rounds {
            if self.unlabeled.is_empty() || self.converged(cfg) {
                break;
            }
            self.run_round(cfg, oracle, eval)?;
        }
        Ok(())
    }

    /// Round history, one versioned JSON object per round.
    pub fn history_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            version: &'static str,
            #[serde(flatten)]
            record: &'a RoundRecord,
        }
        let mut out = String::new();
        for record in &self.history {
            out.push_str(&serde_json::to_string(&Line {
                version: ROUNDS_FORMAT,
                record,
            })?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::model::Variant;
    use crate::tags::{SchemeKind, Span};

    #[test]
    fn flip_examples() {
        let scheme = TagScheme::single(SchemeKind::Bioe, "flavor");
        let p = |s: &[&str]| scheme.parse_tags(s).unwrap();
        let r = FlipRecord {
            id: "x".into(),
            predictions: vec![p(&["B", "O", "B", "E"]), p(&["B", "O", "O", "E"]), p(&["B", "O", "O", "E"])],
        };
        assert_eq!(r.flips().unwrap(), 1);
        assert_eq!(r.max_flips(), 8);
        assert_eq!(q_tf(&r, true).unwrap(), 0.25);
        let same = FlipRecord {
            id: "y".into(),
            predictions: vec![p(&["B", "E"]); 4],
        };
        assert_eq!(same.flips().unwrap(), 0);
        let single = FlipRecord {
            id: "z".into(),
            predictions: vec![p(&["B"])],
        };
        assert!(matches!(single.flips(), Err(Error::Contract(_))));
    }

    #[test]
    fn lc_bounds() {
        let uniform = CrfParams::zeros(4);
        let e = Tensor::zeros(2, 4);
        let lc = least_confidence_crf(&uniform, &e).unwrap();
        assert!((lc - (1.0 - 1.0 / 16.0)).abs() < 1e-12);
        let mut peaked = Tensor::zeros(3, 4);
        for t in 0..3 {
            peaked.set(t, 1, 200.0);
        }
        assert_eq!(least_confidence_crf(&uniform, &peaked).unwrap(), 0.0);
    }

    #[test]
    fn oracle_answers() {
        let s = TaggedSequence {
            id: "a".into(),
            tokens: vec!["x".into()],
            tags: vec![1],
        };
        let mut o = SimulatedOracle::new(&[s]);
        assert_eq!(o.label(&["a".into()]).unwrap(), vec![vec![1]]);
        assert_eq!(o.label(&["a".into()]).unwrap(), vec![vec![1]]);
        assert!(o.label(&["b".into()]).is_err());
    }

    fn pool(scheme: &TagScheme, n: usize) -> Vec<TaggedSequence> {
        let flavors = ["duck", "lamb", "smoked beef", "chicken and rice", "salmon"];
        (0..n)
            .map(|i| {
                let f = flavors[i % flavors.len()];
                let tokens = tokenize(&format!("acme {f} dog food"));
                let len = tokenize(f).len();
                let tags = scheme
                    .encode_spans(
                        tokens.len(),
                        &[Span {
                            attribute: 0,
                            start: 1,
                            end: 1 + len,
                        }],
                    )
                    .unwrap();
                TaggedSequence {
                    id: format!("p{i:03}"),
                    tokens,
                    tags,
                }
            })
            .collect()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            variant: Variant::BilstmCrf,
            embed_dim: 4,
            hidden: 3,
            attention_dim: 2,
            epochs: 1,
            last_k_average: 1,
            batch_size: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn rounds_conserve_samples_and_replay() {
        let scheme = TagScheme::single(SchemeKind::Bioe, "flavor");
        let data = pool(&scheme, 20);
        let cfg = ALConfig {
            initial_labeled: 5,
            batch_size: 4,
            committee_epochs: 2,
            rounds: 2,
            ..ALConfig::default()
        };
        let run = |strategy: Strategy| {
            let cfg = ALConfig { strategy, ..cfg.clone() };
            let mut st = ActiveLearningState::from_pool(&data, &cfg, tiny(), scheme.clone()).unwrap();
            let mut oracle = SimulatedOracle::new(&data);
            st.run(&cfg, &mut oracle, Some(&data[..5])).unwrap();
            assert_eq!(st.labeled.len() + st.unlabeled.len(), 20);
            assert_eq!(st.labeled.len(), 13);
            st.history_jsonl().unwrap()
        };
        for s in [Strategy::TagFlip, Strategy::LeastConfidence, Strategy::Random] {
            assert_eq!(run(s), run(s));
        }
    }

    #[test]
    fn oversized_batch_empties_pool() {
        let scheme = TagScheme::single(SchemeKind::Bioe, "flavor");
        let data = pool(&scheme, 8);
        let cfg = ALConfig {
            initial_labeled: 3,
            batch_size: 50,
            committee_epochs: 2,
            strategy: Strategy::Random,
            ..ALConfig::default()
        };
        let mut st = ActiveLearningState::from_pool(&data, &cfg, tiny(), scheme).unwrap();
        st.run_round(&cfg, &mut SimulatedOracle::new(&data), None).unwrap();
        assert!(st.unlabeled.is_empty());
        assert!(st.select_queries(&cfg, None).is_err());
    }

    struct Failing;

    impl Oracle for Failing {
        fn label(&mut self, _: &[String]) -> Result<Vec<Vec<usize>>> {
            Err(Error::Oracle("annotator went home".into()))
        }
    }

    #[test]
    fn failed_oracle_leaves_state_unchanged() {
        let scheme = TagScheme::single(SchemeKind::Bioe, "flavor");
        let data = pool(&scheme, 10);
        let cfg = ALConfig {
            initial_labeled: 3,
            batch_size: 2,
            committee_epochs: 2,
            ..ALConfig::default()
        };
        let mut st = ActiveLearningState::from_pool(&data, &cfg, tiny(), scheme).unwrap();
        let before = (st.labeled.clone(), st.unlabeled.clone());
        assert!(st.run_round(&cfg, &mut Failing, None).is_err());
        assert_eq!((st.labeled.clone(), st.unlabeled.clone()), before);
        assert!(st.history.is_empty() && st.learner().is_none());
    }

    #[test]
    fn config_rejects_single_epoch_committee() {
        let cfg = ALConfig {
            committee_epochs: 1,
            ..ALConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
