use std::collections::BTreeSet;

use avtag::active::{q_lc, q_tf, ALConfig, ActiveLearningState, FlipRecord, SimulatedOracle, Strategy as Query};
use avtag::corpus::{tokenize, TaggedSequence};
use avtag::crf::CrfParams;
use avtag::model::{Model, ModelConfig, Variant};
use avtag::tags::{SchemeKind, Span, TagScheme};
use avtag::tensor::Tensor;
use proptest::prelude::*;

fn recount(predictions: &[Vec<usize>]) -> usize {
    let mut flips = 0;
    for e in 1..predictions.len() {
        for t in 0..predictions[e].len() {
            if predictions[e - 1][t] != predictions[e][t] {
                flips += 1;
            }
        }
    }
    flips
}

fn flip_record() -> impl Strategy<Value = FlipRecord> {
    (2usize..7, 0usize..9, 1usize..8).prop_flat_map(|(snapshots, n, k)| {
        prop::collection::vec(prop::collection::vec(0..k, n), snapshots).prop_map(|predictions| FlipRecord {
            id: "r".into(),
            predictions,
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn flips_match_recount_and_stay_bounded(r in flip_record()) {
        let f = r.flips().unwrap();
        prop_assert_eq!(f, recount(&r.predictions));
        prop_assert!(f <= r.max_flips());
        let n = r.predictions[0].len();
        prop_assert_eq!(r.max_flips(), (r.predictions.len() - 1) * n);
        let normalized = q_tf(&r, true).unwrap();
        prop_assert!(normalized >= 0.0 && normalized <= (r.predictions.len() - 1) as f64);
    }
}

#[test]
fn worked_example_has_four_flips() {
    let scheme = TagScheme::single(SchemeKind::Bioe, "flavor");
    let row = |s: &str| scheme.parse_tags(&s.split(' ').collect::<Vec<_>>()).unwrap();
    let gold = row("B O B E O B I E O");
    let least_confident = row("O O B E O B I E O");
    let tag_flip = row("B O B O O O O B O");
    let r = FlipRecord {
        id: "example".into(),
        predictions: vec![gold.clone(), tag_flip],
    };
    assert_eq!(r.flips().unwrap(), 4);
    let r = FlipRecord {
        id: "example".into(),
        predictions: vec![gold, least_confident],
    };
    assert_eq!(r.flips().unwrap(), 1);
}

#[test]
fn uniform_model_least_confidence() {
    for k in 2..=4 {
        for n in 1..=4 {
            let crf = CrfParams::zeros(k);
            let lc = avtag::active::least_confidence_crf(&crf, &Tensor::zeros(n, k)).unwrap();
            let expected = 1.0 - (k as f64).powi(-(n as i32));
            assert!((lc - expected).abs() < 1e-12, "k={k} n={n}: {lc} vs {expected}");
        }
    }
}

#[test]
fn least_confidence_of_a_model_is_a_probability() {
    let scheme = TagScheme::single(SchemeKind::Bioe, "flavor");
    let data = pool(&scheme, 4);
    for variant in [Variant::Opentag, Variant::Bilstm] {
        let model = Model::for_training(tiny(variant), scheme.clone(), &data).unwrap();
        for s in &data {
            let q = q_lc(&model, &s.tokens).unwrap();
            assert!((0.0..=1.0).contains(&q));
        }
        assert_eq!(q_lc(&model, &[]).unwrap(), 0.0);
    }
}

fn pool(scheme: &TagScheme, n: usize) -> Vec<TaggedSequence> {
    let flavors = ["duck", "lamb", "smoked beef", "chicken and rice", "salmon", "turkey"];
    (0..n)
        .map(|i| {
            let f = flavors[i % flavors.len()];
            let tokens = tokenize(&format!("brand{} {f} dog food", i % 3));
            let len = tokenize(f).len();
            let tags = scheme
                .encode_spans(tokens.len(), &[Span { attribute: 0, start: 1, end: 1 + len }])
                .unwrap();
            TaggedSequence { id: format!("p{i:03}"), tokens, tags }
        })
        .collect()
}

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        embed_dim: 4,
        hidden: 3,
        attention_dim: 3,
        batch_size: 4,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn rounds_conserve_the_pool(
        initial in 1usize..8,
        batch in 1usize..6,
        rounds in 1usize..4,
        strategy in prop::sample::select(vec![Query::TagFlip, Query::LeastConfidence, Query::Random]),
        seed in 0u64..1000,
    ) {
        let scheme = TagScheme::single(SchemeKind::Bioe, "flavor");
        let data = pool(&scheme, 14);
        let cfg = ALConfig { strategy, initial_labeled: initial, batch_size: batch, rounds, committee_epochs: 2, seed, ..ALConfig::default() };
        let mut st = ActiveLearningState::from_pool(&data, &cfg, tiny(Variant::BilstmCrf), scheme).unwrap();
        let mut oracle = SimulatedOracle::new(&data);
        let mut expected = initial;
        for _ in 0..rounds {
            if st.unlabeled.is_empty() {
                break;
            }
            let before = st.unlabeled.len();
            let record = st.run_round(&cfg, &mut oracle, None).unwrap().clone();
            let queried: BTreeSet<&String> = record.queried_ids.iter().collect();
            prop_assert_eq!(queried.len(), batch.min(before));
            expected += batch.min(before);
            prop_assert_eq!(st.labeled.len(), expected);
        }
        let l: BTreeSet<&str> = st.labeled.iter().map(|s| s.id.as_str()).collect();
        let u: BTreeSet<&str> = st.unlabeled.iter().map(|s| s.id.as_str()).collect();
        prop_assert!(l.is_disjoint(&u));
        prop_assert_eq!(l.len() + u.len(), data.len());
        for s in &st.labeled {
            let gold = data.iter().find(|d| d.id == s.id).unwrap();
            prop_assert_eq!(&s.tags, &gold.tags);
        }
    }
}

#[test]
fn queries_are_ranked_by_score_then_id() {
    let scheme = TagScheme::single(SchemeKind::Bioe, "flavor");
    let data = pool(&scheme, 12);
    let cfg = ALConfig { initial_labeled: 4, batch_size: 8, committee_epochs: 2, ..ALConfig::default() };
    let st = ActiveLearningState::from_pool(&data, &cfg, tiny(Variant::Opentag), scheme).unwrap();
    let sel = st.select_queries(&cfg, None).unwrap();
    for w in sel.queries.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        assert!(a.strategy_score > b.strategy_score || (a.strategy_score == b.strategy_score && a.sample_id < b.sample_id));
    }
    assert_eq!(sel.flip_records.len(), 8);
    for r in &sel.flip_records {
        assert_eq!(r.predictions.len(), 3);
    }
}
