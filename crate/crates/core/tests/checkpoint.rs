use avtag::corpus::{generate_synthetic, SynthSpec};
use avtag::model::{MetricHistory, Model, ModelConfig, Trainer, Variant};
use avtag::tags::{SchemeKind, TagScheme};

fn setup(variant: Variant) -> (Vec<avtag::corpus::TaggedSequence>, Trainer) {
    let spec = SynthSpec::dog_food(12, 0, 0.0);
    let scheme = TagScheme::new(SchemeKind::Ubioe, spec.attribute_names()).unwrap();
    let data: Vec<_> = generate_synthetic(&spec, 3)
        .unwrap()
        .iter()
        .map(|p| p.to_tagged(&scheme).unwrap())
        .collect();
    let config = ModelConfig {
        variant,
        embed_dim: 6,
        hidden: 5,
        attention_dim: 4,
        batch_size: 4,
        scheme: SchemeKind::Ubioe,
        ..ModelConfig::default()
    };
    let model = Model::for_training(config, scheme, &data).unwrap();
    (data, Trainer::new(model))
}

#[test]
fn resumed_training_is_bit_identical() {
    for variant in [Variant::Opentag, Variant::BilstmCrf, Variant::Bilstm] {
        let (data, mut a) = setup(variant);
        a.train_epoch(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let mut b = Trainer::load(dir.path()).unwrap();
        assert_eq!(b.epochs_done(), 1);
        let la = a.train_epoch(&data).unwrap();
        let lb = b.train_epoch(&data).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits(), "{variant}");
        assert_eq!(a.model.to_bytes().unwrap(), b.model.to_bytes().unwrap());
    }
}

#[test]
fn checkpoint_bytes_are_stable() {
    let (_, t) = setup(Variant::Opentag);
    let bytes = t.model.to_bytes().unwrap();
    let back = Model::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert!(Model::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn metric_lines_carry_a_version() {
    let (data, mut t) = setup(Variant::Bilstm);
    let loss = t.train_epoch(&data).unwrap();
    let history = MetricHistory {
        records: vec![avtag::model::EpochRecord { epoch: 1, loss, precision: None, recall: None, f1: None }],
    };
    let text = history.to_jsonl().unwrap();
    assert!(text.starts_with("{\"version\":\"avtag.metrics/1\""));
    assert_eq!(MetricHistory::from_jsonl(&text).unwrap(), history);
}
