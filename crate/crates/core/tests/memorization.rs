use avtag::corpus::{tokenize, TaggedSequence};
use avtag::model::{Model, ModelConfig, Trainer, Variant};
use avtag::tags::{SchemeKind, Span, TagScheme};

const TITLES: [(&str, &str); 10] = [
    ("acme duck dog food", "duck"),
    ("barkley lamb and rice dog food", "lamb and rice"),
    ("purest salmon recipe for dogs", "salmon"),
    ("farmhouse chicken dog food 5 lb", "chicken"),
    ("wild bison & sweet potato formula", "bison & sweet potato"),
    ("kibble co beef flavor dog food", "beef"),
    ("ranch raised lamb dog food by happy paws", "ranch raised lamb"),
    ("natural turkey recipe", "turkey"),
    ("grain free venison dog food", "venison"),
    ("oven baked trout and pea biscuits", "trout and pea"),
];

fn corpus(scheme: &TagScheme) -> Vec<TaggedSequence> {
    TITLES
        .iter()
        .enumerate()
        .map(|(i, (title, value))| {
            let tokens = tokenize(title);
            let v = tokenize(value);
            let start = (0..tokens.len()).find(|&s| tokens[s..].starts_with(&v)).unwrap();
            let tags = scheme
                .encode_spans(tokens.len(), &[Span { attribute: 0, start, end: start + v.len() }])
                .unwrap();
            TaggedSequence { id: format!("m{i}"), tokens, tags }
        })
        .collect()
}

#[test]
fn opentag_memorizes_ten_titles() {
    let scheme = TagScheme::single(SchemeKind::Bioe, "flavor");
    let data = corpus(&scheme);
    let config = ModelConfig {
        variant: Variant::Opentag,
        embed_dim: 16,
        hidden: 16,
        attention_dim: 16,
        dropout: 0.0,
        batch_size: 10,
        learning_rate: 0.01,
        ..ModelConfig::default()
    };
    let mut trainer = Trainer::new(Model::for_training(config, scheme, &data).unwrap());
    let losses: Vec<f64> = (0..200).map(|_| trainer.train_epoch(&data).unwrap()).collect();
    let steps = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(steps as f64 >= 0.8 * (losses.len() - 1) as f64, "loss decreased in only {steps} of 199 steps");
    let eval = trainer.model.evaluate(&data).unwrap();
    assert_eq!(eval.micro.f1, 1.0, "{:?}", eval.micro);
}
