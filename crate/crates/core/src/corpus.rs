//! Corpus records, tokenization, train/test splitting and the synthetic
//! product-title generator.
//!
//! Records are line-delimited JSON:
//!
//! ```text
//! {"id": "p1", "field_kind": "title", "text": "Acme Duck dog food",
//!  "annotations": {"flavor": [{"value": "Duck", "start": 5, "end": 9}]}}
//! ```
//!
//! Offsets count Unicode scalar values, `end` exclusive. A record may carry
//! `"schema": "avtag.corpus/1"` and an optional `"split": "train" | "test"`
//! hint. Unknown fields are ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tags::{normalize_value, ExtractionResult, Span, TagScheme};

pub const CORPUS_SCHEMA: &str = "avtag.corpus/1";
pub const SYNTH_SCHEMA: &str = "avtag.synth/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    #[default]
    Title,
    Description,
    Bullet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSide {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedValue {
    pub value: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductProfile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub id: String,
    #[serde(default)]
    pub field_kind: FieldKind,
    pub text: String,
    #[serde(default)]
    pub annotations: BTreeMap<String, Vec<AnnotatedValue>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSide>,
}

/// A token with its character range in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

const PUNCT: [char; 6] = [',', '.', '(', ')', '&', '/'];

/// Lowercases, splits on whitespace and separates `, . ( ) & /` into their
/// own tokens. A `.` between two digits stays inside the number.
pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let flush = |out: &mut Vec<Token>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            let text: String = chars[s..end].iter().collect();
            out.push(Token {
                text: text.to_lowercase(),
                start: s,
                end,
            });
        }
    };
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            flush(&mut out, &mut start, i);
        } else if PUNCT.contains(&c) {
            let decimal = c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())
                && start.is_some();
            if decimal {
                continue;
            }
            flush(&mut out, &mut start, i);
            out.push(Token {
                text: c.to_string(),
                start: i,
                end: i + 1,
            });
        } else if start.is_none() {
            start = Some(i);
        }
    }
    flush(&mut out, &mut start, chars.len());
    out
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).into_iter().map(|t| t.text).collect()
}

/// A tokenized profile with gold spans under a scheme; the unit of
/// training and prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSequence {
    pub id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<usize>,
}

impl ProductProfile {
    /// Checks offsets and that each annotated substring equals its value.
    pub fn validate(&self) -> Result<()> {
        let chars: Vec<char> = self.text.chars().collect();
        for (attr, values) in &self.annotations {
            for v in values {
                if v.start >= v.end || v.end > chars.len() {
                    return Err(Error::Validation(format!(
                        "{}: {attr} offsets {}..{} out of bounds for {} characters",
                        self.id,
                        v.start,
                        v.end,
                        chars.len()
                    )));
                }
                let found: String = chars[v.start..v.end].iter().collect();
                if found != v.value {
                    return Err(Error::Validation(format!(
                        "{}: {attr} value {:?} does not match text {found:?} at {}..{}",
                        self.id, v.value, v.start, v.end
                    )));
                }
            }
        }
        Ok(())
    }

    /// Projects character annotations onto token spans. Annotations that
    /// cut through a token are widened to cover it, with a warning.
    pub fn token_spans(&self, scheme: &TagScheme) -> Result<(Vec<Token>, Vec<Span>)> {
        self.validate()?;
        let tokens = tokenize_with_offsets(&self.text);
        let mut spans = Vec::new();
        for (attr, values) in &self.annotations {
            let Some(attribute) = scheme.attribute_index(attr) else {
                continue;
            };
            for v in values {
                let covered: Vec<usize> = (0..tokens.len())
                    .filter(|&i| tokens[i].start < v.end && tokens[i].end > v.start)
                    .collect();
                let (Some(&first), Some(&last)) = (covered.first(), covered.last()) else {
                    return Err(Error::Validation(format!(
                        "{}: {attr} value {:?} covers no token",
                        self.id, v.value
                    )));
                };
                if tokens[first].start != v.start || tokens[last].end != v.end {
                    log::warn!(
                        "{}: {attr} value {:?} at {}..{} snapped to token boundaries {}..{}",
                        self.id,
                        v.value,
                        v.start,
                        v.end,
                        tokens[first].start,
                        tokens[last].end
                    );
                }
                let span = Span {
                    attribute,
                    start: first,
                    end: last + 1,
                };
                if !spans.contains(&span) {
                    spans.push(span);
                }
            }
        }
        spans.sort();
        Ok((tokens, spans))
    }

    pub fn to_tagged(&self, scheme: &TagScheme) -> Result<TaggedSequence> {
        let (tokens, spans) = self.token_spans(scheme)?;
        let tags = scheme
            .encode_spans(tokens.len(), &spans)
            .map_err(|e| Error::Validation(format!("{}: {e}", self.id)))?;
        Ok(TaggedSequence {
            id: self.id.clone(),
            tokens: tokens.into_iter().map(|t| t.text).collect(),
            tags,
        })
    }

    /// Gold values for full-credit evaluation, restricted to the scheme's
    /// attributes and normalized the same way predictions are.
    pub fn gold_values(&self, scheme: &TagScheme) -> Result<ExtractionResult> {
        let (tokens, spans) = self.token_spans(scheme)?;
        let texts: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        Ok(scheme.spans_to_values(&texts, &spans))
    }

    /// `(attribute, normalized value)` pairs, the unit of split overlap.
    pub fn value_keys(&self) -> BTreeSet<(String, String)> {
        self.annotations
            .iter()
            .flat_map(|(attr, values)| {
                values
                    .iter()
                    .map(move |v| (attr.clone(), normalize_value(&tokenize(&v.value))))
            })
            .collect()
    }
}

/// Reads a line-delimited corpus. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<ProductProfile>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(&line).map_err(|msg| Error::Ingestion { line: i + 1, msg })?;
        record.validate()?;
        if !ids.insert(record.id.clone()) {
            return Err(Error::Ingestion {
                line: i + 1,
                msg: format!("duplicate id {:?}", record.id),
            });
        }
        out.push(record);
    }
    Ok(out)
}

fn parse_record(line: &str) -> std::result::Result<ProductProfile, String> {
    let record: ProductProfile = serde_json::from_str(line).map_err(|e| e.to_string())?;
    match record.schema.as_deref() {
        None | Some(CORPUS_SCHEMA) => Ok(record),
        Some(other) => Err(format!("unsupported corpus schema {other:?}")),
    }
}

pub fn write_corpus(path: &Path, corpus: &[ProductProfile]) -> Result<()> {
    let mut file = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for record in corpus {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Random,
    Disjoint,
    /// Taken from the records' own `split` hints.
    Hint,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitKind::Random),
            "disjoint" => Ok(SplitKind::Disjoint),
            "hint" => Ok(SplitKind::Hint),
            other => Err(Error::Config(format!("unknown split kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub kind: SplitKind,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Largest allowed gap between the requested and achieved train fraction
/// for a disjoint split.
pub const DISJOINT_TOLERANCE: f64 = 0.10;

pub fn split(corpus: &[ProductProfile], kind: SplitKind, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if corpus.is_empty() {
        return Err(Error::contract("cannot split an empty corpus"));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
    }
    match kind {
        SplitKind::Random => {
            let mut ids: Vec<String> = corpus.iter().map(|p| p.id.clone()).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let cut = (ratio * ids.len() as f64).round() as usize;
            let test = ids.split_off(cut);
            Ok(DatasetSplit {
                kind,
                train: ids,
                test,
            })
        }
        SplitKind::Disjoint => disjoint_split(corpus, ratio),
        SplitKind::Hint => {
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for p in corpus {
                match p.split {
                    Some(SplitSide::Train) => train.push(p.id.clone()),
                    Some(SplitSide::Test) => test.push(p.id.clone()),
                    None => return Err(Error::Validation(format!("{}: no split hint", p.id))),
                }
            }
            Ok(DatasetSplit { kind, train, test })
        }
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components over the sample/value bipartite graph, assigned
/// whole (largest first) to whichever side is further below its target.
fn disjoint_split(corpus: &[ProductProfile], ratio: f64) -> Result<DatasetSplit> {
    let n = corpus.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut owner: HashMap<(String, String), usize> = HashMap::new();
    for (i, p) in corpus.iter().enumerate() {
        for key in p.value_keys() {
            match owner.get(&key) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
                None => {
                    owner.insert(key, i);
                }
            }
        }
    }
    let mut components: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        components.entry(root).or_default().push(i);
    }
    let mut components: Vec<Vec<usize>> = components.into_values().collect();
    components.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));

    let (target_train, target_test) = (ratio * n as f64, (1.0 - ratio) * n as f64);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for comp in components {
        let deficit_train = target_train - train.len() as f64;
        let deficit_test = target_test - test.len() as f64;
        if deficit_train >= deficit_test {
            train.extend(comp);
        } else {
            test.extend(comp);
        }
    }
    let achievable = train.len() as f64 / n as f64;
    if (achievable - ratio).abs() > DISJOINT_TOLERANCE || train.is_empty() || test.is_empty() {
        return Err(Error::SplitInfeasible {
            requested: ratio,
            achievable,
        });
    }
    train.sort_unstable();
    test.sort_unstable();
    let out = DatasetSplit {
        kind: SplitKind::Disjoint,
        train: train.iter().map(|&i| corpus[i].id.clone()).collect(),
        test: test.iter().map(|&i| corpus[i].id.clone()).collect(),
    };
    verify_disjoint(corpus, &out)?;
    Ok(out)
}

/// Confirms that no `(attribute, value)` pair occurs on both sides.
pub fn verify_disjoint(corpus: &[ProductProfile], split: &DatasetSplit) -> Result<()> {
    let by_id: HashMap<&str, &ProductProfile> = corpus.iter().map(|p| (p.id.as_str(), p)).collect();
    let keys = |ids: &[String]| -> BTreeSet<(String, String)> {
        ids.iter()
            .filter_map(|id| by_id.get(id.as_str()))
            .flat_map(|p| p.value_keys())
            .collect()
    };
    let train = keys(&split.train);
    if let Some(shared) = keys(&split.test).intersection(&train).next() {
        return Err(Error::Validation(format!(
            "disjoint split shares {} value {:?}",
            shared.0, shared.1
        )));
    }
    Ok(())
}

/// Selects profiles by id, in the order of `ids`.
pub fn select<'a>(corpus: &'a [ProductProfile], ids: &[String]) -> Result<Vec<&'a ProductProfile>> {
    let by_id: HashMap<&str, &ProductProfile> = corpus.iter().map(|p| (p.id.as_str(), p)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::contract(format!("unknown sample id {id:?}")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthAttribute {
    pub name: String,
    pub values: Vec<String>,
}

/// Declarative description of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "synth_schema")]
    pub schema: String,
    pub attributes: Vec<SynthAttribute>,
    /// Title templates. `<name>` is replaced by a value of that attribute;
    /// everything else is literal text.
    pub templates: Vec<String>,
    /// Filler phrases substituted for `<distractor>`.
    #[serde(default)]
    pub distractors: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of each attribute's values that only test samples use.
    #[serde(default)]
    pub owa_fraction: f64,
    /// Values are partitioned into this many groups and every sample draws
    /// all of its values from one group, which keeps value-disjoint splits
    /// feasible.
    #[serde(default = "one")]
    pub value_groups: usize,
}

fn synth_schema() -> String {
    SYNTH_SCHEMA.into()
}

fn one() -> usize {
    1
}

const BRAND_HEADS: [&str; 20] = [
    "acme", "northfield", "bluebell", "harvest", "wildpaw", "oakridge", "summit", "riverbend", "goldcrest",
    "pinecone", "brightway", "meadow", "ironwood", "silverleaf", "redstone", "sunny", "happy", "true", "prime",
    "nature's",
];
const BRAND_TAILS: [&str; 4] = ["farms", "kitchen", "pet co", "naturals"];
const FLAVOR_MODS: [&str; 12] = [
    "smoked", "roasted", "grilled", "wild", "country", "savory", "hearty", "ranch raised", "tender", "classic",
    "garden", "slow cooked",
];
const FLAVOR_HEADS: [&str; 12] = [
    "duck", "chicken", "beef", "lamb", "salmon", "turkey", "venison", "bison", "rabbit", "pork", "trout", "cod",
];
const FLAVOR_SIDES: [&str; 6] = ["rice", "barley", "sweet potato", "pumpkin", "pea", "oatmeal"];

impl SynthSpec {
    /// A dog-food title domain with 40 brands, 60 flavors and 20
    /// capacities, values of one to three tokens.
    pub fn dog_food(n_train: usize, n_test: usize, owa_fraction: f64) -> Self {
        let mut brands: Vec<String> = BRAND_HEADS.iter().map(|s| s.to_string()).collect();
        for (i, head) in BRAND_HEADS.iter().enumerate() {
            brands.push(format!("{head} {}", BRAND_TAILS[i % BRAND_TAILS.len()]));
        }
        let mut flavors = Vec::new();
        for (i, head) in FLAVOR_HEADS.iter().enumerate() {
            flavors.push(head.to_string());
            flavors.push(format!("{} {head}", FLAVOR_MODS[i]));
            flavors.push(format!("{} {head}", FLAVOR_MODS[(i + 5) % FLAVOR_MODS.len()]));
            flavors.push(format!("{head} and {}", FLAVOR_SIDES[i % FLAVOR_SIDES.len()]));
            flavors.push(format!("{head} & {}", FLAVOR_SIDES[(i + 3) % FLAVOR_SIDES.len()]));
        }
        let capacities = [
            "3", "4", "5", "6", "8", "10", "12", "15", "16", "18", "20", "24", "25", "28", "30", "32", "36", "40",
            "48", "64",
        ]
        .iter()
        .map(|c| format!("{c} lb"))
        .collect();
        let templates = [
            "<brand> <flavor> dog food , <capacity> bag",
            "<brand> dry dog food , <flavor> recipe , <capacity>",
            "<brand> grain free <flavor> formula adult dog food <capacity>",
            "<flavor> recipe dog food by <brand> ( <capacity> bag )",
            "<brand> <distractor> <flavor> dinner for dogs , <capacity>",
            "<brand> puppy food with real <flavor> , <capacity> , <distractor>",
            "<brand> senior <flavor> and vegetables , <capacity> bag",
            "<capacity> <brand> natural <flavor> kibble",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let distractors = ["12 count", "3.5 oz", "pack of 2", "6 cans", "high protein", "24 oz"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        SynthSpec {
            schema: SYNTH_SCHEMA.into(),
            attributes: vec![
                SynthAttribute {
                    name: "brand".into(),
                    values: brands,
                },
                SynthAttribute {
                    name: "flavor".into(),
                    values: flavors,
                },
                SynthAttribute {
                    name: "capacity".into(),
                    values: capacities,
                },
            ],
            templates,
            distractors,
            n_train,
            n_test,
            owa_fraction,
            value_groups: 10,
        }
    }

    pub fn attribute_names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }

    fn check(&self) -> Result<()> {
        if self.schema != SYNTH_SCHEMA {
            return Err(Error::Config(format!("unsupported synth schema {:?}", self.schema)));
        }
        if self.attributes.is_empty() || self.templates.is_empty() {
            return Err(Error::contract("synthetic spec needs attributes and templates"));
        }
        if let Some(a) = self.attributes.iter().find(|a| a.values.is_empty()) {
            return Err(Error::contract(format!("attribute {:?} has an empty vocabulary", a.name)));
        }
        if !(0.0..1.0).contains(&self.owa_fraction) {
            return Err(Error::Config(format!("owa_fraction {} outside [0, 1)", self.owa_fraction)));
        }
        if self.value_groups == 0 || self.attributes.iter().any(|a| a.values.len() < self.value_groups) {
            return Err(Error::Config("every attribute needs at least one value per group".into()));
        }
        for t in &self.templates {
            for slot in slots(t) {
                if slot != "distractor" && !self.attributes.iter().any(|a| a.name == slot) {
                    return Err(Error::Config(format!("template slot <{slot}> names no attribute")));
                }
                if slot == "distractor" && self.distractors.is_empty() {
                    return Err(Error::contract("template uses <distractor> but none are given"));
                }
            }
        }
        Ok(())
    }
}

fn slots(template: &str) -> Vec<&str> {
    template
        .split_whitespace()
        .filter_map(|w| w.strip_prefix('<').and_then(|w| w.strip_suffix('>')))
        .collect()
}

/// Value pools per attribute and group: `(shared, test-only)`.
struct Pools {
    groups: Vec<Vec<(Vec<String>, Vec<String>)>>,
}

impl Pools {
    fn build(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Self {
        let groups = spec
            .attributes
            .iter()
            .map(|a| {
                let mut values = a.values.clone();
                values.shuffle(rng);
                (0..spec.value_groups)
                    .map(|g| {
                        let mut members: Vec<String> =
                            values.iter().skip(g).step_by(spec.value_groups).cloned().collect();
                        let reserved = ((members.len() as f64) * spec.owa_fraction).round() as usize;
                        let reserved = reserved.min(members.len() - 1);
                        let test_only = members.split_off(members.len() - reserved);
                        (members, test_only)
                    })
                    .collect()
            })
            .collect();
        Pools { groups }
    }

    fn draw(&self, attr: usize, group: usize, test: bool, rng: &mut ChaCha8Rng) -> String {
        let (shared, test_only) = &self.groups[attr][group];
        let n = shared.len() + if test { test_only.len() } else { 0 };
        let i = rng.random_range(0..n);
        if i < shared.len() {
            shared[i].clone()
        } else {
            test_only[i - shared.len()].clone()
        }
    }
}

/// Fills templates with sampled values. Train samples come first with ids
/// `s00000..`, each carrying a split hint; values reserved by
/// `owa_fraction` appear only in test samples.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<Vec<ProductProfile>> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools = Pools::build(spec, &mut rng);
    let total = spec.n_train + spec.n_test;
    let mut out = Vec::with_capacity(total);
    for i in 0..total {
        let test = i >= spec.n_train;
        let group = rng.random_range(0..spec.value_groups);
        let template = &spec.templates[rng.random_range(0..spec.templates.len())];
        let mut text = String::new();
        let mut annotations: BTreeMap<String, Vec<AnnotatedValue>> = BTreeMap::new();
        for word in template.split_whitespace() {
            if !text.is_empty() {
                text.push(' ');
            }
            let slot = word.strip_prefix('<').and_then(|w| w.strip_suffix('>'));
            match slot {
                Some("distractor") => {
                    text.push_str(&spec.distractors[rng.random_range(0..spec.distractors.len())]);
                }
                Some(name) => {
                    let attr = spec.attributes.iter().position(|a| a.name == name).expect("checked slot");
                    let value = pools.draw(attr, group, test, &mut rng);
                    let start = text.chars().count();
                    text.push_str(&value);
                    let end = text.chars().count();
                    annotations
                        .entry(name.to_string())
                        .or_default()
                        .push(AnnotatedValue { value, start, end });
                }
                None => text.push_str(word),
            }
        }
        out.push(ProductProfile {
            schema: Some(CORPUS_SCHEMA.into()),
            id: format!("s{i:05}"),
            field_kind: FieldKind::Title,
            text,
            annotations,
            split: Some(if test { SplitSide::Test } else { SplitSide::Train }),
        });
    }
    Ok(out)
}

/// Values of each attribute that occur in test samples but no train sample.
pub fn unseen_test_values(corpus: &[ProductProfile]) -> BTreeSet<(String, String)> {
    let side = |s: SplitSide| -> BTreeSet<(String, String)> {
        corpus
            .iter()
            .filter(|p| p.split == Some(s))
            .flat_map(|p| p.value_keys())
            .collect()
    };
    let train = side(SplitSide::Train);
    side(SplitSide::Test).difference(&train).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tags::SchemeKind;

    fn profile(text: &str, annotations: &[(&str, &str, usize, usize)]) -> ProductProfile {
        let mut map: BTreeMap<String, Vec<AnnotatedValue>> = BTreeMap::new();
        for &(attr, value, start, end) in annotations {
            map.entry(attr.into()).or_default().push(AnnotatedValue {
                value: value.into(),
                start,
                end,
            });
        }
        ProductProfile {
            schema: None,
            id: "p".into(),
            field_kind: FieldKind::Title,
            text: text.into(),
            annotations: map,
            split: None,
        }
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("PACK OF 5 - CESAR"), ["pack", "of", "5", "-", "cesar"]);
        assert_eq!(tokenize("food, 3.5 oz."), ["food", ",", "3.5", "oz", "."]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("(12 count)&more/less"), ["(", "12", "count", ")", "&", "more", "/", "less"]);
        assert_eq!(tokenize("v1.2.x"), ["v1.2", ".", "x"]);
        assert_eq!(tokenize(".5"), [".", "5"]);
    }

    #[test]
    fn tokenizer_offsets_are_characters() {
        let toks = tokenize_with_offsets("Café, duck");
        assert_eq!(toks[0].text, "café");
        assert_eq!((toks[0].start, toks[0].end), (0, 4));
        assert_eq!((toks[2].start, toks[2].end), (6, 10));
    }

    #[test]
    fn projection_of_one_annotation() {
        let p = profile("Acme Smoked Duck dog food", &[("flavor", "Smoked Duck", 5, 16)]);
        let scheme = TagScheme::single(SchemeKind::Bioe, "flavor");
        let (_, spans) = p.token_spans(&scheme).unwrap();
        assert_eq!(
            spans,
            [Span {
                attribute: 0,
                start: 1,
                end: 3
            }]
        );
        let t = p.to_tagged(&scheme).unwrap();
        assert_eq!(scheme.parse_tags(&["O", "B", "E", "O", "O"]).unwrap(), t.tags);
        let gold = p.gold_values(&scheme).unwrap();
        assert!(gold["flavor"].contains("smoked duck"));
    }

    #[test]
    fn misaligned_annotation_snaps() {
        let p = profile("Acme Duckling food", &[("flavor", "Duck", 5, 9)]);
        let scheme = TagScheme::single(SchemeKind::Bioe, "flavor");
        let (_, spans) = p.token_spans(&scheme).unwrap();
        assert_eq!((spans[0].start, spans[0].end), (1, 2));
    }

    #[test]
    fn offset_value_mismatch_is_rejected() {
        let p = profile("Acme Duck food", &[("flavor", "Lamb", 5, 9)]);
        assert!(matches!(p.validate(), Err(Error::Validation(_))));
        let p = profile("Acme", &[("flavor", "Acme", 0, 10)]);
        assert!(matches!(p.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
        let good = r#"{"id":"a","field_kind":"title","text":"duck food","annotations":{"flavor":[{"value":"duck","start":0,"end":4}]},"extra":1}"#;
        std::fs::write(&path, format!("{good}\n\n{{not json\n")).unwrap();
        match load_corpus(&path) {
            Err(Error::Ingestion { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, format!("{good}\n")).unwrap();
        let c = load_corpus(&path).unwrap();
        assert_eq!(c[0].annotations["flavor"][0].value, "duck");
        let schema = r#"{"schema":"avtag.corpus/9","id":"a","text":"x"}"#;
        std::fs::write(&path, schema).unwrap();
        assert!(matches!(load_corpus(&path), Err(Error::Ingestion { line: 1, .. })));
    }

    #[test]
    fn corpus_file_round_trip() {
        let spec = SynthSpec::dog_food(5, 5, 0.2);
        let corpus = generate_synthetic(&spec, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&path, &corpus).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), corpus);
    }

    fn shared_value_corpus(values: &[&str]) -> Vec<ProductProfile> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut p = profile(&format!("{v} food"), &[("flavor", v, 0, v.chars().count())]);
                p.id = format!("p{i}");
                p
            })
            .collect()
    }

    #[test]
    fn single_component_cannot_split() {
        let c = shared_value_corpus(&["v", "v", "v", "v"]);
        match split(&c, SplitKind::Disjoint, 0.5, 0) {
            Err(Error::SplitInfeasible { achievable, .. }) => assert_eq!(achievable, 1.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn equal_components_go_to_opposite_sides() {
        let c = shared_value_corpus(&["a", "b", "a", "b"]);
        let s = split(&c, SplitKind::Disjoint, 0.5, 0).unwrap();
        assert_eq!(s.train, ["p0", "p2"]);
        assert_eq!(s.test, ["p1", "p3"]);
        verify_disjoint(&c, &s).unwrap();
    }

    #[test]
    fn random_split_is_seeded() {
        let names: Vec<String> = (0..100).map(|i| format!("v{i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let c = shared_value_corpus(&refs);
        let a = split(&c, SplitKind::Random, 0.5, 7).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (50, 50));
        assert_eq!(a, split(&c, SplitKind::Random, 0.5, 7).unwrap());
        assert_ne!(a, split(&c, SplitKind::Random, 0.5, 8).unwrap());
        assert!(split(&[], SplitKind::Random, 0.5, 0).is_err());
    }

    #[test]
    fn template_construction() {
        let spec = SynthSpec {
            schema: SYNTH_SCHEMA.into(),
            attributes: vec![
                SynthAttribute {
                    name: "brand".into(),
                    values: vec!["acme".into()],
                },
                SynthAttribute {
                    name: "flavor".into(),
                    values: vec!["smoked duck".into()],
                },
                SynthAttribute {
                    name: "capacity".into(),
                    values: vec!["12".into()],
                },
            ],
            templates: vec!["<brand> <flavor> dog food ( <capacity> count )".into()],
            distractors: vec![],
            n_train: 1,
            n_test: 0,
            owa_fraction: 0.0,
            value_groups: 1,
        };
        let c = generate_synthetic(&spec, 0).unwrap();
        assert_eq!(c[0].text, "acme smoked duck dog food ( 12 count )");
        let scheme = TagScheme::new(SchemeKind::Bioe, spec.attribute_names()).unwrap();
        let (_, spans) = c[0].token_spans(&scheme).unwrap();
        assert_eq!(spans.len(), 3);
        assert_eq!(c[0].annotations["capacity"][0].start, 28);
    }

    #[test]
    fn synthetic_is_deterministic_and_reserves_values() {
        let spec = SynthSpec::dog_food(300, 300, 0.5);
        assert_eq!(spec.attributes[0].values.len(), 40);
        assert_eq!(spec.attributes[1].values.len(), 60);
        assert_eq!(spec.attributes[2].values.len(), 20);
        let a = generate_synthetic(&spec, 11).unwrap();
        assert_eq!(a, generate_synthetic(&spec, 11).unwrap());
        let train: BTreeSet<_> = a
            .iter()
            .filter(|p| p.split == Some(SplitSide::Train))
            .flat_map(|p| p.value_keys())
            .collect();
        let test: BTreeSet<_> = a
            .iter()
            .filter(|p| p.split == Some(SplitSide::Test))
            .flat_map(|p| p.value_keys())
            .collect();
        let pools = Pools::build(&spec, &mut ChaCha8Rng::seed_from_u64(11));
        for (ai, attr) in spec.attributes.iter().enumerate() {
            for (_, reserved) in &pools.groups[ai] {
                for v in reserved {
                    assert!(!train.contains(&(attr.name.clone(), v.clone())));
                }
            }
        }
        assert!(test.difference(&train).count() > 0);
        let scheme = TagScheme::new(SchemeKind::Bioe, spec.attribute_names()).unwrap();
        for p in &a {
            p.to_tagged(&scheme).unwrap();
        }
    }

    #[test]
    fn empty_vocabulary_is_rejected() {
        let mut spec = SynthSpec::dog_food(1, 1, 0.0);
        spec.attributes[0].values.clear();
        assert!(matches!(generate_synthetic(&spec, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn grouped_synthetic_corpus_splits_disjointly() {
        let c = generate_synthetic(&SynthSpec::dog_food(250, 250, 0.2), 5).unwrap();
        let s = split(&c, SplitKind::Disjoint, 0.5, 0).unwrap();
        assert!((s.train.len() as f64 / 500.0 - 0.5).abs() <= DISJOINT_TOLERANCE);
    }
}
