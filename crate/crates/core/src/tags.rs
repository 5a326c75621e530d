//! Tagging schemes, span encoding/decoding and full-credit evaluation.
//!
//! The tag set for `a` attributes under a scheme with `s` positional tags
//! is one shared `O` (index 0) followed by a block of `s - 1` tags per
//! attribute, so `|Y| = a * (s - 1) + 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SchemeKind {
    Bioe,
    Ubioe,
    Iob,
}

impl SchemeKind {
    /// Positional tags of one attribute block, in index order.
    pub fn positions(self) -> &'static [Position] {
        match self {
            SchemeKind::Bioe => &[Position::B, Position::I, Position::E],
            SchemeKind::Ubioe => &[Position::U, Position::B, Position::I, Position::E],
            SchemeKind::Iob => &[Position::B, Position::I],
        }
    }

    /// Number of distinct positional tags including `O`.
    pub fn size(self) -> usize {
        self.positions().len() + 1
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeKind::Bioe => "BIOE",
            SchemeKind::Ubioe => "UBIOE",
            SchemeKind::Iob => "IOB",
        })
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BIOE" => Ok(SchemeKind::Bioe),
            "UBIOE" => Ok(SchemeKind::Ubioe),
            "IOB" | "BIO" => Ok(SchemeKind::Iob),
            other => Err(Error::Config(format!("unknown tagging scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    B,
    I,
    E,
    U,
}

impl Position {
    fn symbol(self) -> &'static str {
        match self {
            Position::B => "B",
            Position::I => "I",
            Position::E => "E",
            Position::U => "U",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Attr { attribute: usize, position: Position },
}

/// Token range `[start, end)` holding a value of `attribute`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub attribute: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagScheme {
    pub kind: SchemeKind,
    pub attributes: Vec<String>,
    /// Under BIOE, a `B` not followed by `I`/`E` counts as a one-token value.
    #[serde(default = "default_true")]
    pub bare_b_is_value: bool,
}

fn default_true() -> bool {
    true
}

/// Per attribute, the set of extracted value strings.
pub type ExtractionResult = BTreeMap<String, BTreeSet<String>>;

/// Lowercased, single-space joined value string.
pub fn normalize_value<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(|t| t.as_ref().to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

impl TagScheme {
    pub fn new(kind: SchemeKind, attributes: Vec<String>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Config("a tagging scheme needs at least one attribute".into()));
        }
        let unique: BTreeSet<&String> = attributes.iter().collect();
        if unique.len() != attributes.len() {
            return Err(Error::Config("duplicate attribute names".into()));
        }
        Ok(TagScheme {
            kind,
            attributes,
            bare_b_is_value: true,
        })
    }

    pub fn single(kind: SchemeKind, attribute: &str) -> Self {
        TagScheme::new(kind, vec![attribute.to_string()]).unwrap()
    }

    pub fn num_tags(&self) -> usize {
        self.attributes.len() * self.kind.positions().len() + 1
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }

    pub fn tag(&self, index: usize) -> Tag {
        assert!(index < self.num_tags(), "tag index out of range");
        if index == 0 {
            return Tag::Outside;
        }
        let per = self.kind.positions().len();
        Tag::Attr {
            attribute: (index - 1) / per,
            position: self.kind.positions()[(index - 1) % per],
        }
    }

    pub fn index(&self, tag: Tag) -> Option<usize> {
        match tag {
            Tag::Outside => Some(0),
            Tag::Attr { attribute, position } => {
                let per = self.kind.positions().len();
                let p = self.kind.positions().iter().position(|&q| q == position)?;
                (attribute < self.attributes.len()).then_some(1 + attribute * per + p)
            }
        }
    }

    fn index_of(&self, attribute: usize, position: Position) -> usize {
        self.index(Tag::Attr { attribute, position }).expect("position belongs to scheme")
    }

    /// `B`, `I`, `O`, `E`, `U` for a single attribute; `flavor-B` style
    /// otherwise.
    pub fn tag_name(&self, index: usize) -> String {
        match self.tag(index) {
            Tag::Outside => "O".into(),
            Tag::Attr { attribute, position } if self.attributes.len() == 1 => {
                let _ = attribute;
                position.symbol().into()
            }
            Tag::Attr { attribute, position } => format!("{}-{}", self.attributes[attribute], position.symbol()),
        }
    }

    pub fn tag_names(&self) -> Vec<String> {
        (0..self.num_tags()).map(|i| self.tag_name(i)).collect()
    }

    /// Parses a tag symbol. Accepts the bare form for single-attribute
    /// schemes and `attr-X` / `X-attr` forms always.
    pub fn parse_tag(&self, symbol: &str) -> Option<usize> {
        if symbol == "O" {
            return Some(0);
        }
        let by_pos = |p: &str| self.kind.positions().iter().copied().find(|q| q.symbol() == p);
        if self.attributes.len() == 1 {
            if let Some(p) = by_pos(symbol) {
                return Some(self.index_of(0, p));
            }
        }
        for (a, name) in self.attributes.iter().enumerate() {
            let candidates = [
                symbol.strip_prefix(name.as_str()).and_then(|r| r.strip_prefix('-')),
                symbol.strip_suffix(name.as_str()).and_then(|r| r.strip_suffix('-')),
            ];
            for p in candidates.into_iter().flatten() {
                if let Some(p) = by_pos(p) {
                    return Some(self.index_of(a, p));
                }
            }
        }
        None
    }

    pub fn parse_tags<S: AsRef<str>>(&self, symbols: &[S]) -> std::result::Result<Vec<usize>, usize> {
        symbols
            .iter()
            .enumerate()
            .map(|(i, s)| self.parse_tag(s.as_ref()).ok_or(i))
            .collect()
    }

    /// Encodes gold spans as a tag sequence of length `n_tokens`.
    pub fn encode_spans(&self, n_tokens: usize, spans: &[Span]) -> Result<Vec<usize>> {
        let mut tags = vec![0usize; n_tokens];
        let mut taken = vec![false; n_tokens];
        for s in spans {
            if s.start >= s.end || s.end > n_tokens {
                return Err(Error::contract(format!("span {s:?} out of bounds for {n_tokens} tokens")));
            }
            if s.attribute >= self.attributes.len() {
                return Err(Error::contract(format!("span attribute {} not in scheme", s.attribute)));
            }
            if taken[s.start..s.end].iter().any(|&t| t) {
                return Err(Error::contract(format!("span {s:?} overlaps another span")));
            }
            taken[s.start..s.end].fill(true);
            let a = s.attribute;
            let len = s.end - s.start;
            match self.kind {
                SchemeKind::Bioe | SchemeKind::Ubioe => {
                    if len == 1 {
                        let p = if self.kind == SchemeKind::Ubioe { Position::U } else { Position::B };
                        tags[s.start] = self.index_of(a, p);
                    } else {
                        tags[s.start] = self.index_of(a, Position::B);
                        for t in &mut tags[s.start + 1..s.end - 1] {
                            *t = self.index_of(a, Position::I);
                        }
                        tags[s.end - 1] = self.index_of(a, Position::E);
                    }
                }
                SchemeKind::Iob => {
                    tags[s.start] = self.index_of(a, Position::B);
                    for t in &mut tags[s.start + 1..s.end] {
                        *t = self.index_of(a, Position::I);
                    }
                }
            }
        }
        Ok(tags)
    }

    /// Conservative decoding of a possibly ill-formed tag sequence into
    /// non-overlapping well-formed spans. Never fails.
    ///
    /// * BIOE: `B I* E`, and a bare `B` when `bare_b_is_value`.
    /// * UBIOE: `U` or `B I* E`.
    /// * IOB: `B I*`.
    ///
    /// A tag that breaks the current pattern closes it (emitting it only if
    /// already complete); orphan `I`/`E` tags are dropped. Out-of-range tag
    /// indices act like `O`.
    pub fn decode_spans(&self, tags: &[usize]) -> Vec<Span> {
        // (attribute, start, saw_inside)
        let mut open: Option<(usize, usize, bool)> = None;
        let mut spans = Vec::new();
        let bare_b = self.kind == SchemeKind::Bioe && self.bare_b_is_value;
        let iob = self.kind == SchemeKind::Iob;

        let close = |open: &mut Option<(usize, usize, bool)>, spans: &mut Vec<Span>, end: usize| {
            if let Some((attribute, start, inside)) = open.take() {
                if iob || (bare_b && !inside) {
                    spans.push(Span { attribute, start, end });
                }
            }
        };

        for (t, &idx) in tags.iter().enumerate() {
            let tag = if idx < self.num_tags() { self.tag(idx) } else { Tag::Outside };
            match tag {
                Tag::Outside => close(&mut open, &mut spans, t),
                Tag::Attr { attribute, position } => match position {
                    Position::B => {
                        close(&mut open, &mut spans, t);
                        open = Some((attribute, t, false));
                    }
                    Position::U => {
                        close(&mut open, &mut spans, t);
                        spans.push(Span {
                            attribute,
                            start: t,
                            end: t + 1,
                        });
                    }
                    Position::I => match open {
                        Some((a, s, _)) if a == attribute => open = Some((a, s, true)),
                        _ => close(&mut open, &mut spans, t),
                    },
                    Position::E => match open.take() {
                        Some((a, start, _)) if a == attribute => spans.push(Span { attribute, start, end: t + 1 }),
                        other => {
                            open = other;
                            close(&mut open, &mut spans, t);
                        }
                    },
                },
            }
        }
        close(&mut open, &mut spans, tags.len());
        spans
    }

    pub fn spans_to_values<S: AsRef<str>>(&self, tokens: &[S], spans: &[Span]) -> ExtractionResult {
        let mut out: ExtractionResult = BTreeMap::new();
        for s in spans {
            let end = s.end.min(tokens.len());
            if s.start >= end {
                continue;
            }
            out.entry(self.attributes[s.attribute].clone())
                .or_default()
                .insert(normalize_value(&tokens[s.start..end]));
        }
        out
    }

    pub fn decode_tags<S: AsRef<str>>(&self, tokens: &[S], tags: &[usize]) -> ExtractionResult {
        self.spans_to_values(tokens, &self.decode_spans(tags))
    }

    /// Which transitions a well-formed sequence may take, over the CRF grid
    /// `(K+2) x (K+2)` with START at index `K` and STOP at `K+1`.
    pub fn allowed_transitions(&self) -> Vec<bool> {
        let k = self.num_tags();
        let k2 = k + 2;
        let (start, stop) = (k, k + 1);
        let mut allowed = vec![false; k2 * k2];
        // state "inside an unfinished span of attribute a" vs "free"
        let needs_continuation = |idx: usize| -> Option<usize> {
            if idx >= k {
                return None;
            }
            match self.tag(idx) {
                Tag::Attr { attribute, position: Position::I } if self.kind != SchemeKind::Iob => Some(attribute),
                Tag::Attr { attribute, position: Position::B } if self.kind == SchemeKind::Ubioe => Some(attribute),
                Tag::Attr { attribute, position: Position::B } if self.kind == SchemeKind::Bioe && !self.bare_b_is_value => {
                    Some(attribute)
                }
                _ => None,
            }
        };
        let can_continue_from = |prev: usize, next: usize| -> bool {
            // next is I or E: needs an open span of the same attribute
            let Tag::Attr { attribute, position } = self.tag(next) else { return true };
            match position {
                Position::B | Position::U => true,
                Position::I | Position::E => {
                    if prev >= k {
                        return false;
                    }
                    match self.tag(prev) {
                        Tag::Attr { attribute: a, position: p } => {
                            a == attribute && matches!(p, Position::B | Position::I)
                        }
                        Tag::Outside => false,
                    }
                }
            }
        };
        for prev in (0..k).chain([start]) {
            for next in (0..k).chain([stop]) {
                if prev == start && next == stop {
                    continue;
                }
                let ok = if next == stop {
                    needs_continuation(prev).is_none()
                } else {
                    let pending = needs_continuation(prev);
                    let next_tag = self.tag(next);
                    let continues = matches!(next_tag, Tag::Attr { position: Position::I | Position::E, .. });
                    match pending {
                        Some(_) => continues && can_continue_from(prev, next),
                        None => {
                            if continues {
                                // IOB I may follow B or I of the same attribute;
                                // BIOE E/I may follow a bare-capable B
                                can_continue_from(prev, next)
                            } else {
                                true
                            }
                        }
                    }
                };
                allowed[prev * k2 + next] = ok;
            }
        }
        allowed
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            tp,
            predicted,
            gold,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_attribute: BTreeMap<String, Prf>,
    pub micro: Prf,
}

/// Full-credit evaluation: a predicted value counts only if it matches a
/// gold value of the same attribute on the same sample exactly.
pub fn evaluate(
    predicted: &BTreeMap<String, ExtractionResult>,
    gold: &BTreeMap<String, ExtractionResult>,
) -> Result<Evaluation> {
    if predicted.len() != gold.len() || predicted.keys().zip(gold.keys()).any(|(a, b)| a != b) {
        return Err(Error::contract("predicted and gold sample ids differ"));
    }
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    let empty = BTreeSet::new();
    for (id, g) in gold {
        let p = &predicted[id];
        let attrs: BTreeSet<&String> = p.keys().chain(g.keys()).collect();
        for attr in attrs {
            let pv = p.get(attr).unwrap_or(&empty);
            let gv = g.get(attr).unwrap_or(&empty);
            let c = counts.entry(attr.clone()).or_default();
            c.0 += pv.intersection(gv).count();
            c.1 += pv.len();
            c.2 += gv.len();
        }
    }
    let mut total = (0, 0, 0);
    let per_attribute = counts
        .into_iter()
        .map(|(attr, (tp, np, ng))| {
            total.0 += tp;
            total.1 += np;
            total.2 += ng;
            (attr, Prf::from_counts(tp, np, ng))
        })
        .collect();
    Ok(Evaluation {
        per_attribute,
        micro: Prf::from_counts(total.0, total.1, total.2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SENTENCE: [&str; 9] = ["duck", ",", "fillet", "mignon", "and", "ranch", "raised", "lamb", "flavor"];

    fn flavor_spans() -> Vec<Span> {
        [(0, 1), (2, 4), (5, 8)]
            .iter()
            .map(|&(start, end)| Span { attribute: 0, start, end })
            .collect()
    }

    fn names(scheme: &TagScheme, tags: &[usize]) -> String {
        tags.iter().map(|&t| scheme.tag_name(t)).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn worked_example_rows() {
        for (kind, row) in [
            (SchemeKind::Bioe, "B O B E O B I E O"),
            (SchemeKind::Ubioe, "U O B E O B I E O"),
            (SchemeKind::Iob, "B O B I O B I I O"),
        ] {
            let s = TagScheme::single(kind, "flavor");
            let tags = s.encode_spans(SENTENCE.len(), &flavor_spans()).unwrap();
            assert_eq!(names(&s, &tags), row, "{kind}");
        }
    }

    #[test]
    fn worked_example_decodes_three_values() {
        let s = TagScheme::single(SchemeKind::Bioe, "flavor");
        let tags = s.parse_tags(&"B O B E O B I E O".split(' ').collect::<Vec<_>>()).unwrap();
        let out = s.decode_tags(&SENTENCE, &tags);
        let expect: BTreeSet<String> = ["duck", "fillet mignon", "ranch raised lamb"].iter().map(|s| s.to_string()).collect();
        assert_eq!(out["flavor"], expect);
    }

    #[test]
    fn tag_set_sizes() {
        let three = vec!["brand".into(), "flavor".into(), "capacity".into()];
        assert_eq!(TagScheme::new(SchemeKind::Bioe, three.clone()).unwrap().num_tags(), 10);
        assert_eq!(TagScheme::new(SchemeKind::Ubioe, three.clone()).unwrap().num_tags(), 13);
        assert_eq!(TagScheme::new(SchemeKind::Iob, three).unwrap().num_tags(), 7);
        assert_eq!(TagScheme::single(SchemeKind::Bioe, "x").num_tags(), 4);
    }

    #[test]
    fn all_outside_decodes_to_nothing() {
        let s = TagScheme::single(SchemeKind::Bioe, "flavor");
        assert!(s.decode_tags(&SENTENCE[..4], &[0, 0, 0, 0]).is_empty());
    }

    #[test]
    fn orphans_are_dropped() {
        let s = TagScheme::single(SchemeKind::Bioe, "flavor");
        let tags = s.parse_tags(&["B", "O", "I", "E"]).unwrap();
        let out = s.decode_tags(&["t0", "t1", "t2", "t3"], &tags);
        assert_eq!(out["flavor"], BTreeSet::from(["t0".to_string()]));
    }

    #[test]
    fn unfinished_inside_run_is_aborted() {
        let s = TagScheme::single(SchemeKind::Bioe, "f");
        let tags = s.parse_tags(&["B", "I", "O"]).unwrap();
        assert!(s.decode_spans(&tags).is_empty());
        let u = TagScheme::single(SchemeKind::Ubioe, "f");
        let tags = u.parse_tags(&["B", "O", "U"]).unwrap();
        assert_eq!(u.decode_spans(&tags), vec![Span { attribute: 0, start: 2, end: 3 }]);
    }

    #[test]
    fn bare_b_flag_off() {
        let mut s = TagScheme::single(SchemeKind::Bioe, "f");
        s.bare_b_is_value = false;
        let tags = s.parse_tags(&["B", "O", "B", "E"]).unwrap();
        assert_eq!(s.decode_spans(&tags), vec![Span { attribute: 0, start: 2, end: 4 }]);
    }

    #[test]
    fn attribute_switch_closes_span() {
        let s = TagScheme::new(SchemeKind::Bioe, vec!["brand".into(), "flavor".into()]).unwrap();
        let tags = s.parse_tags(&["brand-B", "flavor-I", "flavor-E"]).unwrap();
        assert_eq!(s.decode_spans(&tags), vec![Span { attribute: 0, start: 0, end: 1 }]);
    }

    #[test]
    fn overlapping_spans_rejected() {
        let s = TagScheme::single(SchemeKind::Bioe, "f");
        let spans = [Span { attribute: 0, start: 0, end: 2 }, Span { attribute: 0, start: 1, end: 3 }];
        assert!(s.encode_spans(4, &spans).is_err());
    }

    #[test]
    fn parse_rejects_unknown_symbols() {
        let s = TagScheme::single(SchemeKind::Bioe, "flavor");
        assert_eq!(s.parse_tags(&["B", "Q", "E"]), Err(1));
        assert_eq!(s.parse_tag("U"), None);
        assert_eq!(s.parse_tag("flavor-E"), s.parse_tag("E"));
        assert_eq!(s.parse_tag("E-flavor"), s.parse_tag("E"));
    }

    fn result(pairs: &[(&str, &[&str])]) -> ExtractionResult {
        pairs
            .iter()
            .map(|(a, vs)| (a.to_string(), vs.iter().map(|v| v.to_string()).collect()))
            .collect()
    }

    #[test]
    fn evaluation_arithmetic() {
        let pred = BTreeMap::from([("s1".to_string(), result(&[("f", &["a", "b"])]))]);
        let gold = BTreeMap::from([("s1".to_string(), result(&[("f", &["b", "c"])]))]);
        let e = evaluate(&pred, &gold).unwrap();
        assert_eq!((e.micro.precision, e.micro.recall, e.micro.f1), (0.5, 0.5, 0.5));
        let e = evaluate(&gold, &gold).unwrap();
        assert_eq!((e.micro.precision, e.micro.recall, e.micro.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn partial_value_gets_no_credit() {
        let pred = BTreeMap::from([("s".to_string(), result(&[("f", &["ranch raised"])]))]);
        let gold = BTreeMap::from([("s".to_string(), result(&[("f", &["ranch raised lamb"])]))]);
        let e = evaluate(&pred, &gold).unwrap();
        assert_eq!(e.micro.tp, 0);
        assert_eq!(e.micro.f1, 0.0);
    }

    #[test]
    fn empty_denominators_are_zero() {
        let pred = BTreeMap::from([("s".to_string(), result(&[]))]);
        let e = evaluate(&pred, &pred).unwrap();
        assert_eq!(e.micro, Prf::from_counts(0, 0, 0));
    }

    #[test]
    fn mismatched_ids_rejected() {
        let a = BTreeMap::from([("s1".to_string(), result(&[]))]);
        let b = BTreeMap::from([("s2".to_string(), result(&[]))]);
        assert!(evaluate(&a, &b).is_err());
    }

    #[test]
    fn gold_sequences_respect_allowed_transitions() {
        for kind in [SchemeKind::Bioe, SchemeKind::Ubioe, SchemeKind::Iob] {
            let s = TagScheme::single(kind, "flavor");
            let tags = s.encode_spans(SENTENCE.len(), &flavor_spans()).unwrap();
            let allowed = s.allowed_transitions();
            let k = s.num_tags();
            let mut prev = k;
            for &t in &tags {
                assert!(allowed[prev * (k + 2) + t], "{kind}: {prev} -> {t}");
                prev = t;
            }
            assert!(allowed[prev * (k + 2) + k + 1]);
            // O -> I is never allowed
            let i = s.parse_tag("I").unwrap();
            assert!(!allowed[i]);
        }
    }
}
