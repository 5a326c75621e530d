//! Vocabulary and word-embedding table.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Range of the uniform initializer for rows without a pretrained vector.
pub const OOV_INIT_RANGE: f64 = 0.25;

/// Dense token index. Index 0 is padding and index 1 the unknown token;
/// other tokens are numbered in order of first appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    lowercase: bool,
    index: HashMap<String, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    lowercase: bool,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_tokens(r.tokens, r.lowercase)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            tokens: v.tokens,
            lowercase: v.lowercase,
        }
    }
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize, lowercase: bool) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::contract("cannot build a vocabulary from an empty corpus"));
        }
        let fold = |t: &str| if lowercase { t.to_lowercase() } else { t.to_string() };
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut order = Vec::new();
        for sentence in corpus {
            for tok in sentence {
                let t = fold(tok.as_ref());
                let c = counts.entry(t.clone()).or_insert(0);
                if *c == 0 {
                    order.push(t);
                }
                *c += 1;
            }
        }
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(
            order
                .into_iter()
                .filter(|t| counts[t] >= min_count.max(1) && t != PAD_TOKEN && t != UNK_TOKEN),
        );
        Ok(Self::from_tokens(tokens, lowercase))
    }

    /// Rebuilds a vocabulary from its token list (as stored in checkpoints).
    pub fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            lowercase,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Index of `token`, or [`UNK`] if it is not in the vocabulary.
    pub fn lookup(&self, token: &str) -> usize {
        let hit = if self.lowercase {
            self.index.get(&token.to_lowercase())
        } else {
            self.index.get(token)
        };
        hit.copied().unwrap_or(UNK)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t.as_ref())).collect()
    }
}

/// A `|V| x d` trainable matrix whose padding row is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Tensor,
}

impl EmbeddingTable {
    /// Uniform `[-0.25, 0.25]` rows with a zero padding row.
    pub fn random<R: Rng>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let mut weights = Tensor::zeros(vocab_size, dim);
        for r in 0..vocab_size {
            for x in weights.row_mut(r) {
                *x = rng.random_range(-OOV_INIT_RANGE..=OOV_INIT_RANGE);
            }
        }
        weights.row_mut(PAD).fill(0.0);
        EmbeddingTable { weights }
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    /// Initializes from a whitespace-separated text file of
    /// `token v1 ... vd` lines. Tokens absent from the file keep their
    /// random initialization.
    pub fn load_pretrained<R: Rng>(path: &Path, vocab: &Vocabulary, dim: usize, rng: &mut R) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = Self::random(vocab.len(), dim, rng);
        let mut seen = vec![false; vocab.len()];
        let mut file_dim: Option<usize> = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let values: Vec<&str> = fields.collect();
            // word2vec-style "<count> <dim>" header
            if lineno == 1 && values.len() == 1 && token.parse::<u64>().is_ok() && values[0].parse::<u64>().is_ok() {
                continue;
            }
            match file_dim {
                None => {
                    if values.len() != dim {
                        return Err(Error::Config(format!(
                            "{}: vectors have dimension {}, configured dimension is {dim}",
                            path.display(),
                            values.len()
                        )));
                    }
                    file_dim = Some(values.len());
                }
                Some(d) if d != values.len() => {
                    return Err(Error::Ingestion {
                        line: lineno,
                        msg: format!("expected {d} values, found {}", values.len()),
                    });
                }
                Some(_) => {}
            }
            let parsed = values
                .iter()
                .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::Ingestion {
                    line: lineno,
                    msg: "unparseable float".into(),
                })?;
            let idx = vocab.lookup(token);
            if idx == UNK || idx == PAD || seen[idx] {
                continue;
            }
            seen[idx] = true;
            table.weights.row_mut(idx).copy_from_slice(&parsed);
        }
        Ok(table)
    }
}

/// Gathers embedding rows for `indices`. The padding row receives no
/// gradient.
pub fn lookup(g: &mut Graph, table: Var, indices: &[usize]) -> Result<Var> {
    let rows = g.value(table).rows();
    if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
        return Err(Error::contract(format!("token index {bad} outside vocabulary of {rows}")));
    }
    g.row_select_frozen(table, indices, Some(PAD))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn corpus() -> Vec<Vec<&'static str>> {
        vec![vec!["a", "b", "a"]]
    }

    #[test]
    fn build_min_count_one() {
        let v = Vocabulary::build(&corpus(), 1, true).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "a", "b"]);
    }

    #[test]
    fn build_min_count_two_drops_rare_tokens() {
        let v = Vocabulary::build(&corpus(), 2, true).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.lookup("b"), UNK);
        assert_eq!(v.lookup("a"), 2);
    }

    #[test]
    fn thousand_distinct_tokens() {
        let toks: Vec<String> = (0..1000).map(|i| format!("t{i}")).collect();
        let v = Vocabulary::build(&[toks], 1, true).unwrap();
        assert_eq!(v.len(), 1002);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(Vocabulary::build(&empty, 1, true).is_err());
    }

    #[test]
    fn case_folding() {
        let v = Vocabulary::build(&[vec!["Dog"]], 1, true).unwrap();
        assert_eq!(v.lookup("DOG"), 2);
        let v = Vocabulary::build(&[vec!["Dog"]], 1, false).unwrap();
        assert_eq!(v.lookup("dog"), UNK);
    }

    #[test]
    fn serde_round_trip_keeps_lookup() {
        let v = Vocabulary::build(&corpus(), 1, true).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back.lookup("b"), 3);
    }

    fn write_vectors(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn pretrained_rows_are_copied() {
        let v = Vocabulary::build(&[vec!["dog", "cat"]], 1, true).unwrap();
        let vals: Vec<String> = (0..100).map(|i| format!("{}", i as f64 * 0.01)).collect();
        let f = write_vectors(&[format!("dog {}", vals.join(" "))]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = EmbeddingTable::load_pretrained(f.path(), &v, 100, &mut rng).unwrap();
        let dog = v.lookup("dog");
        let expect: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
        assert_eq!(t.weights.row(dog), expect.as_slice());
        assert!(t.weights.row(PAD).iter().all(|&x| x == 0.0));
        // same seed, same file: bit-identical
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t2 = EmbeddingTable::load_pretrained(f.path(), &v, 100, &mut rng).unwrap();
        assert_eq!(t, t2);
        let cat = v.lookup("cat");
        assert!(t.weights.row(cat).iter().all(|x| x.abs() <= OOV_INIT_RANGE));
    }

    #[test]
    fn pretrained_dimension_mismatch_is_config_error() {
        let v = Vocabulary::build(&[vec!["dog"]], 1, true).unwrap();
        let vals = vec!["0.5"; 50].join(" ");
        let f = write_vectors(&[format!("dog {vals}")]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            EmbeddingTable::load_pretrained(f.path(), &v, 100, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pretrained_malformed_line_reports_line_number() {
        let v = Vocabulary::build(&[vec!["dog"]], 1, true).unwrap();
        let f = write_vectors(&["dog 0.1 0.2".into(), "cat 0.1".into()]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match EmbeddingTable::load_pretrained(f.path(), &v, 2, &mut rng) {
            Err(Error::Ingestion { line, .. }) => assert_eq!(line, 2),
            other => panic!("{:?}", other.map(|_| ())),
        }
        let f = write_vectors(&["dog 0.1 zz".into()]);
        assert!(matches!(
            EmbeddingTable::load_pretrained(f.path(), &v, 2, &mut rng),
            Err(Error::Ingestion { line: 1, .. })
        ));
    }

    #[test]
    fn lookup_pad_and_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = EmbeddingTable::random(5, 3, &mut rng);
        let mut g = Graph::default();
        let t = g.input(table.weights.clone());
        let rows = lookup(&mut g, t, &[PAD, 3, 3]).unwrap();
        assert_eq!(g.value(rows).row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(g.value(rows).row(1), g.value(rows).row(2));
        let s = g.sum(rows).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(t).unwrap().row(3), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(t).unwrap().row(PAD), &[0.0, 0.0, 0.0]);
        assert!(lookup(&mut g, t, &[5]).is_err());
    }

    #[test]
    fn sentence_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = EmbeddingTable::random(10, 100, &mut rng);
        let mut g = Graph::default();
        let t = g.input(table.weights);
        let rows = lookup(&mut g, t, &[2, 3, 4, 5, 6, 7, 8]).unwrap();
        assert_eq!(g.value(rows).shape(), &[7, 100]);
    }
}
