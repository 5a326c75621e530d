//! Corpus loading, splitting and tagging shared by the subcommands and
//! the service.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use avtag::corpus::{load_corpus, split, ProductProfile, SplitKind, TaggedSequence};
use avtag::tags::{SchemeKind, TagScheme};

use crate::error::{CliError, CliResult};

/// Attribute names annotated anywhere in the corpus, sorted.
pub fn corpus_attributes(corpus: &[ProductProfile]) -> Vec<String> {
    let names: BTreeSet<&String> = corpus.iter().flat_map(|p| p.annotations.keys()).collect();
    names.into_iter().cloned().collect()
}

pub fn scheme_for(corpus: &[ProductProfile], kind: SchemeKind, attributes: Option<Vec<String>>) -> CliResult<TagScheme> {
    let attributes = attributes.unwrap_or_else(|| corpus_attributes(corpus));
    if attributes.is_empty() {
        return Err(CliError::Invalid("the corpus annotates no attributes; pass --attributes".into()));
    }
    Ok(TagScheme::new(kind, attributes)?)
}

/// Hint split when every record carries a side, random otherwise.
pub fn default_split(corpus: &[ProductProfile]) -> SplitKind {
    if corpus.iter().all(|p| p.split.is_some()) {
        SplitKind::Hint
    } else {
        SplitKind::Random
    }
}

pub struct Dataset {
    pub scheme: TagScheme,
    pub train: Vec<TaggedSequence>,
    pub test: Vec<TaggedSequence>,
    pub split: SplitKind,
}

pub struct SplitOptions {
    pub kind: Option<SplitKind>,
    pub ratio: f64,
    pub seed: u64,
}

pub fn tag_all(corpus: &[ProductProfile], scheme: &TagScheme) -> CliResult<Vec<TaggedSequence>> {
    Ok(corpus.iter().map(|p| p.to_tagged(scheme)).collect::<avtag::Result<_>>()?)
}

pub fn load_dataset(path: &Path, scheme: &dyn Fn(&[ProductProfile]) -> CliResult<TagScheme>, opts: &SplitOptions) -> CliResult<Dataset> {
    let corpus = load_corpus(path)?;
    let scheme = scheme(&corpus)?;
    let kind = opts.kind.unwrap_or_else(|| default_split(&corpus));
    let sp = split(&corpus, kind, opts.ratio, opts.seed)?;
    let tagged = tag_all(&corpus, &scheme)?;
    let by_id: HashMap<&str, &TaggedSequence> = tagged.iter().map(|t| (t.id.as_str(), t)).collect();
    let pick = |ids: &[String]| ids.iter().map(|id| by_id[id.as_str()].clone()).collect::<Vec<_>>();
    Ok(Dataset {
        train: pick(&sp.train),
        test: pick(&sp.test),
        scheme,
        split: kind,
    })
}
