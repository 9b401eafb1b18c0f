//! Corpus records, licence tiers and the canonical on-disk format.
//!
//! The canonical format is one JSON object per line (`documents.jsonl`),
//! sorted by document id so that output is independent of ingestion order.

mod ingest;
mod stats;
pub mod tei;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::RuleSet;

pub use ingest::{
    ingest, ingest_source, IngestFailure, IngestReport, MetadataRow, MetadataTable, SourceFile,
    SourceFormat,
};
pub use stats::{emit_histogram, stats, CorpusStats, Histogram, HistogramBin};

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const WITHHELD_FILE: &str = "withheld_ids.txt";

pub const MIN_YEAR: i32 = 1000;
pub const MAX_YEAR: i32 = 2100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Open,
    /// Redistributable as found, but the text may not be rewritten.
    NoModification,
    NonOpen,
}

impl std::str::FromStr for Tier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "open" => Ok(Tier::Open),
            "no_modification" | "nomodification" => Ok(Tier::NoModification),
            "non_open" | "nonopen" | "closed" => Ok(Tier::NonOpen),
            other => Err(Error::InvalidInput(format!("unknown licence tier {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Licence {
    pub tier: Tier,
    pub licence_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinguisticStatus {
    Original,
    Normalised,
}

impl std::str::FromStr for LinguisticStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "" | "original" | "orig" => Ok(LinguisticStatus::Original),
            "normalised" | "normalized" | "norm" => Ok(LinguisticStatus::Normalised),
            other => Err(Error::InvalidInput(format!(
                "unknown linguistic status {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub author: String,
    /// `None` when the date is unknown; never encoded as 0.
    pub year: Option<i32>,
    pub genre: String,
    pub subgenre: Option<String>,
    pub linguistic_status: LinguisticStatus,
    pub licence: Licence,
    pub source_origin: String,
    pub body: String,
}

impl Document {
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::InvalidInput("document id is empty".into()));
        }
        if self.body.trim().is_empty() {
            return Err(Error::InvalidInput(format!(
                "document {:?} has an empty body",
                self.id
            )));
        }
        if let Some(year) = self.year {
            if !(MIN_YEAR..=MAX_YEAR).contains(&year) {
                return Err(Error::YearOutOfRange(year));
            }
        }
        Ok(())
    }

    /// False for `no_modification` documents: their body must not be rewritten.
    pub fn allows_modification(&self) -> bool {
        self.licence.tier != Tier::NoModification
    }

    pub fn is_distributable(&self) -> bool {
        self.licence.tier != Tier::NonOpen
    }
}

/// Splits a corpus into what may be distributed and what must be withheld.
pub fn partition(docs: Vec<Document>) -> (Vec<Document>, Vec<Document>) {
    docs.into_iter().partition(Document::is_distributable)
}

/// Rewrites document bodies with `rules`. Documents whose licence forbids
/// modification are refused unless `force` is set.
pub fn normalize_documents(docs: &mut [Document], rules: &RuleSet, force: bool) -> Result<()> {
    if !force {
        let refused: Vec<&str> = docs
            .iter()
            .filter(|d| !d.allows_modification())
            .map(|d| d.id.as_str())
            .collect();
        if !refused.is_empty() {
            return Err(Error::InvalidInput(format!(
                "refusing to rewrite no_modification documents without force: {}",
                refused.join(", ")
            )));
        }
    }
    for doc in docs.iter_mut() {
        doc.body = rules.normalize_text(&doc.body);
        doc.linguistic_status = LinguisticStatus::Normalised;
    }
    Ok(())
}

pub fn check_unique_ids(docs: &[Document]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for d in docs {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate document id {:?}", d.id)));
        }
    }
    Ok(())
}

/// Writes documents sorted by id, one JSON object per line.
pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    check_unique_ids(docs)?;
    let mut sorted: Vec<&Document> = docs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for doc in sorted {
        serde_json::to_writer(&mut w, doc).map_err(|e| Error::parse("document", e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), lineno + 1), e))?;
        doc.validate()?;
        docs.push(doc);
    }
    check_unique_ids(&docs)?;
    Ok(docs)
}

/// Reads `documents.jsonl` from a corpus directory.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<Document>> {
    read_documents(&dir.join(DOCUMENTS_FILE))
}

pub fn write_corpus_dir(dir: &Path, docs: &[Document]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_documents(&dir.join(DOCUMENTS_FILE), docs)
}

/// Writes the distributable half of a partition. Withheld documents are
/// recorded by id only; no field other than the id is ever written.
pub fn write_distribution(dir: &Path, distributable: &[Document], withheld: &[Document]) -> Result<()> {
    debug_assert!(distributable.iter().all(Document::is_distributable));
    if let Some(d) = distributable.iter().find(|d| !d.is_distributable()) {
        return Err(Error::InvalidInput(format!(
            "non_open document {:?} in distributable set",
            d.id
        )));
    }
    write_corpus_dir(dir, distributable)?;
    let mut ids: Vec<&str> = withheld.iter().map(|d| d.id.as_str()).collect();
    ids.sort_unstable();
    let mut text = ids.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    let path = dir.join(WITHHELD_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn doc(id: &str, tier: Tier, year: Option<i32>, body: &str) -> Document {
        Document {
            id: id.into(),
            title: format!("Title {id}"),
            author: "anonymous".into(),
            year,
            genre: "letters".into(),
            subgenre: None,
            linguistic_status: LinguisticStatus::Original,
            licence: Licence {
                tier,
                licence_name: "CC-BY".into(),
            },
            source_origin: "Wikisource".into(),
            body: body.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::doc;
    use super::*;
    use crate::normalize::default_rules;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn partition_maps_tiers() {
        let docs = vec![
            doc("a", Tier::Open, None, "x"),
            doc("b", Tier::NonOpen, None, "y"),
            doc("c", Tier::NoModification, None, "z"),
        ];
        let (dist, withheld) = partition(docs);
        assert_eq!(dist.len(), 2);
        assert_eq!(withheld.len(), 1);
        assert_eq!(withheld[0].id, "b");
        assert!(!dist[1].allows_modification());
    }

    #[test]
    fn all_open_withholds_nothing() {
        let docs: Vec<_> = (0..5)
            .map(|i| doc(&i.to_string(), Tier::Open, Some(1650), "x"))
            .collect();
        let (dist, withheld) = partition(docs);
        assert_eq!(dist.len(), 5);
        assert!(withheld.is_empty());
    }

    #[test]
    fn random_tiers_partition_by_tally() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let tiers = [Tier::Open, Tier::NoModification, Tier::NonOpen];
        let docs: Vec<_> = (0..100)
            .map(|i| doc(&format!("d{i:03}"), tiers[rng.random_range(0..3)], None, "x"))
            .collect();
        let mut tally = [0usize; 3];
        for d in &docs {
            tally[tiers.iter().position(|t| *t == d.licence.tier).unwrap()] += 1;
        }
        let (dist, withheld) = partition(docs);
        assert_eq!(dist.len(), tally[0] + tally[1]);
        assert_eq!(withheld.len(), tally[2]);
        assert!(withheld.iter().all(|d| d.licence.tier == Tier::NonOpen));
    }

    #[test]
    fn validation_rules() {
        assert!(doc("a", Tier::Open, Some(1624), "x").validate().is_ok());
        assert!(doc("a", Tier::Open, Some(999), "x").validate().is_err());
        assert!(doc("a", Tier::Open, None, "  \n").validate().is_err());
        let dup = [doc("a", Tier::Open, None, "x"), doc("a", Tier::Open, None, "y")];
        assert!(check_unique_ids(&dup).is_err());
    }

    #[test]
    fn normalizer_refuses_protected_documents() {
        let rules = default_rules();
        let mut docs = vec![
            doc("a", Tier::Open, None, "dõt vne"),
            doc("b", Tier::NoModification, None, "vne"),
        ];
        assert!(normalize_documents(&mut docs, &rules, false).is_err());
        assert_eq!(docs[0].body, "dõt vne");
        normalize_documents(&mut docs, &rules, true).unwrap();
        assert_eq!(docs[0].body, "dont une");
        assert_eq!(docs[1].linguistic_status, LinguisticStatus::Normalised);
    }

    #[test]
    fn unknown_year_serializes_as_null() {
        let d = doc("a", Tier::Open, None, "x");
        let json = serde_json::to_string(&d).unwrap();
        assert!(json.contains("\"year\":null"));
    }

    fn doc_strategy() -> impl Strategy<Value = Document> {
        (
            "[a-z0-9]{1,8}",
            "\\PC{0,20}",
            proptest::option::of(MIN_YEAR..=MAX_YEAR),
            proptest::option::of("[a-z]{1,6}"),
            prop_oneof![Just(Tier::Open), Just(Tier::NoModification), Just(Tier::NonOpen)],
            "[a-zA-Zſõ \n\t]{0,40}[a-z]",
        )
            .prop_map(|(id, title, year, subgenre, tier, body)| {
                let mut d = doc(&id, tier, year, &body);
                d.title = title;
                d.subgenre = subgenre;
                d
            })
    }

    proptest! {
        #[test]
        fn prop_serialize_round_trip(docs in proptest::collection::btree_map("[a-z0-9]{1,8}", doc_strategy(), 0..6)) {
            let docs: Vec<Document> = docs
                .into_iter()
                .map(|(id, mut d)| { d.id = id; d })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            write_corpus_dir(dir.path(), &docs).unwrap();
            let back = read_corpus_dir(dir.path()).unwrap();
            prop_assert_eq!(back, docs);
        }
    }
}
