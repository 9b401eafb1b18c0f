use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{tei, Document, Licence, LinguisticStatus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    PlainText,
    TeiXml,
    /// One text record per line; blank lines are skipped.
    RecordPerLine,
}

impl SourceFormat {
    pub fn from_extension(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("xml" | "tei") => SourceFormat::TeiXml,
            Some("lines" | "rpl" | "tsv") => SourceFormat::RecordPerLine,
            _ => SourceFormat::PlainText,
        }
    }
}

impl std::str::FromStr for SourceFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain-text" | "plain" | "text" | "txt" => Ok(SourceFormat::PlainText),
            "tei-subset-xml" | "tei" | "xml" => Ok(SourceFormat::TeiXml),
            "record-per-line" | "lines" => Ok(SourceFormat::RecordPerLine),
            other => Err(Error::InvalidInput(format!("unknown source format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    pub path: PathBuf,
    pub format: SourceFormat,
}

impl SourceFile {
    pub fn new(path: impl Into<PathBuf>, format: SourceFormat) -> Self {
        Self {
            path: path.into(),
            format,
        }
    }

    /// Format inferred from the extension.
    pub fn guess(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        let format = SourceFormat::from_extension(&path);
        Self { path, format }
    }

    fn key(&self) -> String {
        self.path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.display().to_string())
    }
}

/// Document metadata for one source file, copied verbatim into the record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataRow {
    pub id: String,
    pub title: String,
    pub author: String,
    pub year: Option<i32>,
    pub genre: String,
    pub subgenre: Option<String>,
    pub linguistic_status: LinguisticStatus,
    pub licence: Licence,
    pub source_origin: String,
    pub format: Option<SourceFormat>,
}

impl MetadataRow {
    fn into_document(self, body: String) -> Document {
        Document {
            id: self.id,
            title: self.title,
            author: self.author,
            year: self.year,
            genre: self.genre,
            subgenre: self.subgenre,
            linguistic_status: self.linguistic_status,
            licence: self.licence,
            source_origin: self.source_origin,
            body,
        }
    }
}

/// Metadata keyed by source file name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetadataTable {
    rows: BTreeMap<String, MetadataRow>,
}

const REQUIRED_COLUMNS: &[&str] = &[
    "file",
    "id",
    "title",
    "author",
    "year",
    "genre",
    "licence_tier",
    "licence_name",
    "source_origin",
];

fn parse_year(raw: &str) -> Result<Option<i32>> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("unknown") || raw == "?" {
        return Ok(None);
    }
    raw.parse::<i32>()
        .map(Some)
        .map_err(|_| Error::InvalidInput(format!("bad year {raw:?}")))
}

fn non_empty(s: &str) -> Option<String> {
    let s = s.trim();
    (!s.is_empty()).then(|| s.to_string())
}

impl MetadataTable {
    pub fn insert(&mut self, file: impl Into<String>, row: MetadataRow) {
        self.rows.insert(file.into(), row);
    }

    pub fn get(&self, file: &str) -> Option<&MetadataRow> {
        self.rows.get(file)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn load(path: &Path, delimiter: u8) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, delimiter)
    }

    /// Delimiter-separated text with a header row naming the columns.
    pub fn parse(text: &str, delimiter: u8) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .flexible(false)
            .from_reader(text.as_bytes());
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::parse("metadata header", e))?
            .iter()
            .map(|h| h.trim().to_ascii_lowercase())
            .collect();
        for col in REQUIRED_COLUMNS {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::parse(
                    "metadata header",
                    format!("missing column {col:?}"),
                ));
            }
        }
        let idx = |name: &str| headers.iter().position(|h| h == name);

        let mut table = MetadataTable::default();
        for (n, record) in reader.records().enumerate() {
            let line = n + 2;
            let record = record.map_err(|e| Error::parse(format!("metadata line {line}"), e))?;
            let field = |name: &str| idx(name).and_then(|i| record.get(i)).unwrap_or("").to_string();
            let ctx = |e: Error| Error::parse(format!("metadata line {line}"), e);
            let file = field("file").trim().to_string();
            if file.is_empty() {
                return Err(Error::parse(format!("metadata line {line}"), "empty file column"));
            }
            let row = MetadataRow {
                id: field("id").trim().to_string(),
                title: field("title"),
                author: field("author"),
                year: parse_year(&field("year")).map_err(ctx)?,
                genre: field("genre"),
                subgenre: non_empty(&field("subgenre")),
                linguistic_status: field("linguistic_status").parse().map_err(ctx)?,
                licence: Licence {
                    tier: field("licence_tier").parse().map_err(ctx)?,
                    licence_name: field("licence_name"),
                },
                source_origin: field("source_origin"),
                format: non_empty(&field("format"))
                    .map(|f| f.parse())
                    .transpose()
                    .map_err(ctx)?,
            };
            if table.rows.insert(file.clone(), row).is_some() {
                return Err(Error::parse(
                    format!("metadata line {line}"),
                    format!("duplicate row for file {file:?}"),
                ));
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestFailure {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    /// Sorted by id.
    pub documents: Vec<Document>,
    pub failures: Vec<IngestFailure>,
}

fn extract_body(content: &str, format: SourceFormat) -> Result<String> {
    match format {
        SourceFormat::PlainText => Ok(content.trim().to_string()),
        SourceFormat::TeiXml => tei::extract_text(content),
        SourceFormat::RecordPerLine => Ok(content
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect::<Vec<_>>()
            .join("\n")),
    }
}

/// Builds one document from in-memory content.
pub fn ingest_source(
    content: &str,
    format: SourceFormat,
    row: Option<&MetadataRow>,
) -> Result<Document> {
    let row = row.ok_or_else(|| Error::InvalidInput("missing metadata".into()))?;
    let body = extract_body(content, row.format.unwrap_or(format))?;
    let doc = row.clone().into_document(body);
    doc.validate()?;
    Ok(doc)
}

fn ingest_one(source: &SourceFile, table: &MetadataTable) -> Result<Document> {
    let row = table
        .get(&source.key())
        .ok_or_else(|| Error::InvalidInput("missing metadata".into()))?;
    let content = std::fs::read_to_string(&source.path).map_err(|e| Error::io(&source.path, e))?;
    ingest_source(&content, source.format, Some(row))
}

/// Ingests every source file. A failing file is reported and skipped; the
/// others still produce documents. Output order is by id whatever the
/// scheduling of the parallel workers.
pub fn ingest(sources: &[SourceFile], table: &MetadataTable) -> IngestReport {
    let results: Vec<(usize, Result<Document>)> = sources
        .par_iter()
        .enumerate()
        .map(|(i, s)| (i, ingest_one(s, table)))
        .collect();

    let mut report = IngestReport::default();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, result) in results {
        match result {
            Ok(doc) => {
                if let Some(&first) = seen.get(&doc.id) {
                    report.failures.push(IngestFailure {
                        path: sources[i].path.clone(),
                        message: format!(
                            "duplicate id {:?} (already used by {})",
                            doc.id,
                            sources[first].path.display()
                        ),
                    });
                } else {
                    seen.insert(doc.id.clone(), i);
                    report.documents.push(doc);
                }
            }
            Err(e) => report.failures.push(IngestFailure {
                path: sources[i].path.clone(),
                message: e.to_string(),
            }),
        }
    }
    report.documents.sort_by(|a, b| a.id.cmp(&b.id));
    report
}
