use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::Document;
use crate::error::{Error, Result};

/// Token totals (maximal runs of non-whitespace) and dated document counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub total_tokens: u64,
    pub per_origin_tokens: BTreeMap<String, u64>,
    pub per_year_doc_counts: BTreeMap<i32, u64>,
}

pub fn stats(docs: &[Document]) -> CorpusStats {
    let mut out = CorpusStats::default();
    for doc in docs {
        let n = doc.body.split_whitespace().count() as u64;
        out.total_tokens += n;
        *out.per_origin_tokens.entry(doc.source_origin.clone()).or_default() += n;
        if let Some(year) = doc.year {
            *out.per_year_doc_counts.entry(year).or_default() += 1;
        }
    }
    out
}

impl CorpusStats {
    pub fn dated_documents(&self) -> u64 {
        self.per_year_doc_counts.values().sum()
    }

    pub fn render_origins(&self) -> String {
        let width = self
            .per_origin_tokens
            .keys()
            .map(|k| k.chars().count())
            .chain(std::iter::once(5))
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        for (origin, n) in &self.per_origin_tokens {
            let pad = width - origin.chars().count();
            let _ = writeln!(out, "{origin}{}  {n:>12}", " ".repeat(pad));
        }
        let _ = writeln!(out, "TOTAL{}  {:>12}", " ".repeat(width - 5), self.total_tokens);
        out
    }
}

/// Half-open year bin `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HistogramBin {
    pub start: i32,
    pub end: i32,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Histogram {
    pub bin_width: u32,
    pub bins: Vec<HistogramBin>,
}

/// Documents per year in contiguous bins aligned on multiples of
/// `bin_width`, from the earliest to the latest dated document.
pub fn emit_histogram(stats: &CorpusStats, bin_width: u32) -> Result<Histogram> {
    if bin_width == 0 {
        return Err(Error::InvalidInput("histogram bin width must be >= 1".into()));
    }
    let width = bin_width as i32;
    let (Some((&min, _)), Some((&max, _))) = (
        stats.per_year_doc_counts.first_key_value(),
        stats.per_year_doc_counts.last_key_value(),
    ) else {
        return Ok(Histogram {
            bin_width,
            bins: Vec::new(),
        });
    };
    let first = min.div_euclid(width) * width;
    let mut bins = Vec::new();
    let mut start = first;
    while start <= max {
        let end = start + width;
        let count = stats.per_year_doc_counts.range(start..end).map(|(_, c)| c).sum();
        bins.push(HistogramBin { start, end, count });
        start = end;
    }
    Ok(Histogram { bin_width, bins })
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// One line per bin: range, count and a bar scaled to at most 50 marks.
    pub fn render(&self) -> String {
        let max = self.bins.iter().map(|b| b.count).max().unwrap_or(0).max(1);
        let mut out = String::new();
        for b in &self.bins {
            let bar = ((b.count * 50) as f64 / max as f64).ceil() as usize;
            let _ = writeln!(
                out,
                "[{}, {})\t{}\t{}",
                b.start,
                b.end,
                b.count,
                "#".repeat(bar)
            );
        }
        out
    }
}
