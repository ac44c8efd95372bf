//! Knowledge ingestion: sources, passages, and linearization.
//!
//! Structured records (table rows, KB triples) are converted into plain
//! text passages with a deterministic template so that one retrieval and
//! scoring stack can serve every source. Corpora are immutable after load
//! and safe to share across threads.
//!
//! Corpus files are line-delimited JSON, one record per line, with a
//! `kind` discriminator:
//!
//! ```text
//! {"kind":"text","id":"t1","title":"Avatar","body":"..."}
//! {"kind":"table_row","id":"r1","page_title":"Avatar","headers":["Director"],"cells":["James Cameron"]}
//! {"kind":"kb_triple","id":"k1","subject":"Avatar","predicate":"Director","object":"James Cameron"}
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Short identifier for a knowledge source (e.g. `text`, `table`, `kb`).
///
/// Non-empty by construction. Ordering within a chain is by declaration
/// order, not by this type's `Ord` (which exists for map keys).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SourceId(String);

impl SourceId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::Config("source id must be non-empty".into()));
        }
        Ok(SourceId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for SourceId {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        SourceId::new(value)
    }
}

impl From<SourceId> for String {
    fn from(value: SourceId) -> String {
        value.0
    }
}

/// One fact from a knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbTriple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl KbTriple {
    pub fn new(
        subject: impl Into<String>,
        predicate: impl Into<String>,
        object: impl Into<String>,
    ) -> Result<Self> {
        let triple = KbTriple {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        };
        triple.validate()?;
        Ok(triple)
    }

    fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("subject", &self.subject),
            ("predicate", &self.predicate),
            ("object", &self.object),
        ] {
            if value.trim().is_empty() {
                return Err(Error::EmptyField {
                    kind: "kb_triple",
                    field,
                });
            }
        }
        Ok(())
    }
}

/// One row of a table, keyed by the page it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub page_title: String,
    pub headers: Vec<String>,
    pub cells: Vec<String>,
}

impl TableRow {
    pub fn new(
        page_title: impl Into<String>,
        headers: Vec<String>,
        cells: Vec<String>,
    ) -> Result<Self> {
        let row = TableRow {
            page_title: page_title.into(),
            headers,
            cells,
        };
        row.validate()?;
        Ok(row)
    }

    fn validate(&self) -> Result<()> {
        if self.headers.len() != self.cells.len() || self.cells.is_empty() {
            return Err(Error::RowShape {
                page_title: self.page_title.clone(),
                headers: self.headers.len(),
                cells: self.cells.len(),
            });
        }
        Ok(())
    }
}

/// Structured origin of a linearized passage; the original record is fully
/// recoverable from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    TableRow(TableRow),
    KbTriple(KbTriple),
}

/// A retrievable text unit tagged with its source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub source: SourceId,
    #[serde(default)]
    pub title: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Render a triple as text: `<predicate> of <subject> is <object>.`
///
/// Values pass through verbatim; grammaticality is not a goal. The original
/// triple rides along as provenance.
pub fn linearize_triple(
    id: impl Into<String>,
    source: &SourceId,
    triple: &KbTriple,
) -> Result<Passage> {
    triple.validate()?;
    let body = format!(
        "{} of {} is {}.",
        triple.predicate, triple.subject, triple.object
    );
    Ok(Passage {
        id: id.into(),
        source: source.clone(),
        title: String::new(),
        body,
        provenance: Some(Provenance::KbTriple(triple.clone())),
    })
}

/// Render a table row as one sentence per cell, in column order, joined by
/// single spaces: `<header> of <page_title> is <cell>.`
pub fn linearize_table_row(
    id: impl Into<String>,
    source: &SourceId,
    row: &TableRow,
) -> Result<Passage> {
    row.validate()?;
    let body = row
        .headers
        .iter()
        .zip(&row.cells)
        .map(|(header, cell)| format!("{} of {} is {}.", header, row.page_title, cell))
        .collect::<Vec<_>>()
        .join(" ");
    Ok(Passage {
        id: id.into(),
        source: source.clone(),
        title: row.page_title.clone(),
        body,
        provenance: Some(Provenance::TableRow(row.clone())),
    })
}

/// Immutable collection of passages from a single source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    source: SourceId,
    passages: Vec<Passage>,
}

impl Corpus {
    /// Assemble a corpus, checking source tags and id uniqueness.
    pub fn new(source: SourceId, passages: Vec<Passage>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for passage in &passages {
            if passage.source != source {
                return Err(Error::Config(format!(
                    "passage `{}` is tagged `{}` but belongs to corpus `{}`",
                    passage.id, passage.source, source
                )));
            }
            if passage.body.trim().is_empty() {
                return Err(Error::EmptyField {
                    kind: "passage",
                    field: "body",
                });
            }
            if !seen.insert(passage.id.clone()) {
                return Err(Error::DuplicatePassage(passage.id.clone()));
            }
        }
        Ok(Corpus { source, passages })
    }

    pub fn source(&self) -> &SourceId {
        &self.source
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

/// Raw on-disk record; `kind` selects the variant.
#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RawRecord {
    Text {
        id: String,
        #[serde(default)]
        title: String,
        body: String,
    },
    TableRow {
        id: String,
        page_title: String,
        headers: Vec<String>,
        cells: Vec<String>,
    },
    KbTriple {
        id: String,
        subject: String,
        predicate: String,
        object: String,
    },
}

fn record_to_passage(record: RawRecord, source: &SourceId) -> Result<Passage> {
    match record {
        RawRecord::Text { id, title, body } => {
            if body.trim().is_empty() {
                return Err(Error::EmptyField {
                    kind: "text",
                    field: "body",
                });
            }
            Ok(Passage {
                id,
                source: source.clone(),
                title,
                body,
                provenance: None,
            })
        }
        RawRecord::TableRow {
            id,
            page_title,
            headers,
            cells,
        } => {
            let row = TableRow::new(page_title, headers, cells)?;
            linearize_table_row(id, source, &row)
        }
        RawRecord::KbTriple {
            id,
            subject,
            predicate,
            object,
        } => {
            let triple = KbTriple::new(subject, predicate, object)?;
            linearize_triple(id, source, &triple)
        }
    }
}

/// Load a line-delimited corpus file, linearizing structured records.
///
/// Every passage is tagged with `source`. Malformed lines and duplicate ids
/// are reported with their line number.
pub fn load_corpus(path: impl AsRef<Path>, source: &SourceId) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path)?;
    parse_corpus(BufReader::new(file), source, &path.display().to_string())
}

/// Parse a corpus from any reader; `label` names the origin in errors.
pub fn parse_corpus<R: Read>(
    reader: BufReader<R>,
    source: &SourceId,
    label: &str,
) -> Result<Corpus> {
    let mut passages = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Ingest {
            path: label.to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        let passage = record_to_passage(record, source).map_err(|e| Error::Ingest {
            path: label.to_string(),
            line: lineno,
            message: e.to_string(),
        })?;
        if !seen.insert(passage.id.clone()) {
            return Err(Error::Ingest {
                path: label.to_string(),
                line: lineno,
                message: format!("duplicate passage id `{}`", passage.id),
            });
        }
        passages.push(passage);
    }
    Corpus::new(source.clone(), passages)
}
