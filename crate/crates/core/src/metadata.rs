//! Per-class metadata ingestion.
//!
//! A [`MetadataTable`] is the canonical view every later stage consumes:
//! records sorted by ascending `class_id`, one shared column sequence, and
//! values that are either non-empty trimmed text or explicitly missing.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::sha256_hex;

pub const CLASS_ID_COLUMN: &str = "class_id";

#[derive(Debug, thiserror::Error)]
pub enum MetadataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("input is not valid UTF-8 (first bad byte at offset {offset})")]
    InvalidUtf8 { offset: usize },
    #[error("parse failure: {0}")]
    Parse(String),
    #[error("no `class_id` column")]
    MissingClassId,
    #[error("invalid class_id {value:?} in row {row}")]
    InvalidClassId { row: usize, value: String },
    #[error("duplicate class_id {0}")]
    DuplicateClassId(u64),
    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("table has no records")]
    NoRecords,
    #[error("table has no metadata columns")]
    NoColumns,
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
}

pub type Result<T> = std::result::Result<T, MetadataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Format::Csv),
            "json" => Some(Format::Json),
            _ => None,
        }
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown metadata format {other:?}")),
        }
    }
}

/// One class and its named metadata values. `None` marks a missing value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub class_id: u64,
    pub columns: Vec<(String, Option<String>)>,
}

impl ClassRecord {
    pub fn value(&self, column: &str) -> Option<&str> {
        self.columns
            .iter()
            .find(|(name, _)| name == column)
            .and_then(|(_, v)| v.as_deref())
    }

    pub fn value_at(&self, index: usize) -> Option<&str> {
        self.columns.get(index).and_then(|(_, v)| v.as_deref())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetadataTable {
    records: Vec<ClassRecord>,
    column_names: Vec<String>,
    source_digest: String,
}

/// Normalizes a raw cell: trimmed, with empty cells marked missing.
fn normalize_cell(raw: &str) -> Option<String> {
    let trimmed = raw.trim();
    (!trimmed.is_empty()).then(|| trimmed.to_string())
}

impl MetadataTable {
    /// Builds a canonical table from in-memory rows. The source digest is the
    /// digest of the canonical CSV serialization.
    pub fn from_rows(
        column_names: Vec<String>,
        rows: Vec<(u64, Vec<Option<String>>)>,
    ) -> Result<Self> {
        let mut table = Self::assemble(column_names, rows)?;
        table.source_digest = table.canonical_digest();
        Ok(table)
    }

    fn assemble(
        column_names: Vec<String>,
        rows: Vec<(u64, Vec<Option<String>>)>,
    ) -> Result<Self> {
        if column_names.is_empty() {
            return Err(MetadataError::NoColumns);
        }
        let mut seen_names = HashSet::new();
        for name in &column_names {
            if name.trim().is_empty() || name == CLASS_ID_COLUMN || !seen_names.insert(name) {
                return Err(MetadataError::Parse(format!("bad column name {name:?}")));
            }
        }
        if rows.is_empty() {
            return Err(MetadataError::NoRecords);
        }
        let mut ids = HashSet::new();
        let mut records = Vec::with_capacity(rows.len());
        for (row, (class_id, values)) in rows.into_iter().enumerate() {
            if values.len() != column_names.len() {
                return Err(MetadataError::RaggedRow {
                    row,
                    expected: column_names.len() + 1,
                    found: values.len() + 1,
                });
            }
            if !ids.insert(class_id) {
                return Err(MetadataError::DuplicateClassId(class_id));
            }
            let columns = column_names
                .iter()
                .cloned()
                .zip(values.into_iter().map(|v| v.as_deref().and_then(normalize_cell)))
                .collect();
            records.push(ClassRecord { class_id, columns });
        }
        records.sort_by_key(|r| r.class_id);
        Ok(Self {
            records,
            column_names,
            source_digest: String::new(),
        })
    }

    pub fn parse_csv(bytes: &[u8]) -> Result<Self> {
        let text = utf8(bytes)?;
        if text.trim().is_empty() {
            return Err(MetadataError::Parse("empty file".into()));
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| MetadataError::Parse(e.to_string()))?
            .clone();
        let id_index = headers
            .iter()
            .position(|h| h.trim() == CLASS_ID_COLUMN)
            .ok_or(MetadataError::MissingClassId)?;
        let column_names: Vec<String> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != id_index)
            .map(|(_, h)| h.trim().to_string())
            .collect();

        let mut rows = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| MetadataError::Parse(e.to_string()))?;
            if record.len() != headers.len() {
                return Err(MetadataError::RaggedRow {
                    row,
                    expected: headers.len(),
                    found: record.len(),
                });
            }
            let raw_id = record[id_index].trim();
            let class_id = raw_id.parse::<u64>().map_err(|_| MetadataError::InvalidClassId {
                row,
                value: raw_id.to_string(),
            })?;
            let values = record
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != id_index)
                .map(|(_, v)| Some(v.to_string()))
                .collect();
            rows.push((class_id, values));
        }
        let mut table = Self::assemble(column_names, rows)?;
        table.source_digest = sha256_hex(bytes);
        Ok(table)
    }

    pub fn parse_json(bytes: &[u8]) -> Result<Self> {
        let text = utf8(bytes)?;
        let value: Value =
            serde_json::from_str(text).map_err(|e| MetadataError::Parse(e.to_string()))?;
        let Value::Array(items) = value else {
            return Err(MetadataError::Parse("top level must be an array".into()));
        };
        let mut column_names: Option<Vec<String>> = None;
        let mut rows = Vec::with_capacity(items.len());
        for (row, item) in items.into_iter().enumerate() {
            let Value::Object(mut object) = item else {
                return Err(MetadataError::Parse(format!("row {row} is not an object")));
            };
            let id_value = object
                .shift_remove(CLASS_ID_COLUMN)
                .ok_or(MetadataError::MissingClassId)?;
            let class_id = id_value.as_u64().ok_or_else(|| MetadataError::InvalidClassId {
                row,
                value: id_value.to_string(),
            })?;
            let names = column_names.get_or_insert_with(|| object.keys().cloned().collect());
            if object.len() != names.len() || names.iter().any(|n| !object.contains_key(n)) {
                return Err(MetadataError::RaggedRow {
                    row,
                    expected: names.len() + 1,
                    found: object.len() + 1,
                });
            }
            let mut values = Vec::with_capacity(names.len());
            for name in names.iter() {
                match &object[name] {
                    Value::String(s) => values.push(Some(s.clone())),
                    Value::Null => values.push(None),
                    other => {
                        return Err(MetadataError::Parse(format!(
                            "row {row} field {name:?} must be a string, got {other}"
                        )))
                    }
                }
            }
            rows.push((class_id, values));
        }
        let column_names = column_names.ok_or(MetadataError::NoRecords)?;
        let mut table = Self::assemble(column_names, rows)?;
        table.source_digest = sha256_hex(bytes);
        Ok(table)
    }

    pub fn records(&self) -> &[ClassRecord] {
        &self.records
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    /// Digest of the bytes this table was ingested from.
    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.records.iter().map(|r| r.class_id)
    }

    pub fn record(&self, class_id: u64) -> Option<&ClassRecord> {
        self.records
            .binary_search_by_key(&class_id, |r| r.class_id)
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn column_index(&self, column: &str) -> Result<usize> {
        self.column_names
            .iter()
            .position(|c| c == column)
            .ok_or_else(|| MetadataError::UnknownColumn(column.to_string()))
    }

    /// Serializes to the canonical CSV form: `class_id` first, records in
    /// ascending id order, missing values as empty fields.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let header = std::iter::once(CLASS_ID_COLUMN).chain(self.column_names.iter().map(String::as_str));
        writer.write_record(header).expect("write to Vec");
        for record in &self.records {
            let id = record.class_id.to_string();
            let fields = std::iter::once(id.as_str())
                .chain(record.columns.iter().map(|(_, v)| v.as_deref().unwrap_or("")));
            writer.write_record(fields).expect("write to Vec");
        }
        writer.into_inner().expect("flush Vec")
    }

    pub fn canonical_digest(&self) -> String {
        sha256_hex(&self.to_csv_bytes())
    }
}

fn utf8(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| MetadataError::InvalidUtf8 {
        offset: e.valid_up_to(),
    })
}

pub fn load_metadata(path: &Path, format: Format) -> Result<MetadataTable> {
    let bytes = std::fs::read(path).map_err(|source| MetadataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        Format::Csv => MetadataTable::parse_csv(&bytes),
        Format::Json => MetadataTable::parse_json(&bytes),
    }
}

/// Values of `column` in canonical record order; missing values are empty.
pub fn column_values(table: &MetadataTable, column: &str) -> Result<Vec<String>> {
    let index = table.column_index(column)?;
    Ok(table
        .records()
        .iter()
        .map(|r| r.value_at(index).unwrap_or_default().to_string())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    MissingValue { class_id: u64, column: String },
    ConstantColumn { column: String },
    /// Control characters or U+FFFD, which usually mean a lossy upstream decode.
    SuspiciousText { class_id: u64, column: String },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::MissingValue { class_id, column } => {
                write!(f, "class {class_id}: missing value in column {column:?}")
            }
            Finding::ConstantColumn { column } => {
                write!(f, "column {column:?} is constant across all classes")
            }
            Finding::SuspiciousText { class_id, column } => {
                write!(f, "class {class_id}: suspicious characters in column {column:?}")
            }
        }
    }
}

/// Reports data-quality findings. Constant columns are only reported for
/// tables with at least two classes.
pub fn validate_table(table: &MetadataTable) -> Vec<Finding> {
    let mut findings = Vec::new();
    for record in table.records() {
        for (column, value) in &record.columns {
            match value {
                None => findings.push(Finding::MissingValue {
                    class_id: record.class_id,
                    column: column.clone(),
                }),
                Some(v) if v.chars().any(|c| c.is_control() || c == '\u{FFFD}') => {
                    findings.push(Finding::SuspiciousText {
                        class_id: record.class_id,
                        column: column.clone(),
                    })
                }
                Some(_) => {}
            }
        }
    }
    if table.len() >= 2 {
        for (index, column) in table.column_names().iter().enumerate() {
            let first = table.records()[0].value_at(index);
            if table.records().iter().all(|r| r.value_at(index) == first) {
                findings.push(Finding::ConstantColumn {
                    column: column.clone(),
                });
            }
        }
    }
    findings
}
