use std::collections::HashSet;
use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::ClassLabel;

pub const MANIFEST_HEADER: [&str; 3] = ["image_id", "path", "label"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Resolved against the manifest's directory when relative.
    pub path: PathBuf,
    pub label: ClassLabel,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: line {line}: {message}")]
    Csv { path: PathBuf, line: u64, message: String },
    #[error("{path}: expected header \"image_id,path,label\", found {found:?}")]
    Header { path: PathBuf, found: String },
    #[error("{path}: line {line}: unknown label {label:?}")]
    UnknownLabel { path: PathBuf, line: u64, label: String },
    #[error("{path}: line {line}: duplicate image_id {id:?}")]
    DuplicateId { path: PathBuf, line: u64, id: String },
    #[error("{path}: line {line}: referenced file {file} does not exist")]
    MissingFile { path: PathBuf, line: u64, file: PathBuf },
}

/// Reads a `image_id,path,label` CSV. Labels are case-insensitive; every
/// referenced image must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, ManifestError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let csv_err = |e: csv::Error| ManifestError::Csv {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    };

    let header = reader.headers().map_err(csv_err)?.clone();
    if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
        return Err(ManifestError::Header {
            path: path.to_path_buf(),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record[0].trim().to_string();
        let label = record[2]
            .parse::<ClassLabel>()
            .map_err(|_| ManifestError::UnknownLabel {
                path: path.to_path_buf(),
                line,
                label: record[2].to_string(),
            })?;
        if !seen.insert(id.clone()) {
            return Err(ManifestError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id,
            });
        }
        let image_path = base.join(record[1].trim());
        if !image_path.is_file() {
            return Err(ManifestError::MissingFile {
                path: path.to_path_buf(),
                line,
                file: image_path,
            });
        }
        entries.push(ManifestEntry {
            image_id: id,
            path: image_path,
            label,
        });
    }
    Ok(entries)
}

/// Writes rows `(image_id, path as given, label)`.
pub fn write_manifest<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = (&'a str, &'a str, ClassLabel)>,
) -> Result<(), ManifestError> {
    let path = path.as_ref();
    let io_err = |source: io::Error| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let csv_err = |e: csv::Error| ManifestError::Csv {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for (id, p, label) in rows {
        w.write_record([id, p, label.as_str()]).map_err(csv_err)?;
    }
    w.flush().map_err(io_err)
}
