//! On-disk artifacts: narratives, features, checkpoints, vocabularies, scenes and indexes.

mod binary;
pub mod checkpoint;
pub mod features;
pub mod index;
pub mod narratives;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use mqir_core::data::{Scene, Vocabulary};
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use features::{read_features, write_features};
pub use index::{read_index, write_index};
pub use narratives::{read_narratives, write_narratives};

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: io::Error },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: field \"{field}\": {msg}")]
    Field { line: usize, field: String, msg: String },
    #[error("line {line}: duplicate image_id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("{what}: {msg}")]
    Binary { what: &'static str, msg: String },
    #[error("{what}: unsupported format version {version}")]
    Version { what: &'static str, version: u32 },
    #[error("{0}")]
    Invalid(String),
}

impl FormatError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        FormatError::Io { path: path.to_path_buf(), cause: source }
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(|e| FormatError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| FormatError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FormatError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| FormatError::Invalid(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| FormatError::Invalid(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
}

/// `{"tokens": [...], "merges": [[a, b], ...]}`; token ids are list positions.
pub fn read_vocab(path: &Path) -> Result<Vocabulary, FormatError> {
    let f: VocabFile = read_json(path)?;
    Vocabulary::from_parts(f.tokens, f.merges).map_err(|e| FormatError::Invalid(format!("{}: {e}", path.display())))
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<(), FormatError> {
    write_json(path, &VocabFile { tokens: vocab.tokens().to_vec(), merges: vocab.merges().to_vec() })
}

/// Scene layouts used to render thumbnails.
pub fn read_scenes(path: &Path) -> Result<Vec<Scene>, FormatError> {
    read_json(path)
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<(), FormatError> {
    write_json(path, &scenes)
}

/// FNV-1a over a file's bytes, printed as 16 hex digits. Used as model and feature identifiers.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
