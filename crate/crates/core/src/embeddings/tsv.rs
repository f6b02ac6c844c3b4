//! `id<TAB>text` record files used for corpora and query sets.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextRecord {
    pub id: u64,
    pub text: String,
}

pub fn read_text_records(path: impl AsRef<Path>) -> Result<Vec<TextRecord>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_text_records(&content, path)
}

pub fn parse_text_records(content: &str, origin: &Path) -> Result<Vec<TextRecord>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| err("expected id<TAB>text".into()))?;
        let id = id
            .trim()
            .parse::<u64>()
            .map_err(|e| err(format!("bad id {id:?}: {e}")))?;
        if text.split_whitespace().next().is_none() {
            return Err(err(format!("record {id} has no tokens")));
        }
        out.push(TextRecord {
            id,
            text: text.to_owned(),
        });
    }
    Ok(out)
}

pub fn write_text_records(records: &[TextRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.id.to_string());
        s.push('\t');
        s.push_str(&r.text);
        s.push('\n');
    }
    let path = path.as_ref();
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
