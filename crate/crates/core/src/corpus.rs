//! JSON-lines passage corpus: one `{"id", "title", "text"}` object per line.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{self, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// Title and text joined by a newline; this is what gets indexed and cached.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{}\n{}", self.title, self.text)
        }
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        tokenizer::encode(&self.full_text())
    }
}

pub fn parse_corpus(reader: impl BufRead, path: &Path) -> Result<Vec<Passage>> {
    let mut passages = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let passage: Passage = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        passages.push(passage);
    }
    Ok(passages)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Passage>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    parse_corpus(BufReader::new(file), path)
}

pub fn check_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines_and_skips_blanks() {
        let data = "{\"id\":\"a\",\"title\":\"T\",\"text\":\"x\"}\n\n{\"id\":\"b\",\"text\":\"y\"}\n";
        let ps = parse_corpus(data.as_bytes(), Path::new("c.jsonl")).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].full_text(), "T\nx");
        assert_eq!(ps[1].full_text(), "y");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let data = "{\"id\":\"a\",\"text\":\"x\"}\nnot json\n";
        match parse_corpus(data.as_bytes(), Path::new("c.jsonl")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(check_unique_ids(["a", "b"]).is_ok());
        assert!(matches!(check_unique_ids(["a", "a"]), Err(Error::DuplicateId(_))));
    }
}
