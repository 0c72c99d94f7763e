//! BM25 lexical retrieval.
//!
//! Text is NFC-normalized, lowercased and split on every non-alphanumeric
//! character. No stemming, no stopwords. Passages are indexed on title and
//! text together (see [`Passage::full_text`]).
//!
//! Index file layout (little-endian):
//!
//! ```text
//! magic "CFIX" | version u32 | k1 f64 | b f64
//! doc_count u32 | per doc: id (u32 length + utf-8), length u32
//! term_count u32 | per term: term, posting_count u32, postings [(doc u32, tf u32)]
//! sha256 of all preceding bytes [32]
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::binio::{self, ByteReader, ByteWriter};
use crate::corpus::{self, Passage};
use crate::error::Result;

pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;

const MAGIC: &[u8; 4] = b"CFIX";
const VERSION: u32 = 1;

pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect::<String>().to_lowercase();
    normalized
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Query terms with duplicates removed, first occurrence order kept.
pub fn query_terms(query: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    tokenize(query).into_iter().filter(|t| seen.insert(t.clone())).collect()
}

/// Lucene-style BM25 inverse document frequency.
pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    /// Index into the id-sorted document table.
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    k1: f64,
    b: f64,
    /// Sorted ascending, so postings sorted by `doc` are sorted by id.
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_len: f64,
    postings: BTreeMap<String, Vec<Posting>>,
}

fn average(lens: &[u32]) -> f64 {
    if lens.is_empty() {
        0.0
    } else {
        lens.iter().map(|&l| l as f64).sum::<f64>() / lens.len() as f64
    }
}

impl InvertedIndex {
    pub fn build(passages: &[Passage]) -> Result<Self> {
        Self::with_params(passages, DEFAULT_K1, DEFAULT_B)
    }

    pub fn with_params(passages: &[Passage], k1: f64, b: f64) -> Result<Self> {
        corpus::check_unique_ids(passages.iter().map(|p| p.id.as_str()))?;
        let mut order: Vec<&Passage> = passages.iter().collect();
        order.sort_by(|a, b| a.id.cmp(&b.id));

        let mut doc_ids = Vec::with_capacity(order.len());
        let mut doc_lens = Vec::with_capacity(order.len());
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (doc, passage) in order.iter().enumerate() {
            let terms = tokenize(&passage.full_text());
            doc_lens.push(terms.len() as u32);
            doc_ids.push(passage.id.clone());
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for t in terms {
                *counts.entry(t).or_default() += 1;
            }
            for (term, tf) in counts {
                postings.entry(term).or_default().push(Posting { doc: doc as u32, tf });
            }
        }
        let avg_len = average(&doc_lens);
        Ok(Self {
            k1,
            b,
            doc_ids,
            doc_lens,
            avg_len,
            postings,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    fn term_weight(&self, tf: u32, doc_len: u32, idf: f64) -> f64 {
        let tf = tf as f64;
        let norm = self.k1 * (1.0 - self.b + self.b * doc_len as f64 / self.avg_len);
        idf * tf * (self.k1 + 1.0) / (tf + norm)
    }

    /// Top `k` documents by BM25, descending; ties go to the smaller id.
    /// Documents sharing no term with the query are never returned.
    pub fn search(&self, query: &str, k: usize) -> Vec<SearchHit> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut scores = vec![0.0f64; self.doc_count()];
        let mut matched = vec![false; self.doc_count()];
        for term in query_terms(query) {
            let list = self.postings(&term);
            if list.is_empty() {
                continue;
            }
            let w = idf(self.doc_count(), list.len());
            for p in list {
                let d = p.doc as usize;
                scores[d] += self.term_weight(p.tf, self.doc_lens[d], w);
                matched[d] = true;
            }
        }
        let mut hits: Vec<usize> = (0..self.doc_count()).filter(|&d| matched[d]).collect();
        // Index order is id order, so a stable sort leaves ties ascending by id.
        hits.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        hits.truncate(k);
        hits.into_iter()
            .map(|d| SearchHit {
                doc_id: self.doc_ids[d].clone(),
                score: scores[d],
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.f64(self.k1);
        w.f64(self.b);
        w.usize_u32(self.doc_ids.len());
        for (id, &len) in self.doc_ids.iter().zip(&self.doc_lens) {
            w.str(id);
            w.u32(len);
        }
        w.usize_u32(self.postings.len());
        for (term, list) in &self.postings {
            w.str(term);
            w.usize_u32(list.len());
            for p in list {
                w.u32(p.doc);
                w.u32(p.tf);
            }
        }
        w.finish_with_checksum()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::with_checksum(bytes, path)?;
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.corrupt(format!("unsupported index version {version}")));
        }
        let k1 = r.f64()?;
        let b = r.f64()?;
        let n = r.usize()?;
        let mut doc_ids = Vec::with_capacity(n);
        let mut doc_lens = Vec::with_capacity(n);
        for _ in 0..n {
            doc_ids.push(r.str()?);
            doc_lens.push(r.u32()?);
        }
        if doc_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(r.corrupt("document ids are not strictly sorted"));
        }
        let terms = r.usize()?;
        let mut postings = BTreeMap::new();
        for _ in 0..terms {
            let term = r.str()?;
            let count = r.usize()?;
            let mut list = Vec::with_capacity(count);
            for _ in 0..count {
                let doc = r.u32()?;
                let tf = r.u32()?;
                if doc as usize >= n {
                    return Err(r.corrupt(format!("posting points at document {doc}")));
                }
                list.push(Posting { doc, tf });
            }
            postings.insert(term, list);
        }
        r.finish()?;
        let avg_len = average(&doc_lens);
        Ok(Self {
            k1,
            b,
            doc_ids,
            doc_lens,
            avg_len,
            postings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?, path)
    }
}
