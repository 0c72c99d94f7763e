//! Offline, query-independent document caches.
//!
//! A shared prefix is encoded once at positions `[0, prefix_len)`. Each
//! document is then encoded on top of that prefix, padded or truncated to a
//! fixed passage length, and only the document tokens' KV is kept, rotated at
//! the canonical positions `[prefix_len, prefix_len + passage_len)`.
//! Documents never see each other, so building order is irrelevant.

mod file;
mod store;

use rayon::prelude::*;

pub use store::CacheStore;

use crate::binio;
use crate::error::{Error, Result};
use crate::model::{KVCache, Model, OpCounts, Segment};
use crate::tokenizer::{self, TokenId};

/// Default fixed passage length, in tokens.
pub const DEFAULT_PASSAGE_LEN: usize = 64;

pub type Fingerprint = [u8; 32];

/// SHA-256 over the little-endian token ids.
pub fn prefix_hash(tokens: &[TokenId]) -> Fingerprint {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    binio::sha256(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixCacheEntry {
    pub model_fingerprint: Fingerprint,
    pub prefix_hash: Fingerprint,
    pub tokens: Vec<TokenId>,
    pub kv: KVCache,
}

impl PrefixCacheEntry {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheStoreEntry {
    pub doc_id: String,
    pub model_fingerprint: Fingerprint,
    pub prefix_hash: Fingerprint,
    /// Passage tokens after padding/truncation; `tokens.len()` is the cache length.
    pub tokens: Vec<TokenId>,
    /// Number of leading real (non-pad) tokens.
    pub valid_len: usize,
    /// Position of the first document token; keys are rotated at
    /// `start_position..start_position + token_count`.
    pub start_position: usize,
    pub kv: KVCache,
}

impl CacheStoreEntry {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    /// Checks that the entry was built by `model` on top of `prefix`.
    pub fn validate_against(&self, model: &Model, prefix: &PrefixCacheEntry) -> Result<()> {
        if self.model_fingerprint != model.fingerprint() {
            return Err(Error::StaleCache(format!(
                "entry `{}` was built with a different model",
                self.doc_id
            )));
        }
        if self.prefix_hash != prefix.prefix_hash {
            return Err(Error::StaleCache(format!(
                "entry `{}` was built on a different prefix",
                self.doc_id
            )));
        }
        Ok(())
    }
}

pub fn build_prefix_cache(model: &Model, prefix_tokens: &[TokenId]) -> Result<PrefixCacheEntry> {
    if prefix_tokens.is_empty() {
        return Err(Error::InvalidArgument("the shared prefix must not be empty".into()));
    }
    let mut kv = model.empty_cache();
    let positions: Vec<usize> = (0..prefix_tokens.len()).collect();
    let segments = vec![Segment::Prefix; prefix_tokens.len()];
    model.forward(&mut kv, prefix_tokens, &positions, &segments, |_, _| {})?;
    Ok(PrefixCacheEntry {
        model_fingerprint: model.fingerprint(),
        prefix_hash: prefix_hash(prefix_tokens),
        tokens: prefix_tokens.to_vec(),
        kv,
    })
}

/// Segment labels for a passage of `len` tokens whose first `valid` are real.
pub(crate) fn passage_segments(len: usize, valid: usize) -> Vec<Segment> {
    (0..len)
        .map(|i| if i < valid { Segment::Document(0) } else { Segment::Padding(0) })
        .collect()
}

pub fn build_document_cache(
    model: &Model,
    prefix: &PrefixCacheEntry,
    doc_id: &str,
    doc_tokens: &[TokenId],
    passage_len: usize,
) -> Result<CacheStoreEntry> {
    build_document_cache_counted(model, prefix, doc_id, doc_tokens, passage_len).map(|(e, _)| e)
}

/// [`build_document_cache`] that also reports the work done.
pub fn build_document_cache_counted(
    model: &Model,
    prefix: &PrefixCacheEntry,
    doc_id: &str,
    doc_tokens: &[TokenId],
    passage_len: usize,
) -> Result<(CacheStoreEntry, OpCounts)> {
    if doc_tokens.is_empty() {
        return Err(Error::InvalidArgument(format!("document `{doc_id}` is empty")));
    }
    if passage_len == 0 {
        return Err(Error::Config("passage length must be positive".into()));
    }
    if prefix.model_fingerprint != model.fingerprint() {
        return Err(Error::StaleCache("prefix cache belongs to another model".into()));
    }
    let (tokens, valid_len) = tokenizer::fit_to_length(doc_tokens.to_vec(), passage_len);
    let start = prefix.len();
    let positions: Vec<usize> = (start..start + passage_len).collect();
    let segments = passage_segments(passage_len, valid_len);

    let mut kv = prefix.kv.clone();
    let (_, ops) = model.forward(&mut kv, &tokens, &positions, &segments, |_, _| {})?;
    let entry = CacheStoreEntry {
        doc_id: doc_id.to_string(),
        model_fingerprint: model.fingerprint(),
        prefix_hash: prefix.prefix_hash,
        tokens,
        valid_len,
        start_position: start,
        kv: kv.slice(start..start + passage_len),
    };
    Ok((entry, ops))
}

/// Builds many document caches in parallel. Output order follows `docs`.
pub fn build_document_caches(
    model: &Model,
    prefix: &PrefixCacheEntry,
    docs: &[(String, Vec<TokenId>)],
    passage_len: usize,
) -> Result<Vec<CacheStoreEntry>> {
    docs.par_iter()
        .map(|(id, tokens)| build_document_cache(model, prefix, id, tokens, passage_len))
        .collect()
}
