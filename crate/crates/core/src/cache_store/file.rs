//! Binary cache file codec.
//!
//! ```text
//! magic "CFKV" | version u32 | kind u8 (0 = prefix, 1 = document)
//! model_fingerprint [32] | prefix_hash [32]
//! num_layers u32 | num_heads u32 | head_dim u32 | token_count u32
//! rope_base f32 | pairing u8 | max_position u32
//! start_position u32 | valid_len u32 | doc_id (u32 length + utf-8)
//! tokens [token_count x u32]
//! per layer: keys [heads x tokens x head_dim] f32, then values (same shape)
//! sha256 of all preceding bytes [32]
//! ```

use std::path::Path;

use super::{passage_segments, CacheStoreEntry, Fingerprint, PrefixCacheEntry};
use crate::binio::{ByteReader, ByteWriter};
use crate::error::Result;
use crate::model::{KVCache, LayerCache, ModelConfig, Segment};
use crate::rope::PAIRING_INTERLEAVED;
use crate::tokenizer::TokenId;

const MAGIC: &[u8; 4] = b"CFKV";
const VERSION: u32 = 1;
const KIND_PREFIX: u8 = 0;
const KIND_DOCUMENT: u8 = 1;

struct Header<'a> {
    kind: u8,
    model_fingerprint: &'a Fingerprint,
    prefix_hash: &'a Fingerprint,
    start_position: usize,
    valid_len: usize,
    doc_id: &'a str,
    tokens: &'a [TokenId],
}

fn encode(config: &ModelConfig, header: Header<'_>, kv: &KVCache) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(header.kind);
    w.bytes(header.model_fingerprint);
    w.bytes(header.prefix_hash);
    w.usize_u32(config.num_layers);
    w.usize_u32(config.num_heads);
    w.usize_u32(config.head_dim);
    w.usize_u32(header.tokens.len());
    w.f32(config.rope.base());
    w.u8(PAIRING_INTERLEAVED);
    w.usize_u32(config.rope.max_position());
    w.usize_u32(header.start_position);
    w.usize_u32(header.valid_len);
    w.str(header.doc_id);
    for &t in header.tokens {
        w.u32(t);
    }
    for layer in kv.layers() {
        for h in 0..layer.num_heads() {
            w.f32s(layer.head_keys(h));
        }
        for h in 0..layer.num_heads() {
            w.f32s(layer.head_values(h));
        }
    }
    w.finish_with_checksum()
}

struct Decoded {
    kind: u8,
    model_fingerprint: Fingerprint,
    prefix_hash: Fingerprint,
    start_position: usize,
    valid_len: usize,
    doc_id: String,
    tokens: Vec<TokenId>,
    kv: KVCache,
}

fn decode(config: &ModelConfig, bytes: &[u8], path: &Path) -> Result<Decoded> {
    let mut r = ByteReader::with_checksum(bytes, path)?;
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.corrupt(format!("unsupported cache version {version}")));
    }
    let kind = r.u8()?;
    let model_fingerprint = r.array::<32>()?;
    let prefix_hash = r.array::<32>()?;
    let num_layers = r.usize()?;
    let num_heads = r.usize()?;
    let head_dim = r.usize()?;
    let token_count = r.usize()?;
    let base = r.f32()?;
    let pairing = r.u8()?;
    let max_position = r.usize()?;
    let start_position = r.usize()?;
    let valid_len = r.usize()?;
    let doc_id = r.str()?;

    if (num_layers, num_heads, head_dim) != (config.num_layers, config.num_heads, config.head_dim)
        || base != config.rope.base()
        || max_position != config.rope.max_position()
    {
        return Err(r.corrupt("cache shape does not match the model configuration"));
    }
    if pairing != PAIRING_INTERLEAVED {
        return Err(r.corrupt(format!("unknown pairing convention {pairing}")));
    }
    if kind != KIND_PREFIX && kind != KIND_DOCUMENT {
        return Err(r.corrupt(format!("unknown entry kind {kind}")));
    }
    if valid_len > token_count {
        return Err(r.corrupt("valid_len exceeds token_count"));
    }

    let mut tokens = Vec::with_capacity(token_count);
    for _ in 0..token_count {
        tokens.push(r.u32()?);
    }
    let positions: Vec<usize> = (start_position..start_position + token_count).collect();
    let segments = if kind == KIND_PREFIX {
        vec![Segment::Prefix; token_count]
    } else {
        passage_segments(token_count, valid_len)
    };
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let keys = (0..num_heads)
            .map(|_| r.f32s(token_count * head_dim))
            .collect::<Result<Vec<_>>>()?;
        let values = (0..num_heads)
            .map(|_| r.f32s(token_count * head_dim))
            .collect::<Result<Vec<_>>>()?;
        layers.push(LayerCache::from_parts(
            head_dim,
            keys,
            values,
            positions.clone(),
            segments.clone(),
        )?);
    }
    r.finish()?;
    Ok(Decoded {
        kind,
        model_fingerprint,
        prefix_hash,
        start_position,
        valid_len,
        doc_id,
        tokens,
        kv: KVCache::from_layers(layers)?,
    })
}

pub(super) fn encode_prefix(config: &ModelConfig, entry: &PrefixCacheEntry) -> Vec<u8> {
    encode(
        config,
        Header {
            kind: KIND_PREFIX,
            model_fingerprint: &entry.model_fingerprint,
            prefix_hash: &entry.prefix_hash,
            start_position: 0,
            valid_len: entry.tokens.len(),
            doc_id: "",
            tokens: &entry.tokens,
        },
        &entry.kv,
    )
}

pub(super) fn encode_document(config: &ModelConfig, entry: &CacheStoreEntry) -> Vec<u8> {
    encode(
        config,
        Header {
            kind: KIND_DOCUMENT,
            model_fingerprint: &entry.model_fingerprint,
            prefix_hash: &entry.prefix_hash,
            start_position: entry.start_position,
            valid_len: entry.valid_len,
            doc_id: &entry.doc_id,
            tokens: &entry.tokens,
        },
        &entry.kv,
    )
}

pub(super) fn decode_prefix(config: &ModelConfig, bytes: &[u8], path: &Path) -> Result<PrefixCacheEntry> {
    let d = decode(config, bytes, path)?;
    if d.kind != KIND_PREFIX {
        return Err(crate::Error::corrupt(path, "expected a prefix cache file"));
    }
    Ok(PrefixCacheEntry {
        model_fingerprint: d.model_fingerprint,
        prefix_hash: d.prefix_hash,
        tokens: d.tokens,
        kv: d.kv,
    })
}

pub(super) fn decode_document(config: &ModelConfig, bytes: &[u8], path: &Path) -> Result<CacheStoreEntry> {
    let d = decode(config, bytes, path)?;
    if d.kind != KIND_DOCUMENT {
        return Err(crate::Error::corrupt(path, "expected a document cache file"));
    }
    Ok(CacheStoreEntry {
        doc_id: d.doc_id,
        model_fingerprint: d.model_fingerprint,
        prefix_hash: d.prefix_hash,
        tokens: d.tokens,
        valid_len: d.valid_len,
        start_position: d.start_position,
        kv: d.kv,
    })
}
