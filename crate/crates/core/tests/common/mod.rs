#![allow(dead_code)]

use cachefocus::cache_store::{build_document_caches, build_prefix_cache, CacheStoreEntry, PrefixCacheEntry};
use cachefocus::corpus::Passage;
use cachefocus::focus::prefix_tokens;
use cachefocus::model::{Model, ModelConfig};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const WORDS: &[&str] = &[
    "river", "mountain", "capital", "france", "paris", "king", "war", "treaty", "science",
    "music", "city", "ocean", "island", "north", "south", "empire", "language", "river",
    "bridge", "tower", "queen", "battle", "novel", "painter", "planet", "star", "moon",
    "forest", "desert", "train", "station", "harbor", "church", "castle", "museum",
];

pub const PREFIX: &str = "Answer using the passages.\n";

pub fn small_model(seed: u64) -> Model {
    Model::random(ModelConfig::new(4, 2, 16, 512).unwrap(), seed).unwrap()
}

pub fn toy_model(seed: u64) -> Model {
    Model::random(ModelConfig::toy(), seed).unwrap()
}

pub fn sentence(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn passages(n: usize, seed: u64, words: usize) -> Vec<Passage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Passage::new(format!("doc{i:04}"), format!("Title {i}"), sentence(&mut rng, words)))
        .collect()
}

pub fn build_caches(
    model: &Model,
    passages: &[Passage],
    cache_len: usize,
) -> (PrefixCacheEntry, Vec<CacheStoreEntry>) {
    let prefix = build_prefix_cache(model, &prefix_tokens(PREFIX)).unwrap();
    let docs: Vec<_> = passages.iter().map(|p| (p.id.clone(), p.tokens())).collect();
    let entries = build_document_caches(model, &prefix, &docs, cache_len).unwrap();
    (prefix, entries)
}
