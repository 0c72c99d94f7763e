//! On-disk context cache store.
//!
//! ```text
//! <root>/store.json                       active (model, prefix) pair
//! <root>/<model_fp>-<prefix_hash>/
//!     manifest.json                       doc id -> file, passage length
//!     prefix.cfkv
//!     docs/<sha256(doc_id)[..16]>.cfkv
//! ```
//!
//! The manifest and `store.json` are replaced atomically (write, then rename).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::file;
use super::{CacheStoreEntry, Fingerprint, PrefixCacheEntry};
use crate::binio::{self, sha256};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const ROOT_FILE: &str = "store.json";
const MANIFEST: &str = "manifest.json";
const PREFIX_FILE: &str = "prefix.cfkv";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct RootPointer {
    model_fingerprint: String,
    prefix_hash: String,
    dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Manifest {
    version: u32,
    model_fingerprint: String,
    prefix_hash: String,
    prefix_len: usize,
    passage_len: usize,
    entries: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct CacheStore {
    dir: PathBuf,
    config: ModelConfig,
    model_fingerprint: Fingerprint,
    prefix_hash: Fingerprint,
    manifest: Manifest,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    binio::write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = binio::read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(path, e.to_string()))
}

fn doc_file_name(doc_id: &str) -> String {
    format!("docs/{}.cfkv", hex::encode(&sha256(doc_id.as_bytes())[..16]))
}

impl CacheStore {
    /// Creates (or reuses) the store directory for `model` and `prefix` under `root`.
    ///
    /// If `root` currently points at a different model or prefix, this fails
    /// with [`Error::StaleCache`] unless `force` is set, in which case the old
    /// directory is removed.
    pub fn create(
        root: &Path,
        model: &Model,
        prefix: &PrefixCacheEntry,
        passage_len: usize,
        force: bool,
    ) -> Result<Self> {
        if prefix.model_fingerprint != model.fingerprint() {
            return Err(Error::StaleCache("prefix cache belongs to another model".into()));
        }
        let fp_hex = hex::encode(model.fingerprint());
        let ph_hex = hex::encode(prefix.prefix_hash);
        let dir_name = format!("{}-{}", &fp_hex[..16], &ph_hex[..16]);
        let pointer_path = root.join(ROOT_FILE);

        if pointer_path.exists() {
            let existing: RootPointer = read_json(&pointer_path)?;
            if existing.model_fingerprint != fp_hex || existing.prefix_hash != ph_hex {
                if !force {
                    return Err(Error::StaleCache(format!(
                        "{} holds caches for another model or prefix; rebuild with force",
                        root.display()
                    )));
                }
                let old = root.join(&existing.dir);
                if old.exists() && existing.dir != dir_name {
                    fs::remove_dir_all(old)?;
                }
            }
        }

        let dir = root.join(&dir_name);
        fs::create_dir_all(dir.join("docs"))?;
        let manifest_path = dir.join(MANIFEST);
        let manifest = match read_json::<Manifest>(&manifest_path) {
            Ok(m) if m.passage_len == passage_len && !force => m,
            _ => Manifest {
                version: 1,
                model_fingerprint: fp_hex.clone(),
                prefix_hash: ph_hex.clone(),
                prefix_len: prefix.len(),
                passage_len,
                entries: BTreeMap::new(),
            },
        };
        binio::write_atomic(&dir.join(PREFIX_FILE), &file::encode_prefix(model.config(), prefix))?;
        write_json(&manifest_path, &manifest)?;
        write_json(
            &pointer_path,
            &RootPointer {
                model_fingerprint: fp_hex,
                prefix_hash: ph_hex,
                dir: dir_name,
            },
        )?;
        Ok(Self {
            dir,
            config: *model.config(),
            model_fingerprint: model.fingerprint(),
            prefix_hash: prefix.prefix_hash,
            manifest,
        })
    }

    /// Opens the active store under `root`, refusing it if it was built for another model.
    pub fn open(root: &Path, model: &Model) -> Result<Self> {
        let pointer: RootPointer = read_json(&root.join(ROOT_FILE))?;
        let fp_hex = hex::encode(model.fingerprint());
        if pointer.model_fingerprint != fp_hex {
            return Err(Error::StaleCache(format!(
                "{} was built with model {}, current model is {}",
                root.display(),
                &pointer.model_fingerprint[..16],
                &fp_hex[..16]
            )));
        }
        let dir = root.join(&pointer.dir);
        let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
        let prefix_hash: Fingerprint = hex::decode(&manifest.prefix_hash)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::corrupt(dir.join(MANIFEST), "bad prefix hash"))?;
        Ok(Self {
            dir,
            config: *model.config(),
            model_fingerprint: model.fingerprint(),
            prefix_hash,
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn passage_len(&self) -> usize {
        self.manifest.passage_len
    }

    pub fn prefix_len(&self) -> usize {
        self.manifest.prefix_len
    }

    pub fn prefix_hash(&self) -> Fingerprint {
        self.prefix_hash
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.manifest.entries.contains_key(doc_id)
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.entries.keys().map(String::as_str)
    }

    /// Total bytes of all cache files.
    pub fn size_bytes(&self) -> Result<u64> {
        let mut total = fs::metadata(self.dir.join(PREFIX_FILE))?.len();
        for file in self.manifest.entries.values() {
            total += fs::metadata(self.dir.join(file))?.len();
        }
        Ok(total)
    }

    fn check(&self, model_fingerprint: &Fingerprint, prefix_hash: &Fingerprint, what: &str) -> Result<()> {
        if model_fingerprint != &self.model_fingerprint {
            return Err(Error::StaleCache(format!("{what} was built with a different model")));
        }
        if prefix_hash != &self.prefix_hash {
            return Err(Error::StaleCache(format!("{what} was built on a different prefix")));
        }
        Ok(())
    }

    pub fn load_prefix(&self) -> Result<PrefixCacheEntry> {
        let path = self.dir.join(PREFIX_FILE);
        let entry = file::decode_prefix(&self.config, &binio::read_file(&path)?, &path)?;
        self.check(&entry.model_fingerprint, &entry.prefix_hash, "prefix cache")?;
        Ok(entry)
    }

    fn write_entry(&self, entry: &CacheStoreEntry) -> Result<String> {
        self.check(&entry.model_fingerprint, &entry.prefix_hash, &format!("entry `{}`", entry.doc_id))?;
        if entry.token_count() != self.manifest.passage_len {
            return Err(Error::InvalidArgument(format!(
                "entry `{}` has {} tokens, store passage length is {}",
                entry.doc_id,
                entry.token_count(),
                self.manifest.passage_len
            )));
        }
        let name = doc_file_name(&entry.doc_id);
        binio::write_atomic(&self.dir.join(&name), &file::encode_document(&self.config, entry))?;
        Ok(name)
    }

    pub fn save_entry(&mut self, entry: &CacheStoreEntry) -> Result<()> {
        self.save_entries(std::slice::from_ref(entry))
    }

    /// Writes all entry files, then publishes them with one manifest update.
    pub fn save_entries(&mut self, entries: &[CacheStoreEntry]) -> Result<()> {
        let mut manifest = self.manifest.clone();
        for entry in entries {
            let name = self.write_entry(entry)?;
            manifest.entries.insert(entry.doc_id.clone(), name);
        }
        write_json(&self.dir.join(MANIFEST), &manifest)?;
        self.manifest = manifest;
        Ok(())
    }

    pub fn load_entry(&self, doc_id: &str) -> Result<CacheStoreEntry> {
        let name = self
            .manifest
            .entries
            .get(doc_id)
            .ok_or_else(|| Error::NotFound(format!("no cache entry for `{doc_id}`")))?;
        let path = self.dir.join(name);
        let entry = file::decode_document(&self.config, &binio::read_file(&path)?, &path)?;
        self.check(&entry.model_fingerprint, &entry.prefix_hash, &format!("entry `{doc_id}`"))?;
        if entry.doc_id != doc_id {
            return Err(Error::corrupt(&path, format!("file holds `{}`", entry.doc_id)));
        }
        Ok(entry)
    }
}
