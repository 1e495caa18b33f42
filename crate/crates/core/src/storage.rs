//! The social and pointing-pattern stores.
//!
//! Each store is an in-memory map backed by an append-only JSON Lines file.
//! Loading replays the file and the last record for a key wins; `compact`
//! rewrites the file with one line per key.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::fetcher::PageUrl;
use crate::fragmenter::{Clue, Fragment};
use crate::matcher;
use crate::pattern::PointingPattern;
use crate::types::{Price, Timestamp};

pub const SOCIAL_FILE: &str = "social.jsonl";
pub const PATTERNS_FILE: &str = "patterns.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("cannot encode record: {0}")]
    Encode(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub mod jsonl {
    //! JSON Lines helpers.

    use super::*;

    pub fn read_all<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        let file = File::open(path).map_err(io_err(path))?;
        let mut out = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line).map_err(|source| StoreError::Parse {
                path: path.display().to_string(),
                line: n + 1,
                source,
            })?;
            out.push(record);
        }
        Ok(out)
    }

    pub fn append<T: Serialize>(path: &Path, record: &T) -> Result<(), StoreError> {
        let line = serde_json::to_string(record)?;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        writeln!(file, "{line}").map_err(io_err(path))?;
        file.flush().map_err(io_err(path))
    }

    /// Replaces the file contents through a temporary file and a rename.
    pub fn write_all<'a, T: Serialize + 'a>(
        path: &Path,
        records: impl IntoIterator<Item = &'a T>,
    ) -> Result<(), StoreError> {
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut file = File::create(&tmp).map_err(io_err(&tmp))?;
            for record in records {
                writeln!(file, "{}", serde_json::to_string(record)?).map_err(io_err(&tmp))?;
            }
            file.sync_all().map_err(io_err(&tmp))?;
        }
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }
}

/// A price seen by an earlier extraction: (entity, url, price, time).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocialRecord {
    pub entity: String,
    pub url: PageUrl,
    #[serde(flatten)]
    pub price: Price,
    pub observed_at: Timestamp,
}

/// Social storage, one record per (entity, url).
#[derive(Debug, Default)]
pub struct SocialStore {
    records: RwLock<IndexMap<String, IndexMap<String, SocialRecord>>>,
    path: Option<PathBuf>,
    write: Mutex<()>,
}

impl SocialStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let store = SocialStore {
            path: Some(path.clone()),
            ..Self::default()
        };
        {
            let mut map = store.records.write().unwrap_or_else(|e| e.into_inner());
            for r in jsonl::read_all::<SocialRecord>(&path)? {
                upsert_social(&mut map, r);
            }
        }
        Ok(store)
    }

    /// Newest record for `url` (optionally for one entity) that is still
    /// fresh: `now - observed_at < validity`. Stale records stay stored.
    pub fn get(
        &self,
        url: &PageUrl,
        entity: Option<&str>,
        now: Timestamp,
        validity: i64,
    ) -> Option<SocialRecord> {
        if validity <= 0 {
            return None;
        }
        let map = self.records.read().unwrap_or_else(|e| e.into_inner());
        map.get(url.as_str())?
            .values()
            .filter(|r| entity.is_none_or(|e| r.entity == e))
            .max_by_key(|r| r.observed_at)
            .filter(|r| r.observed_at.is_fresh_at(now, validity))
            .cloned()
    }

    pub fn put(&self, record: SocialRecord) -> Result<(), StoreError> {
        let _guard = self.write.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(path) = &self.path {
            jsonl::append(path, &record)?;
        }
        let mut map = self.records.write().unwrap_or_else(|e| e.into_inner());
        upsert_social(&mut map, record);
        Ok(())
    }

    /// Records whose url belongs to `site` and whose entity matches, newest
    /// first.
    pub fn find_by_site(&self, entity: &str, site: &str) -> Vec<SocialRecord> {
        let site = matcher::normalize_site(site);
        if site.is_empty() {
            return Vec::new();
        }
        let map = self.records.read().unwrap_or_else(|e| e.into_inner());
        let mut found: Vec<SocialRecord> = map
            .values()
            .flat_map(IndexMap::values)
            .filter(|r| matcher::site_matches_host(&site, r.url.host()))
            .filter(|r| matcher::entity_matches(entity, &r.entity))
            .cloned()
            .collect();
        found.sort_by_key(|r| std::cmp::Reverse(r.observed_at));
        found
    }

    pub fn records(&self) -> Vec<SocialRecord> {
        let map = self.records.read().unwrap_or_else(|e| e.into_inner());
        map.values().flat_map(|m| m.values().cloned()).collect()
    }

    pub fn len(&self) -> usize {
        let map = self.records.read().unwrap_or_else(|e| e.into_inner());
        map.values().map(IndexMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn compact(&self) -> Result<(), StoreError> {
        let _guard = self.write.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(path) = &self.path {
            let records = self.records();
            jsonl::write_all(path, &records)?;
        }
        Ok(())
    }
}

fn upsert_social(map: &mut IndexMap<String, IndexMap<String, SocialRecord>>, record: SocialRecord) {
    map.entry(record.url.as_str().to_string())
        .or_default()
        .insert(record.entity.clone(), record);
}

/// Pointing-pattern storage, one pattern per url.
#[derive(Debug, Default)]
pub struct PatternStore {
    patterns: RwLock<IndexMap<String, PointingPattern>>,
    path: Option<PathBuf>,
    write: Mutex<()>,
}

impl PatternStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let store = PatternStore {
            path: Some(path.clone()),
            ..Self::default()
        };
        {
            let mut map = store.patterns.write().unwrap_or_else(|e| e.into_inner());
            for p in jsonl::read_all::<PointingPattern>(&path)? {
                map.insert(p.url.as_str().to_string(), p);
            }
        }
        Ok(store)
    }

    /// The url's pattern if `now - created_at < validity`.
    pub fn get(&self, url: &PageUrl, now: Timestamp, validity: i64) -> Option<PointingPattern> {
        if validity <= 0 {
            return None;
        }
        let map = self.patterns.read().unwrap_or_else(|e| e.into_inner());
        map.get(url.as_str())
            .filter(|p| p.created_at.is_fresh_at(now, validity))
            .cloned()
    }

    /// The url's pattern regardless of age.
    pub fn peek(&self, url: &PageUrl) -> Option<PointingPattern> {
        let map = self.patterns.read().unwrap_or_else(|e| e.into_inner());
        map.get(url.as_str()).cloned()
    }

    pub fn put(&self, pattern: PointingPattern) -> Result<(), StoreError> {
        let _guard = self.write.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(path) = &self.path {
            jsonl::append(path, &pattern)?;
        }
        let mut map = self.patterns.write().unwrap_or_else(|e| e.into_inner());
        map.insert(pattern.url.as_str().to_string(), pattern);
        Ok(())
    }

    pub fn records(&self) -> Vec<PointingPattern> {
        let map = self.patterns.read().unwrap_or_else(|e| e.into_inner());
        map.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.patterns.read().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn compact(&self) -> Result<(), StoreError> {
        let _guard = self.write.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(path) = &self.path {
            let records = self.records();
            jsonl::write_all(path, &records)?;
        }
        Ok(())
    }
}

/// Fragments of the pages extracted during this run. Not persisted.
#[derive(Debug, Default)]
pub struct FragmentStore {
    pages: Mutex<HashMap<String, Vec<Fragment>>>,
}

impl FragmentStore {
    pub fn put(&self, url: &PageUrl, fragments: Vec<Fragment>) {
        self.pages
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(url.as_str().to_string(), fragments);
    }

    pub fn get(&self, url: &PageUrl) -> Option<Vec<Fragment>> {
        self.pages
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(url.as_str())
            .cloned()
    }
}

/// The stores of one extractor instance.
#[derive(Debug, Default)]
pub struct Stores {
    pub social: SocialStore,
    pub patterns: PatternStore,
    pub fragments: FragmentStore,
    pub clues: Vec<Clue>,
}

impl Stores {
    pub fn in_memory(clues: Vec<Clue>) -> Self {
        Stores {
            clues,
            ..Self::default()
        }
    }

    /// Opens (creating if needed) `social.jsonl` and `patterns.jsonl` in `dir`.
    pub fn open_dir(dir: &Path, clues: Vec<Clue>) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Stores {
            social: SocialStore::open(dir.join(SOCIAL_FILE))?,
            patterns: PatternStore::open(dir.join(PATTERNS_FILE))?,
            fragments: FragmentStore::default(),
            clues,
        })
    }
}
