//! Fixture corpora: a JSON manifest of local pages with known prices.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::fetcher::{FetchConfig, Fetcher, LocalIndex, PageUrl};
use crate::fragmenter::Clue;
use crate::orchestrator::{Extractor, HtmlBackend, OrchestratorConfig, RefreshMode, SuccessCode, TierAttempt};
use crate::par;
use crate::pattern::PatternOptions;
use crate::rules::RuleSet;
use crate::storage::Stores;
use crate::types::{parse_amount, CurrencyCode, Price, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub url: PageUrl,
    /// Relative to the manifest's directory.
    pub local_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_amount: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_currency: Option<CurrencyCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl CorpusEntry {
    /// None unless both amount and currency are given.
    pub fn expected(&self) -> Option<Price> {
        let amount = parse_amount(self.expected_amount.as_deref()?)?;
        Some(Price::new(amount, self.expected_currency?))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<CorpusEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate url {0}")]
    DuplicateUrl(String),
    #[error("missing page {path} for {url}")]
    MissingPage { url: String, path: String },
    #[error("bad expected amount {amount:?} for {url}")]
    BadAmount { url: String, amount: String },
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut manifest: CorpusManifest = serde_json::from_str(&text).map_err(|source| CorpusError::Parse {
            path: path.display().to_string(),
            source,
        })?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.url.as_str()) {
                return Err(CorpusError::DuplicateUrl(e.url.as_str().to_string()));
            }
            let path = self.resolve(e);
            if !path.is_file() {
                return Err(CorpusError::MissingPage {
                    url: e.url.as_str().to_string(),
                    path: path.display().to_string(),
                });
            }
            if let Some(a) = &e.expected_amount {
                if parse_amount(a).is_none() {
                    return Err(CorpusError::BadAmount {
                        url: e.url.as_str().to_string(),
                        amount: a.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, entry: &CorpusEntry) -> PathBuf {
        self.base_dir.join(&entry.local_path)
    }

    /// URL-to-file mapping for the fetcher.
    pub fn index(&self) -> LocalIndex {
        let mut index = LocalIndex::new();
        for e in &self.entries {
            index.insert(&e.url, self.resolve(e));
        }
        index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Exact,
    Miss,
    Ambiguous,
    Unscored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryResult {
    pub url: PageUrl,
    pub category: Option<String>,
    pub code: SuccessCode,
    pub price: Option<Price>,
    pub expected: Option<Price>,
    pub candidate_count: Option<usize>,
    pub verdict: Verdict,
    pub tier_trace: Vec<TierAttempt>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub total: usize,
    pub exact: usize,
    pub miss: usize,
    pub ambiguous: usize,
    pub unscored: usize,
    pub entries: Vec<EntryResult>,
}

impl CorpusReport {
    fn from_entries(entries: Vec<EntryResult>) -> Self {
        let count = |v| entries.iter().filter(|e| e.verdict == v).count();
        CorpusReport {
            total: entries.len(),
            exact: count(Verdict::Exact),
            miss: count(Verdict::Miss),
            ambiguous: count(Verdict::Ambiguous),
            unscored: count(Verdict::Unscored),
            entries,
        }
    }

    pub fn entry(&self, url: &str) -> Option<&EntryResult> {
        self.entries.iter().find(|e| e.url.as_str() == url)
    }
}

#[derive(Debug, Clone)]
pub struct CorpusOptions {
    pub clues: Vec<Clue>,
    pub rules: RuleSet,
    pub pattern: PatternOptions,
    pub jobs: usize,
    pub now: Timestamp,
}

/// From-scratch extraction of every entry against empty stores. Entry order
/// and results do not depend on `jobs`.
pub fn run_corpus(manifest: &CorpusManifest, opts: &CorpusOptions) -> CorpusReport {
    let backend = HtmlBackend::new(
        Fetcher::with_index(FetchConfig::default(), manifest.index()),
        opts.clues.clone(),
        opts.rules.clone(),
    )
    .with_options(opts.pattern);
    let config = OrchestratorConfig::new(1, 2, RefreshMode::Literal).expect("static validities");

    let entries = par::map_with_jobs(&manifest.entries, opts.jobs, |entry| {
        let extractor = Extractor::new(&backend, Arc::new(Stores::default()), config).expect("validated config");
        let out = extractor
            .extract_at(&entry.url, "", opts.now)
            .expect("in-memory stores do not fail");
        let candidate_count = out.tier_trace.last().and_then(|t| t.candidate_count);
        let expected = entry.expected();
        let verdict = match expected {
            None => Verdict::Unscored,
            Some(_) if out.code == SuccessCode::NotFound && candidate_count.unwrap_or(0) > 1 => Verdict::Ambiguous,
            Some(p) if out.price == Some(p) => Verdict::Exact,
            Some(_) => Verdict::Miss,
        };
        EntryResult {
            url: entry.url.clone(),
            category: entry.category.clone(),
            code: out.code,
            price: out.price,
            expected,
            candidate_count,
            verdict,
            tier_trace: out.tier_trace,
        }
    });
    CorpusReport::from_entries(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fragmenter::default_clues;

    fn opts(jobs: usize) -> CorpusOptions {
        CorpusOptions {
            clues: default_clues(),
            rules: RuleSet::default_rules(),
            pattern: PatternOptions::default(),
            jobs,
            now: Timestamp(1_000),
        }
    }

    #[test]
    fn empty_manifest_reports_zero() {
        let report = run_corpus(&CorpusManifest::default(), &opts(1));
        assert_eq!(report, CorpusReport::default());
    }

    #[test]
    fn scoring_and_unscored() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.html"), "<p class=\"price\">$12.00</p>").unwrap();
        std::fs::write(dir.path().join("b.html"), "<p>$3</p><p>$4</p>").unwrap();
        std::fs::write(
            dir.path().join("m.json"),
            r#"{"entries":[
                {"url":"https://a.example/","local_path":"a.html","expected_amount":"12.00","expected_currency":"USD"},
                {"url":"https://b.example/","local_path":"b.html","expected_amount":"3","expected_currency":"USD"},
                {"url":"https://c.example/","local_path":"a.html"}
            ]}"#,
        )
        .unwrap();
        let m = CorpusManifest::load(&dir.path().join("m.json")).unwrap();
        let r = run_corpus(&m, &opts(1));
        assert_eq!((r.exact, r.ambiguous, r.unscored, r.miss), (1, 1, 1, 0));
        assert_eq!(r.entries[2].code, SuccessCode::FromScratch);
        assert_eq!(r, run_corpus(&m, &opts(3)));
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, r#"{"entries":[{"url":"https://a.example/","local_path":"nope.html"}]}"#).unwrap();
        assert!(matches!(CorpusManifest::load(&path), Err(CorpusError::MissingPage { .. })));
        std::fs::write(dir.path().join("a.html"), "x").unwrap();
        std::fs::write(
            &path,
            r#"{"entries":[{"url":"https://a.example/","local_path":"a.html"},{"url":"https://a.example/","local_path":"a.html"}]}"#,
        )
        .unwrap();
        assert!(matches!(CorpusManifest::load(&path), Err(CorpusError::DuplicateUrl(_))));
        std::fs::write(&path, "[").unwrap();
        assert!(matches!(CorpusManifest::load(&path), Err(CorpusError::Parse { .. })));
    }
}
