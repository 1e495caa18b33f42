//! Browserless retrieval of raw HTML.
//!
//! One GET per fetch, no script execution, no asset loading. Pages can also
//! be served from disk, either through `file://` URLs or through a local
//! index that maps page URLs to files, so every test runs offline.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::types::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UrlError {
    #[error("url {0:?} is not absolute")]
    NotAbsolute(String),
    #[error("unsupported scheme {scheme:?} in {url:?}")]
    UnsupportedScheme { url: String, scheme: String },
    #[error("url {0:?} has no host")]
    MissingHost(String),
}

/// An absolute page URL. `http`, `https` and `file` schemes are accepted;
/// `file://` URLs address local paths and report the host `localhost`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PageUrl {
    raw: String,
    host: String,
}

impl PageUrl {
    pub fn parse(raw: &str) -> Result<Self, UrlError> {
        let raw = raw.trim();
        if let Some(path) = raw.strip_prefix("file://") {
            if path.is_empty() {
                return Err(UrlError::MissingHost(raw.to_string()));
            }
            return Ok(PageUrl {
                raw: raw.to_string(),
                host: "localhost".to_string(),
            });
        }
        let parsed = url::Url::parse(raw).map_err(|_| UrlError::NotAbsolute(raw.to_string()))?;
        match parsed.scheme() {
            "http" | "https" => {}
            other => {
                return Err(UrlError::UnsupportedScheme {
                    url: raw.to_string(),
                    scheme: other.to_string(),
                })
            }
        }
        let host = parsed
            .host_str()
            .filter(|h| !h.is_empty())
            .ok_or_else(|| UrlError::MissingHost(raw.to_string()))?
            .to_ascii_lowercase();
        Ok(PageUrl {
            raw: raw.to_string(),
            host,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn host(&self) -> &str {
        &self.host
    }

    /// The local path addressed by a `file://` URL.
    pub fn file_path(&self) -> Option<PathBuf> {
        self.raw.strip_prefix("file://").map(PathBuf::from)
    }
}

impl fmt::Display for PageUrl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl std::str::FromStr for PageUrl {
    type Err = UrlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PageUrl::parse(s)
    }
}

impl Serialize for PageUrl {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.raw)
    }
}

impl<'de> Deserialize<'de> for PageUrl {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        PageUrl::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Network,
    LocalFile,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawHtml {
    pub body: String,
    pub fetched_at: Timestamp,
    pub source: Source,
    /// URL after following redirects; equal to the requested URL for local pages.
    pub final_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Unavailable {
    #[error("network error: {0}")]
    Network(String),
    #[error("http status {0}")]
    Status(u16),
    #[error("empty body")]
    EmptyBody,
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Anything that can test availability of and fetch raw pages.
pub trait PageSource: Send + Sync {
    fn is_available(&self, url: &PageUrl) -> bool;
    fn fetch_raw_html(&self, url: &PageUrl) -> Result<RawHtml, Unavailable>;
}

#[derive(Debug, Clone)]
pub struct FetchConfig {
    pub timeout: Duration,
    pub max_redirects: u32,
    pub user_agent: String,
    /// Treat a body with no visible text (only tags and whitespace) as empty.
    pub strict_empty_body: bool,
}

impl Default for FetchConfig {
    fn default() -> Self {
        FetchConfig {
            timeout: Duration::from_secs(10),
            max_redirects: 5,
            user_agent: concat!("wextractor/", env!("CARGO_PKG_VERSION"), " (browserless price extractor)")
                .to_string(),
            strict_empty_body: false,
        }
    }
}

/// Maps page URLs to files on disk.
#[derive(Debug, Clone, Default)]
pub struct LocalIndex {
    pages: HashMap<String, PathBuf>,
}

impl LocalIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, url: &PageUrl, path: impl Into<PathBuf>) {
        self.pages.insert(url.as_str().to_string(), path.into());
    }

    pub fn get(&self, url: &PageUrl) -> Option<&Path> {
        self.pages.get(url.as_str()).map(PathBuf::as_path)
    }

    pub fn len(&self) -> usize {
        self.pages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pages.is_empty()
    }
}

/// The default page source: HTTP(S) through a pooled blocking agent, plus
/// local files.
pub struct Fetcher {
    config: FetchConfig,
    agent: ureq::Agent,
    index: LocalIndex,
    last_stamp: AtomicI64,
}

impl Fetcher {
    pub fn new(config: FetchConfig) -> Self {
        Self::with_index(config, LocalIndex::default())
    }

    pub fn with_index(config: FetchConfig, index: LocalIndex) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .max_redirects(config.max_redirects)
            .user_agent(config.user_agent.as_str())
            .http_status_as_error(false)
            .build()
            .into();
        Fetcher {
            config,
            agent,
            index,
            last_stamp: AtomicI64::new(i64::MIN),
        }
    }

    pub fn index(&self) -> &LocalIndex {
        &self.index
    }

    fn stamp(&self) -> Timestamp {
        let now = Timestamp::now().0;
        let prev = self.last_stamp.fetch_max(now, Ordering::SeqCst);
        Timestamp(prev.max(now))
    }

    fn local_path(&self, url: &PageUrl) -> Option<PathBuf> {
        self.index
            .get(url)
            .map(Path::to_path_buf)
            .or_else(|| url.file_path())
    }

    fn check_body(&self, body: &str) -> Result<(), Unavailable> {
        let empty = if self.config.strict_empty_body {
            crate::html::visible_text(body).trim().is_empty()
        } else {
            body.trim().is_empty()
        };
        if empty {
            Err(Unavailable::EmptyBody)
        } else {
            Ok(())
        }
    }

    fn read_local(&self, url: &PageUrl, path: &Path) -> Result<RawHtml, Unavailable> {
        let bytes = std::fs::read(path).map_err(|e| Unavailable::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let body = String::from_utf8_lossy(&bytes).into_owned();
        self.check_body(&body)?;
        Ok(RawHtml {
            body,
            fetched_at: self.stamp(),
            source: Source::LocalFile,
            final_url: url.as_str().to_string(),
        })
    }

    fn get_network(&self, url: &PageUrl) -> Result<RawHtml, Unavailable> {
        use ureq::ResponseExt;

        let mut response = self
            .agent
            .get(url.as_str())
            .call()
            .map_err(|e| Unavailable::Network(e.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(Unavailable::Status(status));
        }
        let final_url = response.get_uri().to_string();
        // Charset comes from the Content-Type header, UTF-8 otherwise.
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| Unavailable::Network(e.to_string()))?;
        self.check_body(&body)?;
        Ok(RawHtml {
            body,
            fetched_at: self.stamp(),
            source: Source::Network,
            final_url,
        })
    }
}

impl Default for Fetcher {
    fn default() -> Self {
        Fetcher::new(FetchConfig::default())
    }
}

impl PageSource for Fetcher {
    fn is_available(&self, url: &PageUrl) -> bool {
        if let Some(path) = self.local_path(url) {
            return std::fs::read(&path)
                .map(|b| self.check_body(&String::from_utf8_lossy(&b)).is_ok())
                .unwrap_or(false);
        }
        self.get_network(url).is_ok()
    }

    fn fetch_raw_html(&self, url: &PageUrl) -> Result<RawHtml, Unavailable> {
        match self.local_path(url) {
            Some(path) => self.read_local(url, &path),
            None => self.get_network(url),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_http_and_file_urls() {
        let u = PageUrl::parse("https://www.Zingermans.com/Product.aspx?ProductID=A-ZDV").unwrap();
        assert_eq!(u.host(), "www.zingermans.com");
        let f = PageUrl::parse("file://fixtures/zingerman.html").unwrap();
        assert_eq!(f.host(), "localhost");
        assert_eq!(f.file_path().unwrap(), PathBuf::from("fixtures/zingerman.html"));
    }

    #[test]
    fn rejects_bad_urls() {
        assert!(matches!(
            PageUrl::parse("/relative/path"),
            Err(UrlError::NotAbsolute(_))
        ));
        assert!(matches!(
            PageUrl::parse("ftp://example.com/x"),
            Err(UrlError::UnsupportedScheme { .. })
        ));
        assert!(PageUrl::parse("file://").is_err());
    }

    #[test]
    fn missing_local_file_is_unavailable() {
        let fetcher = Fetcher::default();
        let url = PageUrl::parse("file:///definitely/not/here.html").unwrap();
        assert!(!fetcher.is_available(&url));
        assert!(matches!(fetcher.fetch_raw_html(&url), Err(Unavailable::Io { .. })));
    }

    #[test]
    fn local_fetch_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.html");
        std::fs::write(&path, "<p>$ 5</p>").unwrap();
        let url = PageUrl::parse(&format!("file://{}", path.display())).unwrap();
        let fetcher = Fetcher::default();
        assert!(fetcher.is_available(&url));
        let a = fetcher.fetch_raw_html(&url).unwrap();
        let b = fetcher.fetch_raw_html(&url).unwrap();
        assert_eq!(a.body, b.body);
        assert_eq!(a.source, Source::LocalFile);
        assert!(b.fetched_at >= a.fetched_at);
    }

    #[test]
    fn index_maps_real_url_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.html");
        std::fs::write(&path, "<span>$ 1</span>").unwrap();
        let url = PageUrl::parse("https://shop.example/item").unwrap();
        let mut index = LocalIndex::new();
        index.insert(&url, &path);
        let fetcher = Fetcher::with_index(FetchConfig::default(), index);
        let page = fetcher.fetch_raw_html(&url).unwrap();
        assert_eq!(page.body, "<span>$ 1</span>");
        assert_eq!(page.final_url, url.as_str());
    }

    #[test]
    fn whitespace_only_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blank.html");
        std::fs::write(&path, "  \n").unwrap();
        let url = PageUrl::parse(&format!("file://{}", path.display())).unwrap();
        let fetcher = Fetcher::default();
        assert_eq!(fetcher.fetch_raw_html(&url), Err(Unavailable::EmptyBody));
    }
}
