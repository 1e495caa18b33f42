//! Tier orchestration: availability, social, pointing pattern, from scratch.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::fetcher::{PageSource, PageUrl, RawHtml, Unavailable};
use crate::fragmenter::{extract_fragments, Clue};
use crate::pattern::{apply_pattern, derive_pattern, PatternCache, PatternOptions, PointingPattern};
use crate::rules::{select_price, FailureKind, RuleSet};
use crate::storage::{SocialRecord, StoreError, Stores};
use crate::types::{Price, Timestamp};

/// Result code of one extraction request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SuccessCode {
    Unavailable,
    NotFound,
    FromScratch,
    Pattern,
    Social,
}

impl SuccessCode {
    pub const ALL: [SuccessCode; 5] = [
        SuccessCode::Unavailable,
        SuccessCode::NotFound,
        SuccessCode::FromScratch,
        SuccessCode::Pattern,
        SuccessCode::Social,
    ];

    pub fn as_i8(self) -> i8 {
        match self {
            SuccessCode::Unavailable => -1,
            SuccessCode::NotFound => 0,
            SuccessCode::FromScratch => 1,
            SuccessCode::Pattern => 2,
            SuccessCode::Social => 3,
        }
    }

    pub fn from_i8(code: i8) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_i8() == code)
    }

    pub fn is_success(self) -> bool {
        self.as_i8() > 0
    }
}

impl Serialize for SuccessCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for SuccessCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let code = i8::deserialize(d)?;
        SuccessCode::from_i8(code).ok_or_else(|| serde::de::Error::custom(format!("bad success code {code}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    Availability,
    Social,
    Pattern,
    FromScratch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TierStatus {
    Hit,
    /// Nothing fresh stored for the url.
    Miss,
    /// A fresh pattern was stored but did not match the page.
    NoMatch,
    NoCandidate,
    Ambiguous,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierAttempt {
    pub tier: Tier,
    pub status: TierStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidate_count: Option<usize>,
}

impl TierAttempt {
    fn new(tier: Tier, status: TierStatus) -> Self {
        TierAttempt {
            tier,
            status,
            candidate_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionOutcome {
    pub code: SuccessCode,
    pub price: Option<Price>,
    pub url: PageUrl,
    pub entity: String,
    pub decided_at: Timestamp,
    pub tier_trace: Vec<TierAttempt>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unavailable: Option<String>,
}

/// How the stores are written after a cache-tier hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefreshMode {
    /// Stores are written only by from-scratch successes.
    Literal,
    /// A social hit re-stamps its record and a pattern hit writes a fresh
    /// social record. Pattern creation time moves only on code 1.
    #[default]
    RefreshOnSuccess,
    /// As `RefreshOnSuccess`, and every hit also re-stamps the stored
    /// pattern (on a social hit only if it still matches the page).
    RefreshAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    pub social_validity: i64,
    pub pattern_validity: i64,
    #[serde(default)]
    pub refresh_mode: RefreshMode,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("validities must satisfy 0 < social ({social}) < pattern ({pattern})")]
pub struct ConfigError {
    pub social: i64,
    pub pattern: i64,
}

impl OrchestratorConfig {
    pub fn new(social_validity: i64, pattern_validity: i64, refresh_mode: RefreshMode) -> Result<Self, ConfigError> {
        let c = OrchestratorConfig {
            social_validity,
            pattern_validity,
            refresh_mode,
        };
        c.validate().map(|_| c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if 0 < self.social_validity && self.social_validity < self.pattern_validity {
            Ok(())
        } else {
            Err(ConfigError {
                social: self.social_validity,
                pattern: self.pattern_validity,
            })
        }
    }
}

/// What a backend's full pipeline produced for a page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScratchOutcome {
    Found {
        price: Price,
        pattern: Option<PointingPattern>,
    },
    NotFound {
        kind: FailureKind,
        candidate_count: usize,
    },
}

/// Page access and the pipeline the orchestrator drives.
///
/// Per request the orchestrator calls `is_available` once, `fetch` at most
/// once (only when a cache tier misses) and `finish` last.
pub trait Backend: Send + Sync {
    type Page;

    fn is_available(&self, url: &PageUrl) -> Result<(), Unavailable>;
    fn fetch(&self, url: &PageUrl) -> Result<Self::Page, Unavailable>;
    fn apply_pattern(&self, page: &Self::Page, pattern: &PointingPattern) -> Option<Price>;
    #[allow(clippy::wrong_self_convention)]
    fn from_scratch(&self, page: &Self::Page, url: &PageUrl, now: Timestamp) -> ScratchOutcome;
    /// End of one request for `url`.
    fn finish(&self, _url: &PageUrl) {}
}

impl<B: Backend + ?Sized> Backend for &B {
    type Page = B::Page;

    fn is_available(&self, url: &PageUrl) -> Result<(), Unavailable> {
        (**self).is_available(url)
    }

    fn fetch(&self, url: &PageUrl) -> Result<Self::Page, Unavailable> {
        (**self).fetch(url)
    }

    fn apply_pattern(&self, page: &Self::Page, pattern: &PointingPattern) -> Option<Price> {
        (**self).apply_pattern(page, pattern)
    }

    fn from_scratch(&self, page: &Self::Page, url: &PageUrl, now: Timestamp) -> ScratchOutcome {
        (**self).from_scratch(page, url, now)
    }

    fn finish(&self, url: &PageUrl) {
        (**self).finish(url)
    }
}

/// Real pages through a [`PageSource`].
///
/// The availability check downloads the page; the body is held until the
/// same request's `fetch` or `finish`, so one request costs one download.
pub struct HtmlBackend<S> {
    pub source: S,
    pub clues: Vec<Clue>,
    pub rules: RuleSet,
    pub options: PatternOptions,
    cache: PatternCache,
    pending: Mutex<HashMap<String, RawHtml>>,
}

impl<S: PageSource> HtmlBackend<S> {
    pub fn new(source: S, clues: Vec<Clue>, rules: RuleSet) -> Self {
        HtmlBackend {
            source,
            clues,
            rules,
            options: PatternOptions::default(),
            cache: PatternCache::new(),
            pending: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_options(mut self, options: PatternOptions) -> Self {
        self.options = options;
        self
    }

    fn pending(&self) -> std::sync::MutexGuard<'_, HashMap<String, RawHtml>> {
        self.pending.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl<S: PageSource> Backend for HtmlBackend<S> {
    type Page = RawHtml;

    fn is_available(&self, url: &PageUrl) -> Result<(), Unavailable> {
        let page = self.source.fetch_raw_html(url)?;
        self.pending().insert(url.as_str().to_string(), page);
        Ok(())
    }

    fn fetch(&self, url: &PageUrl) -> Result<RawHtml, Unavailable> {
        let held = self.pending().remove(url.as_str());
        match held {
            Some(page) => Ok(page),
            None => self.source.fetch_raw_html(url),
        }
    }

    fn apply_pattern(&self, page: &RawHtml, pattern: &PointingPattern) -> Option<Price> {
        apply_pattern(&page.body, pattern, &self.cache)
    }

    fn from_scratch(&self, page: &RawHtml, url: &PageUrl, now: Timestamp) -> ScratchOutcome {
        let fragments = extract_fragments(page, &self.clues);
        match select_price(fragments, &self.rules) {
            Ok(sel) => {
                let price = sel.price();
                let pattern = derive_pattern(sel.winner(), &price, url, now, self.options);
                // A pattern that cannot find the price it came from is useless.
                let pattern = (apply_pattern(&page.body, &pattern, &self.cache) == Some(price)).then_some(pattern);
                ScratchOutcome::Found { price, pattern }
            }
            Err(fail) => ScratchOutcome::NotFound {
                kind: fail.kind,
                candidate_count: fail.candidate_count,
            },
        }
    }

    fn finish(&self, url: &PageUrl) {
        self.pending().remove(url.as_str());
    }
}

/// Runs requests through the tiers, reading and writing `stores`.
pub struct Extractor<B> {
    backend: B,
    stores: Arc<Stores>,
    config: OrchestratorConfig,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl<B: Backend> Extractor<B> {
    pub fn new(backend: B, stores: Arc<Stores>, config: OrchestratorConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Extractor {
            backend,
            stores,
            config,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn stores(&self) -> &Stores {
        &self.stores
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn extract(&self, url: &PageUrl, entity: &str) -> Result<ExtractionOutcome, StoreError> {
        self.extract_at(url, entity, Timestamp::now())
    }

    fn url_lock(&self, url: &PageUrl) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(url.as_str().to_string()).or_default().clone()
    }

    /// One request at logical time `now`. Requests for the same url are
    /// serialized; different urls run concurrently.
    pub fn extract_at(&self, url: &PageUrl, entity: &str, now: Timestamp) -> Result<ExtractionOutcome, StoreError> {
        let lock = self.url_lock(url);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let out = self.run_tiers(url, entity, now);
        self.backend.finish(url);
        out
    }

    fn run_tiers(&self, url: &PageUrl, entity: &str, now: Timestamp) -> Result<ExtractionOutcome, StoreError> {
        let mut out = ExtractionOutcome {
            code: SuccessCode::NotFound,
            price: None,
            url: url.clone(),
            entity: entity.to_string(),
            decided_at: now,
            tier_trace: Vec::with_capacity(4),
            unavailable: None,
        };
        let refresh = self.config.refresh_mode != RefreshMode::Literal;
        let restamp_pattern = self.config.refresh_mode == RefreshMode::RefreshAll;

        let unavailable = |mut out: ExtractionOutcome, tier, e: Unavailable| {
            out.code = SuccessCode::Unavailable;
            out.unavailable = Some(e.to_string());
            out.tier_trace.push(TierAttempt::new(tier, TierStatus::Failed));
            Ok(out)
        };

        if let Err(e) = self.backend.is_available(url) {
            return unavailable(out, Tier::Availability, e);
        }
        out.tier_trace.push(TierAttempt::new(Tier::Availability, TierStatus::Hit));

        if let Some(hit) = self.stores.social.get(url, None, now, self.config.social_validity) {
            out.tier_trace.push(TierAttempt::new(Tier::Social, TierStatus::Hit));
            out.code = SuccessCode::Social;
            out.price = Some(hit.price);
            if restamp_pattern {
                if let Some(p) = self.stores.patterns.peek(url) {
                    self.stores.patterns.put(PointingPattern { created_at: now, ..p })?;
                }
            }
            if refresh {
                self.stores.social.put(SocialRecord {
                    observed_at: now,
                    ..hit
                })?;
            }
            return Ok(out);
        }
        out.tier_trace.push(TierAttempt::new(Tier::Social, TierStatus::Miss));

        let mut page = None;
        match self.stores.patterns.get(url, now, self.config.pattern_validity) {
            Some(pattern) => {
                let fetched = match self.backend.fetch(url) {
                    Ok(p) => p,
                    Err(e) => return unavailable(out, Tier::Pattern, e),
                };
                match self.backend.apply_pattern(&fetched, &pattern) {
                    Some(price) => {
                        out.tier_trace.push(TierAttempt::new(Tier::Pattern, TierStatus::Hit));
                        out.code = SuccessCode::Pattern;
                        out.price = Some(price);
                        if refresh {
                            self.put_social(url, entity, price, now)?;
                        }
                        if restamp_pattern {
                            self.stores.patterns.put(PointingPattern {
                                created_at: now,
                                ..pattern
                            })?;
                        }
                        return Ok(out);
                    }
                    None => out.tier_trace.push(TierAttempt::new(Tier::Pattern, TierStatus::NoMatch)),
                }
                page = Some(fetched);
            }
            None => out.tier_trace.push(TierAttempt::new(Tier::Pattern, TierStatus::Miss)),
        }

        let page = match page {
            Some(p) => p,
            None => match self.backend.fetch(url) {
                Ok(p) => p,
                Err(e) => return unavailable(out, Tier::FromScratch, e),
            },
        };
        match self.backend.from_scratch(&page, url, now) {
            ScratchOutcome::Found { price, pattern } => {
                let mut attempt = TierAttempt::new(Tier::FromScratch, TierStatus::Hit);
                attempt.candidate_count = Some(1);
                out.tier_trace.push(attempt);
                out.code = SuccessCode::FromScratch;
                out.price = Some(price);
                self.put_social(url, entity, price, now)?;
                if let Some(p) = pattern {
                    self.stores.patterns.put(p)?;
                }
            }
            ScratchOutcome::NotFound { kind, candidate_count } => {
                let status = match kind {
                    FailureKind::NoCandidate => TierStatus::NoCandidate,
                    FailureKind::Ambiguous => TierStatus::Ambiguous,
                };
                let mut attempt = TierAttempt::new(Tier::FromScratch, status);
                attempt.candidate_count = Some(candidate_count);
                out.tier_trace.push(attempt);
            }
        }
        Ok(out)
    }

    fn put_social(&self, url: &PageUrl, entity: &str, price: Price, now: Timestamp) -> Result<(), StoreError> {
        self.stores.social.put(SocialRecord {
            entity: entity.to_string(),
            url: url.clone(),
            price,
            observed_at: now,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::CurrencyCode;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Counts calls; `found` decides the from-scratch result.
    #[derive(Default)]
    struct Stub {
        available: bool,
        found: bool,
        pattern_matches: bool,
        /// Available, but the fetch itself fails.
        vanishes: bool,
        checks: AtomicUsize,
        fetches: AtomicUsize,
        scratches: AtomicUsize,
        applies: AtomicUsize,
    }

    fn stub(available: bool, found: bool) -> Stub {
        Stub {
            available,
            found,
            pattern_matches: true,
            ..Stub::default()
        }
    }

    const PRICE: Price = Price::new(12_500, CurrencyCode::USD);

    impl Backend for Stub {
        type Page = ();

        fn is_available(&self, _: &PageUrl) -> Result<(), Unavailable> {
            self.checks.fetch_add(1, Ordering::SeqCst);
            if self.available {
                Ok(())
            } else {
                Err(Unavailable::Status(404))
            }
        }

        fn fetch(&self, _: &PageUrl) -> Result<(), Unavailable> {
            self.fetches.fetch_add(1, Ordering::SeqCst);
            if self.vanishes {
                Err(Unavailable::Status(503))
            } else {
                Ok(())
            }
        }

        fn apply_pattern(&self, _: &(), _: &PointingPattern) -> Option<Price> {
            self.applies.fetch_add(1, Ordering::SeqCst);
            self.pattern_matches.then_some(PRICE)
        }

        fn from_scratch(&self, _: &(), url: &PageUrl, now: Timestamp) -> ScratchOutcome {
            self.scratches.fetch_add(1, Ordering::SeqCst);
            if self.found {
                let pattern = PointingPattern::new(url.clone(), r"\$([0-9]+)".into(), CurrencyCode::USD, now).unwrap();
                ScratchOutcome::Found {
                    price: PRICE,
                    pattern: Some(pattern),
                }
            } else {
                ScratchOutcome::NotFound {
                    kind: FailureKind::Ambiguous,
                    candidate_count: 2,
                }
            }
        }
    }

    fn url() -> PageUrl {
        PageUrl::parse("https://shop.example/item").unwrap()
    }

    fn extractor(b: Stub, mode: RefreshMode) -> Extractor<Stub> {
        let config = OrchestratorConfig::new(10, 20, mode).unwrap();
        Extractor::new(b, Arc::new(Stores::default()), config).unwrap()
    }

    fn codes(x: &Extractor<Stub>, times: &[i64]) -> Vec<i8> {
        times
            .iter()
            .map(|&t| x.extract_at(&url(), "item", Timestamp(t)).unwrap().code.as_i8())
            .collect()
    }

    #[test]
    fn config_invariant() {
        assert!(OrchestratorConfig::new(10, 10, RefreshMode::Literal).is_err());
        assert!(OrchestratorConfig::new(0, 10, RefreshMode::Literal).is_err());
        assert!(OrchestratorConfig::new(9, 10, RefreshMode::Literal).is_ok());
    }

    #[test]
    fn unavailable_short_circuits() {
        let x = extractor(stub(false, true), RefreshMode::Literal);
        let out = x.extract_at(&url(), "item", Timestamp(0)).unwrap();
        assert_eq!(out.code, SuccessCode::Unavailable);
        assert_eq!(out.price, None);
        assert_eq!(x.backend().scratches.load(Ordering::SeqCst), 0);
        assert!(x.stores().social.is_empty() && x.stores().patterns.is_empty());
    }

    #[test]
    fn literal_tier_sequence() {
        let x = extractor(stub(true, true), RefreshMode::Literal);
        assert_eq!(codes(&x, &[0, 5, 15, 25]), vec![1, 3, 2, 1]);
        // Social hits need no page.
        assert_eq!(x.backend().checks.load(Ordering::SeqCst), 4);
        assert_eq!(x.backend().fetches.load(Ordering::SeqCst), 3);
        assert_eq!(x.backend().scratches.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn refresh_mode_extends_social() {
        let x = extractor(stub(true, true), RefreshMode::RefreshOnSuccess);
        // The hit at 5 moves the record to 5; 14 is inside, 24 is not, and
        // the pattern created at 0 has expired by then.
        assert_eq!(codes(&x, &[0, 5, 14, 24]), vec![1, 3, 3, 1]);
    }

    #[test]
    fn refresh_all_depends_only_on_gap() {
        let x = extractor(stub(true, true), RefreshMode::RefreshAll);
        assert_eq!(codes(&x, &[0, 5, 14, 24, 43, 63]), vec![1, 3, 3, 2, 2, 1]);
        let mut b = stub(true, true);
        b.pattern_matches = false;
        let x = extractor(b, RefreshMode::RefreshAll);
        // Re-stamped at 5, fresh at 21, but it no longer matches.
        assert_eq!(codes(&x, &[0, 5, 21]), vec![1, 3, 1]);
        assert_eq!(x.backend().applies.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn pattern_hit_writes_social_in_refresh_mode() {
        let x = extractor(stub(true, true), RefreshMode::RefreshOnSuccess);
        assert_eq!(codes(&x, &[0, 12, 15]), vec![1, 2, 3]);
        let lit = extractor(stub(true, true), RefreshMode::Literal);
        assert_eq!(codes(&lit, &[0, 12, 15]), vec![1, 2, 2]);
    }

    #[test]
    fn pattern_no_match_falls_through() {
        let mut b = stub(true, true);
        b.pattern_matches = false;
        let x = extractor(b, RefreshMode::Literal);
        let _ = x.extract_at(&url(), "item", Timestamp(0)).unwrap();
        let out = x.extract_at(&url(), "item", Timestamp(12)).unwrap();
        assert_eq!(out.code, SuccessCode::FromScratch);
        assert_eq!(out.tier_trace[2].status, TierStatus::NoMatch);
    }

    #[test]
    fn fetch_failure_after_check_is_unavailable() {
        let mut b = stub(true, true);
        b.vanishes = true;
        let x = extractor(b, RefreshMode::Literal);
        let out = x.extract_at(&url(), "item", Timestamp(0)).unwrap();
        assert_eq!(out.code, SuccessCode::Unavailable);
        assert_eq!(out.tier_trace.last().unwrap().tier, Tier::FromScratch);
        assert_eq!(x.backend().scratches.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn not_found_keeps_stores_clean() {
        let x = extractor(stub(true, false), RefreshMode::RefreshOnSuccess);
        let out = x.extract_at(&url(), "item", Timestamp(0)).unwrap();
        assert_eq!(out.code, SuccessCode::NotFound);
        assert_eq!(out.tier_trace.last().unwrap().candidate_count, Some(2));
        assert!(x.stores().social.is_empty() && x.stores().patterns.is_empty());
    }

    #[test]
    fn code_serializes_as_integer() {
        assert_eq!(serde_json::to_string(&SuccessCode::Unavailable).unwrap(), "-1");
        assert_eq!(serde_json::from_str::<SuccessCode>("3").unwrap(), SuccessCode::Social);
        assert!(serde_json::from_str::<SuccessCode>("4").is_err());
    }
}
