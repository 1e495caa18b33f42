//! Browserless product price extraction.
//!
//! Raw HTML is split into fragments around currency clues, weighted by
//! ordered discard and recover rules, and the unique surviving price is
//! returned. Successful extractions are cached twice: as a time-stamped
//! social record and as a pointing pattern (an anchored regex) that later
//! visits try before running the full pipeline again.

pub mod corpus;
pub mod fetcher;
pub mod fragmenter;
pub mod html;
pub mod matcher;
pub mod orchestrator;
pub mod par;
pub mod pattern;
pub mod rules;
pub mod service;
pub mod simulator;
pub mod storage;
pub mod types;

pub use fetcher::{PageSource, PageUrl, RawHtml};
pub use fragmenter::{Clue, Fragment};
pub use rules::{CandidatePrice, RuleSet};
pub use types::{CurrencyCode, Price, Timestamp};
pub use orchestrator::{Extractor, ExtractionOutcome, HtmlBackend, OrchestratorConfig, RefreshMode, SuccessCode};
pub use storage::Stores;
