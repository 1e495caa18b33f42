//! Pointing patterns: per-page regexes that re-locate the main price.
//!
//! A pattern is derived from the winning fragment of a from-scratch
//! extraction: a literal anchor (the attribute string of the element holding
//! the price), the currency token as spelled in the source, and a numeric
//! matcher widened around the observed number of integer digits so that
//! moderate price changes still match.

use std::collections::HashMap;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::fetcher::PageUrl;
use crate::fragmenter::Fragment;
use crate::html;
use crate::rules::{locate_price, NumberSide};
use crate::types::{parse_amount, CurrencyCode, Price, Timestamp};

/// Whitespace, no-break spaces or inline tags between the currency token and
/// the digits.
const SPACER: &str = r"(?:\s|&nbsp;|&#160;|<[^<>]{0,80}>){0,6}";
/// Optional decimal part, possibly behind a tag (`1.104<span>,15</span>`).
const DECIMALS: &str = r"(?:(?:\s|<[^<>]{0,80}>){0,4}[.,][0-9]{1,2})?";
const FALLBACK_ANCHOR_CHARS: usize = 30;
const MAX_GAP: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum PatternError {
    #[error("pattern does not compile: {0}")]
    Compile(#[from] regex::Error),
    #[error("pattern must have exactly one capturing group, found {0}")]
    CaptureCount(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPattern")]
pub struct PointingPattern {
    pub url: PageUrl,
    pub regex_source: String,
    pub currency: CurrencyCode,
    pub created_at: Timestamp,
}

#[derive(Deserialize)]
struct RawPattern {
    url: PageUrl,
    regex_source: String,
    currency: CurrencyCode,
    created_at: Timestamp,
}

impl TryFrom<RawPattern> for PointingPattern {
    type Error = PatternError;

    fn try_from(raw: RawPattern) -> Result<Self, Self::Error> {
        PointingPattern::new(raw.url, raw.regex_source, raw.currency, raw.created_at)
    }
}

impl PointingPattern {
    pub fn new(
        url: PageUrl,
        regex_source: String,
        currency: CurrencyCode,
        created_at: Timestamp,
    ) -> Result<Self, PatternError> {
        let re = Regex::new(&regex_source)?;
        let groups = re.captures_len() - 1;
        if groups != 1 {
            return Err(PatternError::CaptureCount(groups));
        }
        Ok(PointingPattern {
            url,
            regex_source,
            currency,
            created_at,
        })
    }

    /// Skips validation; only for callers that never compile the source.
    pub(crate) fn unchecked(
        url: PageUrl,
        regex_source: &str,
        currency: CurrencyCode,
        created_at: Timestamp,
    ) -> Self {
        PointingPattern {
            url,
            regex_source: regex_source.to_string(),
            currency,
            created_at,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PatternOptions {
    /// Use `{d-1,d}` for the integer digits instead of `{d-1,d+1}`.
    pub narrow_quantifier: bool,
}

fn integer_matcher(digits: usize, opts: PatternOptions) -> String {
    let lo = digits.saturating_sub(1).max(1);
    let hi = if opts.narrow_quantifier {
        digits.max(lo)
    } else {
        digits + 1
    };
    format!(r"(?:[0-9]{{1,3}}(?:[.,'][0-9]{{3}})+|[0-9]{{{lo},{hi}}})")
}

fn escape_gap(gap: &str) -> String {
    let mut out = String::new();
    let mut rest = gap;
    while !rest.is_empty() {
        let digit_at = rest.find(|c: char| c.is_ascii_digit()).unwrap_or(rest.len());
        out.push_str(&regex::escape(&rest[..digit_at]));
        rest = &rest[digit_at..];
        let run = rest.bytes().take_while(u8::is_ascii_digit).count();
        if run > 0 {
            out.push_str(&format!("[0-9]{{1,{}}}", run + 1));
            rest = &rest[run..];
        }
    }
    out
}

fn skip_entity_back(s: &str, p: usize) -> Option<usize> {
    ["&nbsp;", "&#160;"]
        .iter()
        .find(|e| s[..p].ends_with(*e))
        .map(|e| p - e.len())
}

/// Start of a number of `digits` digits that ends just before `clue_at`,
/// walking back over tags, whitespace and separators.
fn number_start_before(s: &str, clue_at: usize, digits: usize) -> Option<usize> {
    let mut p = clue_at;
    let mut seen = 0;
    let mut start = None;
    while seen < digits && p > 0 {
        let prev = s[..p].chars().next_back()?;
        if prev == '>' {
            p = s[..p].rfind('<')?;
        } else if let Some(q) = (prev == ';').then(|| skip_entity_back(s, p)).flatten() {
            p = q;
        } else if prev.is_ascii_digit() {
            seen += 1;
            p -= 1;
            start = Some(p);
        } else if matches!(prev, '.' | ',' | '\'') || prev.is_whitespace() {
            p -= prev.len_utf8();
        } else {
            return None;
        }
    }
    (seen == digits).then_some(start).flatten()
}

/// The literal anchor for a price token starting at `token_at` in the
/// fragment: the innermost enclosing element with an `id` or `class`, plus
/// the raw text between its opening tag and the token.
fn anchor(fragment: &Fragment, token_at: usize) -> String {
    let src = fragment.html.as_str();
    let doc = html::scan(src);
    let enclosing = doc
        .elements
        .iter()
        .filter(|el| el.open_end <= token_at && token_at < el.content_end.max(el.open_end + 1))
        .filter(|el| {
            html::attributes(&src[el.start..el.open_end])
                .iter()
                .any(|(n, _)| n == "id" || n == "class")
        })
        .max_by_key(|el| el.start);
    if let Some(el) = enclosing {
        let gap = &src[el.open_end..token_at];
        if gap.len() <= MAX_GAP {
            let attrs = html::attr_string(&src[el.start..el.open_end]);
            return format!("{}>{}", regex::escape(attrs), escape_gap(gap));
        }
    }
    let preceding = &src[..token_at];
    let from = preceding
        .char_indices()
        .rev()
        .nth(FALLBACK_ANCHOR_CHARS - 1)
        .map_or(0, |(i, _)| i);
    regex::escape(&preceding[from..])
}

fn integer_digits(price: &Price) -> usize {
    let units = price.amount_minor / 100;
    units.to_string().len()
}

/// Builds the pointing pattern for `url` from the fragment that won a
/// from-scratch extraction with `price`.
pub fn derive_pattern(
    fragment: &Fragment,
    price: &Price,
    url: &PageUrl,
    now: Timestamp,
    opts: PatternOptions,
) -> PointingPattern {
    let clue_at = fragment.clue_offset - fragment.start_offset;
    let clue_re = regex::escape(fragment.clue_source());
    let number = format!("({}{})", integer_matcher(integer_digits(price), opts), DECIMALS);
    let side = locate_price(fragment).map(|(_, side)| side);
    let source = match side {
        Some(NumberSide::BeforeClue { digits }) => {
            let start = number_start_before(&fragment.html, clue_at, digits).unwrap_or(clue_at);
            format!("{}{number}{SPACER}{clue_re}", anchor(fragment, start))
        }
        _ => format!("{}{clue_re}{SPACER}{number}(?:[^0-9]|$)", anchor(fragment, clue_at)),
    };
    PointingPattern::unchecked(url.clone(), &source, price.currency, now)
}

/// Compiled regexes shared across extractions.
#[derive(Debug, Default)]
pub struct PatternCache {
    compiled: Mutex<HashMap<String, Regex>>,
}

impl PatternCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, source: &str) -> Result<Regex, regex::Error> {
        let mut map = self.compiled.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(re) = map.get(source) {
            return Ok(re.clone());
        }
        let re = Regex::new(source)?;
        map.insert(source.to_string(), re.clone());
        Ok(re)
    }

    pub fn len(&self) -> usize {
        self.compiled.lock().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Applies a pattern to raw HTML; the first match wins.
pub fn apply_pattern(page: &str, pattern: &PointingPattern, cache: &PatternCache) -> Option<Price> {
    let re = cache.get(&pattern.regex_source).ok()?;
    let caps = re.captures(page)?;
    let number = html::visible_text(caps.get(1)?.as_str());
    parse_amount(&number).map(|amount| Price::new(amount, pattern.currency))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fragmenter::{extract_fragments_with, Clue, FragmenterConfig};
    use crate::rules::{select_price, RuleSet};
    use proptest::prelude::*;

    const F1: &str = r#"<span id="ctl00" class="price">$ 125</span>"#;

    fn url() -> PageUrl {
        PageUrl::parse("https://www.zingermans.com/Product.aspx?ProductID=A-ZDV").unwrap()
    }

    fn clues() -> Vec<Clue> {
        vec![
            Clue::new("$", CurrencyCode::USD),
            Clue::new("€", CurrencyCode::EUR),
            Clue::new("&euro;", CurrencyCode::EUR),
        ]
    }

    fn winner(src: &str) -> (Fragment, Price) {
        let frags = extract_fragments_with(src, &clues(), &FragmenterConfig::default());
        let sel = select_price(frags, &RuleSet::parse("s|discard|contains_text|SAVE").unwrap()).unwrap();
        (sel.winner().clone(), sel.price())
    }

    fn derive(src: &str, opts: PatternOptions) -> PointingPattern {
        let (f, p) = winner(src);
        derive_pattern(&f, &p, &url(), Timestamp(7), opts)
    }

    #[test]
    fn f1_pattern_shape() {
        let pp = derive(F1, PatternOptions::default());
        assert!(pp.regex_source.starts_with(r#"id="ctl00" class="price">\$"#), "{}", pp.regex_source);
        assert!(pp.regex_source.contains("[0-9]{2,4}"));
        assert_eq!(pp.created_at, Timestamp(7));
        assert!(PointingPattern::new(pp.url.clone(), pp.regex_source.clone(), pp.currency, pp.created_at).is_ok());

        let cache = PatternCache::new();
        let page = format!("<div>{F1}<div class=\"saving\">SAVE10%=&euro;12.80</div></div>");
        assert_eq!(apply_pattern(&page, &pp, &cache), Some(Price::new(12_500, CurrencyCode::USD)));
        let cheaper = page.replace("$ 125", "$99.50");
        assert_eq!(apply_pattern(&cheaper, &pp, &cache), Some(Price::new(9_950, CurrencyCode::USD)));
        let mutated = page.replace("$ 125", "$ 98");
        assert_eq!(apply_pattern(&mutated, &pp, &cache), Some(Price::new(9_800, CurrencyCode::USD)));
        let removed = page.replace(F1, "");
        assert_eq!(apply_pattern(&removed, &pp, &cache), None);
    }

    #[test]
    fn narrow_quantifier() {
        let pp = derive(F1, PatternOptions { narrow_quantifier: true });
        assert!(pp.regex_source.contains("[0-9]{2,3}"), "{}", pp.regex_source);
        let cache = PatternCache::new();
        assert_eq!(apply_pattern(&F1.replace("125", "1250"), &pp, &cache), None);
    }

    #[test]
    fn minimal_fragment_falls_back_to_preceding_chars() {
        let pp = derive("<b>€5</b>", PatternOptions::default());
        assert!(pp.regex_source.starts_with("<b>€"), "{}", pp.regex_source);
        assert!(pp.regex_source.contains("[0-9]{1,2}"));
        let cache = PatternCache::new();
        assert_eq!(apply_pattern("<p>x</p><b>€7</b>", &pp, &cache), Some(Price::new(700, CurrencyCode::EUR)));
    }

    #[test]
    fn number_before_split_markup() {
        let src = r#"<li><span class="current sale">1.104<span class="cents">,15</span><span class="currency">&euro;</span></span></li>"#;
        let pp = derive(src, PatternOptions::default());
        assert!(pp.regex_source.starts_with(r#"class="current sale">("#), "{}", pp.regex_source);
        let cache = PatternCache::new();
        assert_eq!(apply_pattern(src, &pp, &cache), Some(Price::new(110_415, CurrencyCode::EUR)));
        let cheaper = src.replace("1.104", "998");
        assert_eq!(apply_pattern(&cheaper, &pp, &cache), Some(Price::new(99_815, CurrencyCode::EUR)));
    }

    #[test]
    fn derivation_is_deterministic() {
        let a = derive(F1, PatternOptions::default());
        let b = derive(F1, PatternOptions::default());
        assert_eq!(a.regex_source, b.regex_source);
    }

    #[test]
    fn rejects_patterns_without_one_group() {
        let err = PointingPattern::new(url(), "[0-9]+".into(), CurrencyCode::USD, Timestamp(0)).unwrap_err();
        assert!(matches!(err, PatternError::CaptureCount(0)));
        let err = PointingPattern::new(url(), "(".into(), CurrencyCode::USD, Timestamp(0)).unwrap_err();
        assert!(matches!(err, PatternError::Compile(_)));
    }

    #[test]
    fn json_record_validates() {
        let pp = derive(F1, PatternOptions::default());
        let line = serde_json::to_string(&pp).unwrap();
        assert!(line.contains("\"regex_source\""));
        let back: PointingPattern = serde_json::from_str(&line).unwrap();
        assert_eq!(back, pp);
        let bad = line.replace("((?:", "(?:(?:");
        assert!(serde_json::from_str::<PointingPattern>(&bad).is_err());
    }

    #[test]
    fn gap_digits_are_generalized() {
        assert_eq!(escape_gap("x 12 y"), r"x [0-9]{1,3} y");
        assert_eq!(escape_gap(""), "");
    }

    proptest! {
        #[test]
        fn integer_drift_still_matches(d_offset in 0usize..3, seed in any::<u64>()) {
            // Observed price $125 has d = 3 integer digits.
            let len = 2 + d_offset;
            let mut digits = String::new();
            let mut s = seed;
            for i in 0..len {
                let lo = if i == 0 { 1 } else { 0 };
                digits.push(char::from(b'0' + (lo + (s % (10 - lo as u64)) as u8)));
                s /= 7;
            }
            let pp = derive(F1, PatternOptions::default());
            let page = F1.replace("125", &digits);
            let expected: u64 = digits.parse::<u64>().unwrap() * 100;
            prop_assert_eq!(
                apply_pattern(&page, &pp, &PatternCache::new()),
                Some(Price::new(expected, CurrencyCode::USD))
            );
        }
    }
}
