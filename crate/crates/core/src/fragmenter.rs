//! Clue-driven fragmentation: every occurrence of a currency clue in the
//! page text becomes a fragment, the smallest element enclosing it.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fetcher::RawHtml;
use crate::html;
use crate::types::CurrencyCode;

/// The clue bundle used when no clue file is configured.
pub const DEFAULT_CLUES: &str = "\
# symbol,ISO-4217
$,USD
€,EUR
&euro;,EUR
£,GBP
USD,USD
EUR,EUR
GBP,GBP
";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Clue {
    pub text: String,
    pub currency_code: CurrencyCode,
}

impl Clue {
    pub fn new(text: impl Into<String>, currency_code: CurrencyCode) -> Self {
        Clue {
            text: text.into(),
            currency_code,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClueError {
    #[error("clue file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("cannot read clue file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Parses clue lines of the form `symbol,ISO-code`. Blank lines and lines
/// starting with `#` are skipped; repeated symbols keep their first entry.
pub fn parse_clues(src: &str) -> Result<Vec<Clue>, ClueError> {
    let mut clues: Vec<Clue> = Vec::new();
    for (n, line) in src.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| ClueError::Malformed {
            line: n + 1,
            reason,
        };
        let (text, code) = line
            .rsplit_once(',')
            .ok_or_else(|| malformed(format!("expected `symbol,CODE`, got {line:?}")))?;
        let text = text.trim();
        if text.is_empty() {
            return Err(malformed("empty clue symbol".into()));
        }
        let currency_code = code
            .trim()
            .parse::<CurrencyCode>()
            .map_err(|e| malformed(e.to_string()))?;
        if !clues.iter().any(|c| c.text == text) {
            clues.push(Clue::new(text, currency_code));
        }
    }
    Ok(clues)
}

pub fn load_clues(path: &Path) -> Result<Vec<Clue>, ClueError> {
    let src = std::fs::read_to_string(path).map_err(|source| ClueError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_clues(&src)
}

pub fn default_clues() -> Vec<Clue> {
    parse_clues(DEFAULT_CLUES).expect("bundled clues parse")
}

/// A piece of the page source around one clue occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub html: String,
    pub start_offset: usize,
    pub end_offset: usize,
    pub clue: Clue,
    /// Absolute offset of the clue occurrence in the page source.
    pub clue_offset: usize,
    /// Byte length of the occurrence as spelled in the source.
    pub clue_len: usize,
    pub weight: u32,
}

impl Fragment {
    /// The clue exactly as it appears in the source (`&euro;`, `€`, ...).
    pub fn clue_source(&self) -> &str {
        let at = self.clue_offset - self.start_offset;
        &self.html[at..at + self.clue_len]
    }

    /// Raw fragment text before and after the clue occurrence.
    pub fn split_at_clue(&self) -> (&str, &str) {
        let at = self.clue_offset - self.start_offset;
        (&self.html[..at], &self.html[at + self.clue_len..])
    }

    /// The fragment's first opening tag, if it starts with one.
    pub fn opening_tag(&self) -> Option<&str> {
        if !self.html.starts_with('<') {
            return None;
        }
        let end = self.html.find('>').map_or(self.html.len(), |p| p + 1);
        Some(&self.html[..end])
    }

    pub fn text(&self) -> String {
        html::visible_text(&self.html)
    }
}

#[derive(Debug, Clone)]
pub struct FragmenterConfig {
    /// Maximum fragment length in characters.
    pub max_chars: usize,
    /// Widen to the parent element when the innermost one has no digit.
    pub widen_digitless: bool,
}

impl Default for FragmenterConfig {
    fn default() -> Self {
        FragmenterConfig {
            max_chars: 1000,
            widen_digitless: true,
        }
    }
}

struct Occurrence {
    start: usize,
    end: usize,
    clue: usize,
    parent: Option<usize>,
    node: (usize, usize),
}

fn boundary_ok(text: &str, start: usize, end: usize, variant: &str) -> bool {
    let first_alnum = variant.chars().next().is_some_and(char::is_alphanumeric);
    let last_alnum = variant.chars().last().is_some_and(char::is_alphanumeric);
    let before_ok = !first_alnum
        || text[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
    let after_ok = !last_alnum || text[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
    before_ok && after_ok
}

fn find_occurrences(src: &str, doc: &html::Document, clues: &[Clue]) -> Vec<Occurrence> {
    let variants: Vec<(usize, String)> = clues
        .iter()
        .enumerate()
        .flat_map(|(i, c)| html::entity_variants(&c.text).into_iter().map(move |v| (i, v)))
        .collect();
    let mut found = Vec::new();
    for node in &doc.texts {
        let text = &src[node.start..node.end];
        for (clue, variant) in &variants {
            for (at, m) in text.match_indices(variant.as_str()) {
                if boundary_ok(text, at, at + m.len(), variant) {
                    found.push(Occurrence {
                        start: node.start + at,
                        end: node.start + at + m.len(),
                        clue: *clue,
                        parent: node.parent,
                        node: (node.start, node.end),
                    });
                }
            }
        }
    }
    // Overlapping matches collapse to one: earliest, then longest, then the
    // first-listed clue.
    found.sort_by(|a, b| {
        a.start
            .cmp(&b.start)
            .then((b.end - b.start).cmp(&(a.end - a.start)))
            .then(a.clue.cmp(&b.clue))
    });
    let mut kept: Vec<Occurrence> = Vec::with_capacity(found.len());
    for occ in found {
        if kept.last().is_none_or(|k| occ.start >= k.end) {
            kept.push(occ);
        }
    }
    kept
}

fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// A window of at most `max_chars` characters inside `[lo, hi)` that keeps
/// `[clue_start, clue_end)` and is centered on it where possible.
fn clamp_window(
    src: &str,
    lo: usize,
    hi: usize,
    clue_start: usize,
    clue_end: usize,
    max_chars: usize,
) -> (usize, usize) {
    let clue_chars = char_len(&src[clue_start..clue_end]);
    let budget = max_chars.saturating_sub(clue_chars);
    let mut left = budget / 2;
    let mut right = budget - left;
    let before: Vec<usize> = src[lo..clue_start].char_indices().map(|(i, _)| lo + i).collect();
    let after_chars = char_len(&src[clue_end..hi]);
    // Hand unused budget from one side to the other.
    if before.len() < left {
        right += left - before.len();
        left = before.len();
    }
    if after_chars < right {
        left = (left + right - after_chars).min(before.len());
        right = after_chars;
    }
    let start = if left == 0 {
        clue_start
    } else {
        before[before.len() - left]
    };
    let end = src[clue_end..hi]
        .char_indices()
        .nth(right)
        .map_or(hi, |(i, _)| clue_end + i);
    (start, end)
}

pub fn extract_fragments(page: &RawHtml, clues: &[Clue]) -> Vec<Fragment> {
    extract_fragments_with(&page.body, clues, &FragmenterConfig::default())
}

/// Finds one fragment per clue occurrence in the text of `src`, ordered by
/// start offset. Occurrences inside tags, comments or script bodies are not
/// text and are ignored.
pub fn extract_fragments_with(
    src: &str,
    clues: &[Clue],
    config: &FragmenterConfig,
) -> Vec<Fragment> {
    if clues.is_empty() {
        return Vec::new();
    }
    let doc = html::scan(src);
    let occurrences = find_occurrences(src, &doc, clues);
    let mut has_digit: HashMap<usize, bool> = HashMap::new();
    let mut out = Vec::with_capacity(occurrences.len());

    for occ in occurrences {
        let (mut lo, mut hi) = occ.node;
        if let Some(inner) = occ.parent {
            let el = &doc.elements[inner];
            lo = el.start;
            hi = el.end;
            let digit = *has_digit
                .entry(inner)
                .or_insert_with(|| html::visible_text(&src[el.start..el.end]).bytes().any(|b| b.is_ascii_digit()));
            if !digit && config.widen_digitless {
                if let Some(parent) = el.parent {
                    let p = &doc.elements[parent];
                    if char_len(&src[p.start..p.end]) <= config.max_chars {
                        lo = p.start;
                        hi = p.end;
                    }
                }
            }
        }
        if char_len(&src[lo..hi]) > config.max_chars {
            (lo, hi) = clamp_window(src, lo, hi, occ.start, occ.end, config.max_chars);
        }
        out.push(Fragment {
            html: src[lo..hi].to_string(),
            start_offset: lo,
            end_offset: hi,
            clue: clues[occ.clue].clone(),
            clue_offset: occ.start,
            clue_len: occ.end - occ.start,
            weight: 0,
        });
    }
    out.sort_by_key(|f| (f.start_offset, f.clue_offset));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn usd() -> Vec<Clue> {
        vec![Clue::new("$", CurrencyCode::USD)]
    }

    #[test]
    fn clue_line_parses() {
        let clues = parse_clues("$,USD").unwrap();
        assert_eq!(clues, vec![Clue::new("$", CurrencyCode::USD)]);
    }

    #[test]
    fn empty_clue_file_yields_no_fragments() {
        let clues = parse_clues("").unwrap();
        assert!(clues.is_empty());
        assert!(extract_fragments_with("<p>$ 5</p>", &clues, &FragmenterConfig::default()).is_empty());
    }

    #[test]
    fn duplicate_clue_lines_collapse() {
        let clues = parse_clues("€,EUR\n# comment\n\n€,EUR\n").unwrap();
        assert_eq!(clues.len(), 1);
    }

    #[test]
    fn malformed_clue_line_names_line_number() {
        let err = parse_clues("$,USD\nbogus\n").unwrap_err();
        assert!(matches!(err, ClueError::Malformed { line: 2, .. }), "{err}");
        let err = parse_clues("$,usd").unwrap_err();
        assert!(matches!(err, ClueError::Malformed { line: 1, .. }));
    }

    #[test]
    fn default_bundle_contents() {
        let texts: Vec<String> = default_clues().into_iter().map(|c| c.text).collect();
        for t in ["$", "€", "&euro;", "£", "USD", "EUR", "GBP"] {
            assert!(texts.contains(&t.to_string()), "missing {t}");
        }
    }

    #[test]
    fn no_clue_no_fragment() {
        assert!(extract_fragments_with("<p>hello</p>", &usd(), &FragmenterConfig::default()).is_empty());
    }

    #[test]
    fn innermost_element_is_the_fragment() {
        let src = r#"<div><span id="ctl00" class="price">$ 125</span></div>"#;
        let frags = extract_fragments_with(src, &usd(), &FragmenterConfig::default());
        assert_eq!(frags.len(), 1);
        assert_eq!(frags[0].html, r#"<span id="ctl00" class="price">$ 125</span>"#);
        assert_eq!(&src[frags[0].start_offset..frags[0].end_offset], frags[0].html);
        assert_eq!(frags[0].clue_source(), "$");
    }

    #[test]
    fn digitless_element_widens_to_parent() {
        let src = r#"<li><span class="current">1104,15 <span class="currency">€</span></span></li>"#;
        let clues = vec![Clue::new("€", CurrencyCode::EUR)];
        let frags = extract_fragments_with(src, &clues, &FragmenterConfig::default());
        assert_eq!(frags.len(), 1);
        // Parent span starts after the 4-byte `<li>`.
        assert_eq!(frags[0].start_offset, 4);
        assert_eq!(frags[0].end_offset, src.len() - 5);
        assert!(frags[0].html.starts_with(r#"<span class="current">"#));

        let narrow = FragmenterConfig {
            widen_digitless: false,
            ..FragmenterConfig::default()
        };
        let frags = extract_fragments_with(src, &clues, &narrow);
        assert_eq!(frags[0].html, r#"<span class="currency">€</span>"#);
    }

    #[test]
    fn entity_and_literal_spellings_both_match_once() {
        let src = "<p>&euro;5</p><p>€6</p><p>&#8364;7</p>";
        let clues = parse_clues("€,EUR\n&euro;,EUR").unwrap();
        let frags = extract_fragments_with(src, &clues, &FragmenterConfig::default());
        assert_eq!(frags.len(), 3);
        assert_eq!(frags[0].clue_source(), "&euro;");
        assert_eq!(frags[2].clue_source(), "&#8364;");
    }

    #[test]
    fn code_clues_respect_word_boundaries() {
        let clues = vec![Clue::new("EUR", CurrencyCode::EUR)];
        let frags = extract_fragments_with(
            "<p>EUROPE</p><p>12 EUR</p>",
            &clues,
            &FragmenterConfig::default(),
        );
        assert_eq!(frags.len(), 1);
        assert_eq!(frags[0].html, "<p>12 EUR</p>");
    }

    #[test]
    fn attributes_and_scripts_are_not_text() {
        let src = r#"<p data-c="$">x</p><script>var a="$1";</script><!-- $2 -->"#;
        assert!(extract_fragments_with(src, &usd(), &FragmenterConfig::default()).is_empty());
    }

    #[test]
    fn long_elements_are_capped() {
        let filler = "x".repeat(3000);
        let src = format!("<div>{filler} $ 10 {filler}</div>");
        let cfg = FragmenterConfig::default();
        let frags = extract_fragments_with(&src, &usd(), &cfg);
        assert_eq!(frags.len(), 1);
        let f = &frags[0];
        assert!(f.html.chars().count() <= cfg.max_chars);
        assert!(f.html.contains("$ 10"));
        assert_eq!(&src[f.start_offset..f.end_offset], f.html);
    }

    #[test]
    fn multibyte_window_respects_char_boundaries() {
        let filler = "é".repeat(2000);
        let src = format!("<div>{filler}€9{filler}</div>");
        let clues = vec![Clue::new("€", CurrencyCode::EUR)];
        let frags = extract_fragments_with(&src, &clues, &FragmenterConfig::default());
        assert_eq!(frags[0].html.chars().count(), 1000);
        assert!(frags[0].html.contains("€9"));
    }

    #[test]
    fn k_elements_give_k_fragments() {
        let src: String = (0..17).map(|i| format!("<b>${i}</b>")).collect();
        let frags = extract_fragments_with(&src, &usd(), &FragmenterConfig::default());
        assert_eq!(frags.len(), 17);
        assert!(frags.windows(2).all(|w| w[0].start_offset < w[1].start_offset));
    }
}
