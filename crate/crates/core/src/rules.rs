//! Designer-authored condition-action rules over fragments.
//!
//! Discarding rules add one to a fragment's weight when they match.
//! Recovering rules reset a discarded fragment's weight to zero; they only
//! run when the discard phase did not leave exactly one candidate price.
//!
//! Rule files hold one rule per line, `id|phase|kind|argument`:
//!
//! ```text
//! semr1|discard|contains_text|SAVE
//! rec1|recover|class_contains|price
//! ```

use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::Serialize;

use crate::fragmenter::Fragment;
use crate::html;
use crate::types::{parse_amount, Price};

pub const DEFAULT_RULES: &str = "\
# id|phase|kind|argument
semr1|discard|contains_text|SAVE
semr2|discard|matches_regex|(?i)shipping|delivery|orders over
semr3|discard|value_below|0.01
semr4|discard|class_contains|old
semr5|discard|matches_regex|(?i)\\bwas\\b|\\bsave\\b|\\boff\\b
rec1|recover|class_contains|price
";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Discard,
    Recover,
}

#[derive(Debug, Clone)]
pub enum Predicate {
    /// Substring of the fragment's visible text.
    ContainsText(String),
    /// Regex over the raw fragment HTML.
    MatchesRegex(Regex),
    /// `name=value` on the fragment's opening tag.
    AttrEquals { name: String, value: String },
    /// Substring of the opening tag's `class` attribute.
    ClassContains(String),
    /// Parsed amount strictly below the argument (minor units).
    ValueBelow(u64),
    /// Parsed amount strictly above the argument (minor units).
    ValueAbove(u64),
}

impl Predicate {
    pub fn kind(&self) -> &'static str {
        match self {
            Predicate::ContainsText(_) => "contains_text",
            Predicate::MatchesRegex(_) => "matches_regex",
            Predicate::AttrEquals { .. } => "attr_equals",
            Predicate::ClassContains(_) => "class_contains",
            Predicate::ValueBelow(_) => "value_below",
            Predicate::ValueAbove(_) => "value_above",
        }
    }

    fn matches(&self, facts: &FragmentFacts<'_>) -> bool {
        match self {
            Predicate::ContainsText(needle) => facts.text.contains(needle.as_str()),
            Predicate::MatchesRegex(re) => re.is_match(&facts.fragment.html),
            Predicate::AttrEquals { name, value } => facts
                .attrs
                .iter()
                .any(|(n, v)| n == name && v == value),
            Predicate::ClassContains(needle) => facts
                .attrs
                .iter()
                .any(|(n, v)| n == "class" && v.contains(needle.as_str())),
            Predicate::ValueBelow(limit) => facts.price.is_some_and(|p| p.amount_minor < *limit),
            Predicate::ValueAbove(limit) => facts.price.is_some_and(|p| p.amount_minor > *limit),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::ContainsText(s) | Predicate::ClassContains(s) => write!(f, "{}({s:?})", self.kind()),
            Predicate::MatchesRegex(re) => write!(f, "{}({:?})", self.kind(), re.as_str()),
            Predicate::AttrEquals { name, value } => write!(f, "{}({name}={value:?})", self.kind()),
            Predicate::ValueBelow(v) | Predicate::ValueAbove(v) => {
                write!(f, "{}({}.{:02})", self.kind(), v / 100, v % 100)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub id: String,
    pub phase: Phase,
    pub predicate: Predicate,
    pub order: usize,
}

impl Rule {
    pub fn new(id: impl Into<String>, phase: Phase, predicate: Predicate) -> Self {
        Rule {
            id: id.into(),
            phase,
            predicate,
            order: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RuleError {
    #[error("rule file line {line}: expected `id|phase|kind|argument`")]
    Malformed { line: usize },
    #[error("rule {id}: unknown phase {phase:?}")]
    UnknownPhase { id: String, phase: String },
    #[error("rule {id}: unknown predicate kind {kind:?}")]
    UnknownPredicate { id: String, kind: String },
    #[error("rule {id}: bad regex: {source}")]
    BadRegex {
        id: String,
        #[source]
        source: regex::Error,
    },
    #[error("rule {id}: bad argument {argument:?}: {reason}")]
    BadArgument {
        id: String,
        argument: String,
        reason: &'static str,
    },
    #[error("rule id {id} is used twice")]
    DuplicateId { id: String },
    #[error("cannot read rule file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Rules in file order. Both phases may be empty.
#[derive(Debug, Clone, Default)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Self {
        let rules = rules
            .into_iter()
            .enumerate()
            .map(|(order, mut r)| {
                r.order = order;
                r
            })
            .collect();
        RuleSet { rules }
    }

    pub fn parse(src: &str) -> Result<Self, RuleError> {
        let mut rules: Vec<Rule> = Vec::new();
        for (n, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(4, '|');
            let (Some(id), Some(phase), Some(kind), Some(argument)) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(RuleError::Malformed { line: n + 1 });
            };
            let id = id.trim();
            if id.is_empty() {
                return Err(RuleError::Malformed { line: n + 1 });
            }
            if rules.iter().any(|r| r.id == id) {
                return Err(RuleError::DuplicateId { id: id.to_string() });
            }
            let phase = match phase.trim() {
                "discard" => Phase::Discard,
                "recover" => Phase::Recover,
                other => {
                    return Err(RuleError::UnknownPhase {
                        id: id.to_string(),
                        phase: other.to_string(),
                    })
                }
            };
            let predicate = parse_predicate(id, kind.trim(), argument)?;
            rules.push(Rule::new(id, phase, predicate));
        }
        Ok(RuleSet::new(rules))
    }

    pub fn load(path: &Path) -> Result<Self, RuleError> {
        let src = std::fs::read_to_string(path).map_err(|source| RuleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&src)
    }

    pub fn default_rules() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled rules parse")
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(move |r| r.phase == phase)
    }
}

fn parse_predicate(id: &str, kind: &str, argument: &str) -> Result<Predicate, RuleError> {
    let bad = |reason| RuleError::BadArgument {
        id: id.to_string(),
        argument: argument.to_string(),
        reason,
    };
    let predicate = match kind {
        "contains_text" => Predicate::ContainsText(argument.to_string()),
        "matches_regex" => Predicate::MatchesRegex(Regex::new(argument).map_err(|source| {
            RuleError::BadRegex {
                id: id.to_string(),
                source,
            }
        })?),
        "attr_equals" => {
            let (name, value) = argument.split_once('=').ok_or_else(|| bad("expected name=value"))?;
            let value = value.trim().trim_matches('"');
            Predicate::AttrEquals {
                name: name.trim().to_ascii_lowercase(),
                value: value.to_string(),
            }
        }
        "class_contains" => Predicate::ClassContains(argument.trim().to_string()),
        "value_below" => Predicate::ValueBelow(parse_amount(argument.trim()).ok_or_else(|| bad("expected a decimal"))?),
        "value_above" => Predicate::ValueAbove(parse_amount(argument.trim()).ok_or_else(|| bad("expected a decimal"))?),
        other => {
            return Err(RuleError::UnknownPredicate {
                id: id.to_string(),
                kind: other.to_string(),
            })
        }
    };
    if matches!(&predicate, Predicate::ContainsText(s) | Predicate::ClassContains(s) if s.is_empty()) {
        return Err(bad("empty argument"));
    }
    Ok(predicate)
}

/// Everything a predicate may inspect, computed once per fragment.
struct FragmentFacts<'a> {
    fragment: &'a Fragment,
    text: String,
    attrs: Vec<(String, String)>,
    price: Option<Price>,
}

impl<'a> FragmentFacts<'a> {
    fn of(fragment: &'a Fragment) -> Self {
        FragmentFacts {
            fragment,
            text: fragment.text(),
            attrs: fragment.opening_tag().map(html::attributes).unwrap_or_default(),
            price: parse_price(fragment),
        }
    }
}

fn is_sep(c: char) -> bool {
    matches!(c, '.' | ',' | '\'' | '\u{a0}' | '\u{202f}')
}

fn is_space(c: char) -> bool {
    c.is_whitespace() && !matches!(c, '\u{a0}' | '\u{202f}')
}

const MAX_TOKEN: usize = 24;

/// Reads a number at the start of `chars`, after optional whitespace.
/// Whitespace is admitted inside the number only between a digit and a
/// following `.` or `,` (split markup such as `1.104</span> ,15`). With
/// `reversed`, `chars` runs right to left and the same layout is accepted.
fn lex_number(chars: &[char], reversed: bool) -> Option<String> {
    let mut i = 0;
    while i < chars.len() && chars[i].is_whitespace() {
        i += 1;
    }
    if i >= chars.len() || !chars[i].is_ascii_digit() {
        return None;
    }
    let skip_spaces = |mut j: usize| {
        while j < chars.len() && is_space(chars[j]) {
            j += 1;
        }
        j
    };
    let mut token = String::new();
    while i < chars.len() && token.len() < MAX_TOKEN {
        let c = chars[i];
        if c.is_ascii_digit() {
            token.push(c);
            i += 1;
        } else if is_sep(c) {
            let next = if reversed && matches!(c, '.' | ',') {
                skip_spaces(i + 1)
            } else {
                i + 1
            };
            if !chars.get(next).is_some_and(char::is_ascii_digit) {
                break;
            }
            token.push(c);
            i = next;
        } else if is_space(c) && !reversed {
            let j = skip_spaces(i);
            let joins = matches!(chars.get(j), Some('.' | ','))
                && chars.get(j + 1).is_some_and(char::is_ascii_digit);
            if !joins {
                break;
            }
            i = j;
        } else {
            break;
        }
    }
    Some(token)
}

/// The numeric value next to the fragment's clue: right after it, or else
/// right before it. Amounts are in minor units, currency from the clue.
pub fn parse_price(fragment: &Fragment) -> Option<Price> {
    locate_price(fragment).map(|(price, _)| price)
}

/// Where the number sits relative to the clue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NumberSide {
    /// `$ 125`
    AfterClue,
    /// `125 €`, with the number's digit count.
    BeforeClue { digits: usize },
}

pub(crate) fn locate_price(fragment: &Fragment) -> Option<(Price, NumberSide)> {
    let (before, after) = fragment.split_at_clue();
    let currency = fragment.clue.currency_code;
    let after: Vec<char> = html::visible_text(after).chars().collect();
    if let Some(amount) = lex_number(&after, false).and_then(|t| parse_amount(&t)) {
        return Some((Price::new(amount, currency), NumberSide::AfterClue));
    }
    let mut before: Vec<char> = html::visible_text(before).chars().collect();
    before.reverse();
    let reversed = lex_number(&before, true)?;
    let token: String = reversed.chars().rev().collect();
    let digits = token.bytes().filter(u8::is_ascii_digit).count();
    parse_amount(&token).map(|amount| (Price::new(amount, currency), NumberSide::BeforeClue { digits }))
}

/// Adds one to a fragment's weight for every discarding rule it satisfies.
pub fn apply_discard(fragments: &mut [Fragment], rules: &RuleSet) {
    let facts: Vec<FragmentFacts<'_>> = fragments.iter().map(FragmentFacts::of).collect();
    let bumps: Vec<u32> = facts
        .iter()
        .map(|f| rules.phase(Phase::Discard).filter(|r| r.predicate.matches(f)).count() as u32)
        .collect();
    for (fragment, bump) in fragments.iter_mut().zip(bumps) {
        fragment.weight += bump;
    }
}

/// Resets to zero the weight of every discarded fragment some recovering
/// rule matches.
pub fn apply_recover(fragments: &mut [Fragment], rules: &RuleSet) {
    let rescued: Vec<bool> = fragments
        .iter()
        .map(|f| {
            f.weight >= 1 && {
                let facts = FragmentFacts::of(f);
                rules.phase(Phase::Recover).any(|r| r.predicate.matches(&facts))
            }
        })
        .collect();
    for (fragment, rescue) in fragments.iter_mut().zip(rescued) {
        if rescue {
            fragment.weight = 0;
        }
    }
}

/// A parseable price from a zero-weight fragment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CandidatePrice {
    pub price: Price,
    /// Index of the source fragment in the page's fragment list.
    pub fragment: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectedBy {
    Discard,
    Recover,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub candidate: CandidatePrice,
    pub selected_by: SelectedBy,
    /// The page's fragments with their final weights.
    pub fragments: Vec<Fragment>,
}

impl Selection {
    pub fn price(&self) -> Price {
        self.candidate.price
    }

    pub fn winner(&self) -> &Fragment {
        &self.fragments[self.candidate.fragment]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    NoCandidate,
    Ambiguous,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectFailure {
    pub kind: FailureKind,
    /// Distinct (amount, currency) pairs among the surviving candidates.
    pub candidate_count: usize,
    pub candidates: Vec<CandidatePrice>,
    #[serde(skip)]
    pub fragments: Vec<Fragment>,
}

impl SelectFailure {
    pub fn surviving(&self) -> impl Iterator<Item = &Fragment> {
        self.fragments.iter().filter(|f| f.weight == 0)
    }
}

fn candidates(fragments: &[Fragment]) -> Vec<CandidatePrice> {
    fragments
        .iter()
        .enumerate()
        .filter(|(_, f)| f.weight == 0)
        .filter_map(|(i, f)| parse_price(f).map(|price| CandidatePrice { price, fragment: i }))
        .collect()
}

fn distinct_prices(candidates: &[CandidatePrice]) -> Vec<Price> {
    let mut seen: Vec<Price> = Vec::new();
    for c in candidates {
        if !seen.contains(&c.price) {
            seen.push(c.price);
        }
    }
    seen
}

/// Runs the two-phase pipeline and returns the unique candidate price.
///
/// Candidates carrying the same amount and currency count as one price; the
/// earliest such fragment is reported as the source.
pub fn select_price(fragments: Vec<Fragment>, rules: &RuleSet) -> Result<Selection, SelectFailure> {
    let mut fragments = fragments;
    for f in fragments.iter_mut() {
        f.weight = 0;
    }
    apply_discard(&mut fragments, rules);
    let found = candidates(&fragments);
    if distinct_prices(&found).len() == 1 {
        return Ok(Selection {
            candidate: found[0].clone(),
            selected_by: SelectedBy::Discard,
            fragments,
        });
    }
    apply_recover(&mut fragments, rules);
    let found = candidates(&fragments);
    let distinct = distinct_prices(&found).len();
    if distinct == 1 {
        return Ok(Selection {
            candidate: found[0].clone(),
            selected_by: SelectedBy::Recover,
            fragments,
        });
    }
    Err(SelectFailure {
        kind: if distinct == 0 {
            FailureKind::NoCandidate
        } else {
            FailureKind::Ambiguous
        },
        candidate_count: distinct,
        candidates: found,
        fragments,
    })
}
