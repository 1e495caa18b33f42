//! Small value types shared across the pipeline: timestamps, currency codes
//! and prices in minor units.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A point in time. Seconds since the epoch in live mode, abstract integer
/// ticks in simulation; both share the same arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn now() -> Self {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0);
        Timestamp(secs)
    }

    /// `now - self < validity`, the freshness test used by both cache tiers.
    pub fn is_fresh_at(self, now: Timestamp, validity: i64) -> bool {
        now.0 - self.0 < validity
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid currency code {0:?}: expected three uppercase ASCII letters")]
pub struct InvalidCurrency(pub String);

/// ISO-4217 style currency code, three uppercase ASCII letters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CurrencyCode([u8; 3]);

impl CurrencyCode {
    pub const USD: CurrencyCode = CurrencyCode(*b"USD");
    pub const EUR: CurrencyCode = CurrencyCode(*b"EUR");
    pub const GBP: CurrencyCode = CurrencyCode(*b"GBP");

    pub fn as_str(&self) -> &str {
        // Bytes are validated as ASCII uppercase on construction.
        std::str::from_utf8(&self.0).unwrap_or("???")
    }
}

impl FromStr for CurrencyCode {
    type Err = InvalidCurrency;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = s.as_bytes();
        if bytes.len() == 3 && bytes.iter().all(|b| b.is_ascii_uppercase()) {
            Ok(CurrencyCode([bytes[0], bytes[1], bytes[2]]))
        } else {
            Err(InvalidCurrency(s.to_string()))
        }
    }
}

impl fmt::Display for CurrencyCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for CurrencyCode {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for CurrencyCode {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An amount of money in minor units (hundredths) of a currency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Price {
    pub amount_minor: u64,
    pub currency: CurrencyCode,
}

impl Price {
    pub const fn new(amount_minor: u64, currency: CurrencyCode) -> Self {
        Price {
            amount_minor,
            currency,
        }
    }

    /// Major-unit amount rendered with two decimals, e.g. `125.00`.
    pub fn amount_string(&self) -> String {
        format!("{}.{:02}", self.amount_minor / 100, self.amount_minor % 100)
    }
}

impl fmt::Display for Price {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.amount_string(), self.currency)
    }
}

/// Parses a price number written with either decimal convention
/// (`1,234.56` or `1.234,56`) into minor units.
///
/// Separators may be `.`, `,`, `'`, or a no-break space. When both `.` and
/// `,` occur, the last one is the decimal mark. A single kind of separator is
/// a decimal mark only if it occurs once and is followed by one or two digits.
/// Fractions longer than two digits are rounded half-up.
pub fn parse_amount(raw: &str) -> Option<u64> {
    let token: String = raw.chars().filter(|c| !c.is_whitespace()).collect();
    let token = token.trim_matches(|c: char| matches!(c, '.' | ',' | '\''));
    if token.is_empty() {
        return None;
    }
    let is_sep = |c: char| matches!(c, '.' | ',' | '\'' | '\u{a0}' | '\u{202f}');
    if !token.chars().all(|c| c.is_ascii_digit() || is_sep(c)) {
        return None;
    }
    // Consecutive separators are not a number.
    if token
        .chars()
        .zip(token.chars().skip(1))
        .any(|(a, b)| is_sep(a) && is_sep(b))
    {
        return None;
    }

    let last_dot = token.rfind('.');
    let last_comma = token.rfind(',');
    let decimal_at = match (last_dot, last_comma) {
        (Some(d), Some(c)) => Some(d.max(c)),
        (Some(p), None) | (None, Some(p)) => {
            let mark = token.as_bytes()[p] as char;
            let occurrences = token.matches(mark).count();
            let frac_len = token.len() - p - 1;
            if occurrences == 1 && (1..=2).contains(&frac_len) {
                Some(p)
            } else if occurrences == 1 && frac_len > 3 {
                // `12.5000` style: treat as a long fraction.
                Some(p)
            } else {
                None
            }
        }
        (None, None) => None,
    };

    let (int_part, frac_part) = match decimal_at {
        Some(p) => (&token[..p], &token[p + 1..]),
        None => (token, ""),
    };
    let int_digits: String = int_part.chars().filter(|c| c.is_ascii_digit()).collect();
    if frac_part.chars().any(|c| !c.is_ascii_digit()) {
        return None;
    }
    let int_value: u64 = if int_digits.is_empty() {
        0
    } else {
        int_digits.parse().ok()?
    };
    let frac_minor = match frac_part.len() {
        0 => 0,
        1 => frac_part.parse::<u64>().ok()? * 10,
        2 => frac_part.parse::<u64>().ok()?,
        _ => {
            let head: u64 = frac_part[..2].parse().ok()?;
            let round_up = frac_part.as_bytes()[2] >= b'5';
            head + u64::from(round_up)
        }
    };
    int_value.checked_mul(100)?.checked_add(frac_minor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn currency_code_validation() {
        assert_eq!("USD".parse::<CurrencyCode>().unwrap(), CurrencyCode::USD);
        assert!("usd".parse::<CurrencyCode>().is_err());
        assert!("US".parse::<CurrencyCode>().is_err());
        assert!("EURO".parse::<CurrencyCode>().is_err());
    }

    #[test]
    fn both_decimal_conventions() {
        assert_eq!(parse_amount("125"), Some(12_500));
        assert_eq!(parse_amount("12.80"), Some(1_280));
        assert_eq!(parse_amount("1,234.56"), Some(123_456));
        assert_eq!(parse_amount("1.234,56"), Some(123_456));
        assert_eq!(parse_amount("1.104,15"), Some(110_415));
        assert_eq!(parse_amount("1 104,15"), Some(110_415));
        assert_eq!(parse_amount("1,234"), Some(123_400));
        assert_eq!(parse_amount("1.234.567"), Some(123_456_700));
        assert_eq!(parse_amount("9,5"), Some(950));
        assert_eq!(parse_amount("0.00"), Some(0));
    }

    #[test]
    fn rejects_non_numbers() {
        assert_eq!(parse_amount(""), None);
        assert_eq!(parse_amount(".,"), None);
        assert_eq!(parse_amount("12..5"), None);
        assert_eq!(parse_amount("12a"), None);
    }

    #[test]
    fn freshness_is_strict() {
        let t = Timestamp(100);
        assert!(t.is_fresh_at(Timestamp(109), 10));
        assert!(!t.is_fresh_at(Timestamp(110), 10));
    }
}
