//! Site-matcher lookups over the social store.
//!
//! A query pairs an entity name with a site name ("Zingerman's",
//! "zingermans.com", "https://www.zingermans.com/"). The site is normalized
//! to dot-separated tokens; each token must prefix a host label, in order.
//! Every whitespace-separated entity token must occur in the stored entity,
//! case-insensitively.

use crate::storage::{SocialRecord, SocialStore};

/// Lowercases, drops the scheme, a leading `www.`, any path, port, and
/// apostrophes. Idempotent.
pub fn normalize_site(site: &str) -> String {
    // A single pass can expose new separators; repeat until stable.
    let mut cur = normalize_once(site);
    loop {
        let next = normalize_once(&cur);
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

fn normalize_once(site: &str) -> String {
    let mut s = site.trim().to_lowercase();
    s.retain(|c| c != '\'' && c != '\u{2019}');
    if let Some(i) = s.find("://") {
        s.drain(..i + 3);
    }
    if let Some(i) = s.find(['/', '?', '#']) {
        s.truncate(i);
    }
    if let Some(i) = s.rfind(':') {
        if s[i + 1..].bytes().all(|b| b.is_ascii_digit()) {
            s.truncate(i);
        }
    }
    let tokens: Vec<&str> = s
        .split(|c: char| c == '.' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .collect();
    let tokens = match tokens.first() {
        Some(&"www") => &tokens[1..],
        _ => &tokens[..],
    };
    tokens.join(".")
}

/// `site` must already be normalized.
pub fn site_matches_host(site: &str, host: &str) -> bool {
    if site.is_empty() {
        return false;
    }
    let host = host.to_lowercase();
    let mut labels = host.split('.');
    site.split('.')
        .all(|token| labels.by_ref().any(|label| label.starts_with(token)))
}

pub fn entity_matches(query: &str, entity: &str) -> bool {
    let entity = entity.to_lowercase();
    let mut tokens = query.split_whitespace().peekable();
    tokens.peek().is_some() && tokens.all(|t| entity.contains(&t.to_lowercase()))
}

/// The newest matching record.
pub fn lookup(store: &SocialStore, entity: &str, site: &str) -> Option<SocialRecord> {
    store.find_by_site(entity, site).into_iter().next()
}

/// Every matching record, newest first.
pub fn match_all(store: &SocialStore, entity: &str, site: &str) -> Vec<SocialRecord> {
    store.find_by_site(entity, site)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fetcher::PageUrl;
    use crate::types::{CurrencyCode, Price, Timestamp};
    use proptest::prelude::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_site("Zingerman's"), "zingermans");
        assert_eq!(normalize_site("https://www.Zingermans.com/Product.aspx?x=1"), "zingermans.com");
        assert_eq!(normalize_site("zingermans.com:8080"), "zingermans.com");
        assert_eq!(normalize_site("  "), "");
    }

    #[test]
    fn site_tokens_prefix_labels_in_order() {
        let host = "www.zingermans.com";
        assert!(site_matches_host("zingerman", host));
        assert!(site_matches_host("zingermans.com", host));
        assert!(!site_matches_host("com.zingermans", host));
        assert!(!site_matches_host("ermans", host));
        assert!(!site_matches_host("", host));
    }

    #[test]
    fn entity_tokens_and() {
        assert!(entity_matches("Lemon Cake", "lemon poppyseed cake"));
        assert!(!entity_matches("lemon tart", "lemon poppyseed cake"));
        assert!(!entity_matches("", "anything"));
    }

    #[test]
    fn lookup_prefers_newest() {
        let store = SocialStore::in_memory();
        let url = |p: &str| PageUrl::parse(&format!("https://www.zingermans.com/{p}")).unwrap();
        for (e, p, t) in [("lemon cake", "a", 10), ("sour cream coffee cake", "b", 30), ("lemon cake small", "c", 20)] {
            store
                .put(SocialRecord {
                    entity: e.into(),
                    url: url(p),
                    price: Price::new(100, CurrencyCode::USD),
                    observed_at: Timestamp(t),
                })
                .unwrap();
        }
        let hit = lookup(&store, "Lemon Cake", "Zingerman's").unwrap();
        assert_eq!(hit.url.as_str(), "https://www.zingermans.com/c");
        assert_eq!(match_all(&store, "cake", "zingermans.com").len(), 3);
        assert!(lookup(&store, "cake", "amazon").is_none());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[A-Za-z0-9'./: ?#-]{0,40}") {
            let once = normalize_site(&s);
            prop_assert_eq!(normalize_site(&once), once.clone());
        }
    }
}
