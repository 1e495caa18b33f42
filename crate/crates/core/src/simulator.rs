//! Zipf-workload simulation of the tiered extractor.
//!
//! Requests arrive one per tick; page `k` is requested with probability
//! proportional to `1/k`. Each page either always or never succeeds from
//! scratch. The real [`Extractor`] drives the tiers over in-memory stores,
//! so cache dynamics are the production ones.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::distr::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fetcher::{PageUrl, Unavailable};
use crate::orchestrator::{Backend, ConfigError, Extractor, OrchestratorConfig, RefreshMode, ScratchOutcome};
use crate::par;
use crate::pattern::PointingPattern;
use crate::rules::FailureKind;
use crate::storage::Stores;
use crate::types::{CurrencyCode, Price, Timestamp};

const ZIPF_STREAM: u64 = 0;
const SUCCESS_STREAM: u64 = 1;

/// A probability held as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub const fn new(num: u32, den: u32) -> Self {
        Ratio { num, den }
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid probability {0:?}: expected a/b or a decimal in [0, 1]")]
pub struct RatioError(pub String);

impl FromStr for Ratio {
    type Err = RatioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || RatioError(s.to_string());
        let s = s.trim();
        let r = if let Some((a, b)) = s.split_once('/') {
            Ratio::new(a.trim().parse().map_err(|_| err())?, b.trim().parse().map_err(|_| err())?)
        } else {
            let (int, frac) = s.split_once('.').unwrap_or((s, ""));
            if frac.len() > 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err());
            }
            let den = 10u32.pow(frac.len() as u32);
            let int: u32 = if int.is_empty() { 0 } else { int.parse().map_err(|_| err())? };
            let frac: u32 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| err())? };
            Ratio::new(int.checked_mul(den).and_then(|v| v.checked_add(frac)).ok_or_else(err)?, den)
        };
        if r.den == 0 || r.num > r.den {
            return Err(err());
        }
        Ok(r)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl TryFrom<String> for Ratio {
    type Error = RatioError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_pages: usize,
    pub n_requests: usize,
    pub p_success: Ratio,
    pub social_validity: i64,
    pub pattern_validity: i64,
    pub seed: u64,
    pub refresh_mode: RefreshMode,
    pub exact_success_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("n_pages must be at least 1")]
    NoPages,
    #[error("exact success count {count} exceeds {n_pages} pages")]
    TooManySuccesses { count: usize, n_pages: usize },
    #[error(transparent)]
    Validity(#[from] ConfigError),
}

impl SimConfig {
    /// 735 pages, 50,000 requests, p = 579/735, validities 10 and 20.
    pub fn standard(seed: u64) -> Self {
        SimConfig {
            n_pages: 735,
            n_requests: 50_000,
            p_success: Ratio::new(579, 735),
            social_validity: 10,
            pattern_validity: 20,
            seed,
            refresh_mode: RefreshMode::RefreshOnSuccess,
            exact_success_count: None,
        }
    }

    pub fn orchestrator(&self) -> Result<OrchestratorConfig, ConfigError> {
        OrchestratorConfig::new(self.social_validity, self.pattern_validity, self.refresh_mode)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_pages == 0 {
            return Err(SimError::NoPages);
        }
        if let Some(count) = self.exact_success_count {
            if count > self.n_pages {
                return Err(SimError::TooManySuccesses {
                    count,
                    n_pages: self.n_pages,
                });
            }
        }
        self.orchestrator()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageProfile {
    pub id_page: u32,
    pub scratch_succeeds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestEvent {
    pub time: i64,
    pub id_page: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimRecord {
    pub id_page: u32,
    pub success_code: i8,
    pub time: i64,
}

/// Request counts of one page, split by success code 0..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PageStats {
    pub requests: u64,
    pub codes: [u64; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub profiles: Vec<PageProfile>,
    pub records: Vec<SimRecord>,
    /// Counts of codes 0..=3.
    pub totals: [u64; 4],
    /// Indexed by `id_page - 1`.
    pub pages: Vec<PageStats>,
}

impl SimResult {
    pub fn successes(&self) -> u64 {
        self.totals[1..].iter().sum()
    }

    pub fn rate(&self) -> f64 {
        ratio(self.successes(), self.records.len() as u64)
    }

    pub fn page(&self, id_page: u32) -> &PageStats {
        &self.pages[id_page as usize - 1]
    }

    /// Page ids by decreasing request count, ties by increasing id.
    pub fn pages_by_demand(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = (1..=self.pages.len() as u32).collect();
        ids.sort_by_key(|&id| (std::cmp::Reverse(self.page(id).requests), id));
        ids
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Cumulative weights `sum_{j<=k} 1/j`; the last entry is H(n).
pub fn zipf_cumulative(n_pages: usize) -> Vec<f64> {
    let mut acc = 0.0;
    (1..=n_pages)
        .map(|k| {
            acc += 1.0 / k as f64;
            acc
        })
        .collect()
}

/// Draws one page id by inverse CDF over `cumulative`.
pub fn zipf_draw<R: Rng + ?Sized>(rng: &mut R, cumulative: &[f64]) -> u32 {
    let total = *cumulative.last().expect("at least one page");
    let u = rng.random::<f64>() * total;
    let idx = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
    idx as u32 + 1
}

/// One event per tick `1..=n_requests`.
pub fn gen_zipf(n_pages: usize, n_requests: usize, seed: u64) -> Vec<RequestEvent> {
    assert!(n_pages >= 1, "n_pages must be at least 1");
    let cumulative = zipf_cumulative(n_pages);
    let mut rng = rng(seed, ZIPF_STREAM);
    (1..=n_requests as i64)
        .map(|time| RequestEvent {
            time,
            id_page: zipf_draw(&mut rng, &cumulative),
        })
        .collect()
}

pub fn assign_success(n_pages: usize, p: Ratio, seed: u64, exact: Option<usize>) -> Vec<PageProfile> {
    let mut rng = rng(seed, SUCCESS_STREAM);
    let flags: Vec<bool> = match exact {
        Some(k) => {
            let mut flags = vec![false; n_pages];
            for i in rand::seq::index::sample(&mut rng, n_pages, k.min(n_pages)) {
                flags[i] = true;
            }
            flags
        }
        None => {
            let coin = Bernoulli::from_ratio(p.num, p.den).expect("ratio validated");
            (0..n_pages).map(|_| coin.sample(&mut rng)).collect()
        }
    };
    flags
        .into_iter()
        .enumerate()
        .map(|(i, scratch_succeeds)| PageProfile {
            id_page: i as u32 + 1,
            scratch_succeeds,
        })
        .collect()
}

/// Stands in for fetching and the rule pipeline: every page is available
/// and from-scratch extraction succeeds iff the page profile says so.
pub struct SimBackend {
    profiles: Vec<PageProfile>,
}

impl SimBackend {
    pub fn new(profiles: Vec<PageProfile>) -> Self {
        SimBackend { profiles }
    }

    pub fn url(id_page: u32) -> PageUrl {
        PageUrl::parse(&format!("http://sim.invalid/page/{id_page}")).expect("static url")
    }

    fn page_price(id_page: u32) -> Price {
        Price::new(id_page as u64 * 100, CurrencyCode::USD)
    }
}

impl Backend for SimBackend {
    type Page = u32;

    fn is_available(&self, url: &PageUrl) -> Result<(), Unavailable> {
        self.fetch(url).map(|_| ())
    }

    fn fetch(&self, url: &PageUrl) -> Result<u32, Unavailable> {
        url.as_str()
            .rsplit('/')
            .next()
            .and_then(|s| s.parse().ok())
            .filter(|&id| id >= 1 && id as usize <= self.profiles.len())
            .ok_or(Unavailable::Status(404))
    }

    fn apply_pattern(&self, &id: &u32, _: &PointingPattern) -> Option<Price> {
        Some(Self::page_price(id))
    }

    fn from_scratch(&self, &id: &u32, url: &PageUrl, now: Timestamp) -> ScratchOutcome {
        if self.profiles[id as usize - 1].scratch_succeeds {
            let price = Self::page_price(id);
            ScratchOutcome::Found {
                price,
                pattern: Some(PointingPattern::unchecked(url.clone(), "([0-9]+)", price.currency, now)),
            }
        } else {
            ScratchOutcome::NotFound {
                kind: FailureKind::NoCandidate,
                candidate_count: 0,
            }
        }
    }
}

pub fn run_sim(config: &SimConfig) -> Result<SimResult, SimError> {
    config.validate()?;
    let profiles = assign_success(config.n_pages, config.p_success, config.seed, config.exact_success_count);
    let events = gen_zipf(config.n_pages, config.n_requests, config.seed);
    let urls: Vec<PageUrl> = (1..=config.n_pages as u32).map(SimBackend::url).collect();
    let extractor = Extractor::new(
        SimBackend::new(profiles.clone()),
        Arc::new(Stores::default()),
        config.orchestrator()?,
    )?;

    let mut totals = [0u64; 4];
    let mut pages = vec![PageStats::default(); config.n_pages];
    let mut records = Vec::with_capacity(events.len());
    for ev in events {
        let outcome = extractor
            .extract_at(&urls[ev.id_page as usize - 1], "", Timestamp(ev.time))
            .expect("in-memory stores do not fail");
        let code = outcome.code.as_i8();
        let slot = code.max(0) as usize;
        totals[slot] += 1;
        let stats = &mut pages[ev.id_page as usize - 1];
        stats.requests += 1;
        stats.codes[slot] += 1;
        records.push(SimRecord {
            id_page: ev.id_page,
            success_code: code,
            time: ev.time,
        });
    }
    Ok(SimResult {
        config: config.clone(),
        profiles,
        records,
        totals,
        pages,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uplift {
    pub top_fraction: f64,
    /// ⌈top_fraction · n_pages⌉ most requested pages.
    pub considered_pages: usize,
    /// The considered pages whose from-scratch extraction fails.
    pub reclassified_pages: Vec<u32>,
    pub reclassified_requests: u64,
    pub observed_successes: u64,
    pub recomputed_successes: u64,
    pub observed_rate: f64,
    pub recomputed_rate: f64,
    pub analytic_rate: f64,
}

/// Projects the success rate if the failing pages among the most requested
/// `top_fraction` had a hand-written pointing pattern.
pub fn uplift_analysis(result: &SimResult, top_fraction: f64) -> Uplift {
    let n_pages = result.pages.len();
    let considered = ((top_fraction.clamp(0.0, 1.0) * n_pages as f64).ceil() as usize).min(n_pages);
    let mut reclassified: Vec<u32> = result
        .pages_by_demand()
        .into_iter()
        .take(considered)
        .filter(|&id| !result.profiles[id as usize - 1].scratch_succeeds)
        .collect();
    reclassified.sort_unstable();

    let mut fixed = vec![false; n_pages];
    for &id in &reclassified {
        fixed[id as usize - 1] = true;
    }
    let recomputed = result
        .records
        .iter()
        .filter(|r| r.success_code > 0 || fixed[r.id_page as usize - 1])
        .count() as u64;
    let failed_mass: u64 = reclassified.iter().map(|&id| result.page(id).codes[0]).sum();

    let n = result.records.len() as u64;
    let observed = result.successes();
    Uplift {
        top_fraction,
        considered_pages: considered,
        reclassified_requests: failed_mass,
        reclassified_pages: reclassified,
        observed_successes: observed,
        recomputed_successes: recomputed,
        observed_rate: ratio(observed, n),
        recomputed_rate: ratio(recomputed, n),
        analytic_rate: ratio(observed, n) + ratio(failed_mass, n),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageRow {
    pub id_page: u32,
    pub requests: u64,
    pub scratch_succeeds: bool,
    pub code0: u64,
    pub code1: u64,
    pub code2: u64,
    pub code3: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub refresh_mode: RefreshMode,
    pub n_pages: usize,
    pub n_requests: usize,
    pub successes: u64,
    pub rate: f64,
    pub histogram: BTreeMap<i8, u64>,
    pub success_pages: usize,
    pub top: Vec<PageRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uplift: Option<Uplift>,
}

pub fn report(result: &SimResult, top_k: usize) -> Summary {
    let histogram = (0..4).map(|c| (c as i8, result.totals[c])).collect();
    let top = result
        .pages_by_demand()
        .into_iter()
        .take(top_k)
        .filter(|&id| result.page(id).requests > 0)
        .map(|id| {
            let s = result.page(id);
            PageRow {
                id_page: id,
                requests: s.requests,
                scratch_succeeds: result.profiles[id as usize - 1].scratch_succeeds,
                code0: s.codes[0],
                code1: s.codes[1],
                code2: s.codes[2],
                code3: s.codes[3],
            }
        })
        .collect();
    Summary {
        seed: result.config.seed,
        refresh_mode: result.config.refresh_mode,
        n_pages: result.config.n_pages,
        n_requests: result.records.len(),
        successes: result.successes(),
        rate: result.rate(),
        histogram,
        success_pages: result.profiles.iter().filter(|p| p.scratch_succeeds).count(),
        top,
        uplift: None,
    }
}

impl Summary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mode = match self.refresh_mode {
            RefreshMode::Literal => "literal",
            RefreshMode::RefreshOnSuccess => "refresh-on-success",
            RefreshMode::RefreshAll => "refresh-all",
        };
        let _ = writeln!(
            s,
            "seed {}  mode {mode}  pages {} ({} succeed from scratch)  requests {}",
            self.seed, self.n_pages, self.success_pages, self.n_requests
        );
        let _ = writeln!(
            s,
            "successful {} of {} = {:.2}%",
            self.successes,
            self.n_requests,
            100.0 * self.rate
        );
        let hist: Vec<String> = self.histogram.iter().map(|(c, n)| format!("{c}:{n}")).collect();
        let _ = writeln!(s, "codes {}", hist.join(" "));
        if !self.top.is_empty() {
            let _ = writeln!(s, "{:>6} {:>9} {:>9} {:>9} {:>9} {:>9}", "page", "requests", "success=0", "success=1", "success=2", "success=3");
            for r in &self.top {
                let _ = writeln!(
                    s,
                    "{:>6} {:>9} {:>9} {:>9} {:>9} {:>9}",
                    r.id_page, r.requests, r.code0, r.code1, r.code2, r.code3
                );
            }
        }
        if let Some(u) = &self.uplift {
            let _ = writeln!(
                s,
                "uplift top {:.0}% ({} pages, {} fixed): {:.2}% -> {:.2}%",
                100.0 * u.top_fraction,
                u.considered_pages,
                u.reclassified_pages.len(),
                100.0 * u.observed_rate,
                100.0 * u.recomputed_rate
            );
        }
        s
    }
}

/// Writes one JSON line per request.
pub fn write_records(path: &Path, result: &SimResult) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in &result.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub successes: u64,
    pub n_requests: usize,
    pub rate: f64,
}

fn seed_summary(base: &SimConfig, seed: u64) -> Result<SeedSummary, SimError> {
    let result = run_sim(&SimConfig { seed, ..base.clone() })?;
    Ok(SeedSummary {
        seed,
        successes: result.successes(),
        n_requests: result.records.len(),
        rate: result.rate(),
    })
}

/// Runs `base` once per seed; parallel when the feature is on.
pub fn sweep(base: &SimConfig, seeds: &[u64]) -> Result<Vec<SeedSummary>, SimError> {
    base.validate()?;
    par::map(seeds, |&s| seed_summary(base, s)).into_iter().collect()
}

pub fn sweep_sequential(base: &SimConfig, seeds: &[u64]) -> Result<Vec<SeedSummary>, SimError> {
    base.validate()?;
    par::map_sequential(seeds, |&s| seed_summary(base, s)).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_pages: usize, n_requests: usize, p: Ratio) -> SimConfig {
        SimConfig {
            n_pages,
            n_requests,
            p_success: p,
            ..SimConfig::standard(7)
        }
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("579/735".parse::<Ratio>().unwrap(), Ratio::new(579, 735));
        assert_eq!("0.25".parse::<Ratio>().unwrap(), Ratio::new(25, 100));
        assert_eq!("1".parse::<Ratio>().unwrap(), Ratio::new(1, 1));
        assert!("3/2".parse::<Ratio>().is_err());
        assert!("1/0".parse::<Ratio>().is_err());
        assert!("-0.1".parse::<Ratio>().is_err());
    }

    #[test]
    fn single_page_zipf() {
        assert!(gen_zipf(1, 100, 3).iter().all(|e| e.id_page == 1));
    }

    #[test]
    fn two_page_zipf_two_thirds() {
        let ev = gen_zipf(2, 30_000, 11);
        let ones = ev.iter().filter(|e| e.id_page == 1).count() as f64 / 30_000.0;
        assert!((ones - 2.0 / 3.0).abs() < 0.01, "{ones}");
        assert!(ev.iter().enumerate().all(|(i, e)| e.time == i as i64 + 1));
    }

    #[test]
    fn exact_success_count() {
        let p = assign_success(735, Ratio::new(0, 1), 5, Some(579));
        assert_eq!(p.iter().filter(|p| p.scratch_succeeds).count(), 579);
        assert!(assign_success(10, Ratio::new(1, 1), 5, None).iter().all(|p| p.scratch_succeeds));
    }

    #[test]
    fn all_fail_means_all_zero() {
        let r = run_sim(&small(20, 500, Ratio::new(0, 1))).unwrap();
        assert_eq!(r.totals, [500, 0, 0, 0]);
    }

    #[test]
    fn forced_schedule_one_scratch_then_social() {
        // One page, requests every tick: gap 1 < social validity.
        let r = run_sim(&small(1, 200, Ratio::new(1, 1))).unwrap();
        assert_eq!(r.totals, [0, 1, 0, 199]);
    }

    #[test]
    fn literal_single_page_cycles() {
        let cfg = SimConfig {
            refresh_mode: RefreshMode::Literal,
            ..small(1, 40, Ratio::new(1, 1))
        };
        let r = run_sim(&cfg).unwrap();
        // Scratch at 1: social until 10, pattern until 20, scratch at 21.
        let codes: Vec<i8> = r.records.iter().map(|x| x.success_code).collect();
        let mut expect = Vec::new();
        for _ in 0..2 {
            expect.push(1);
            expect.extend([3; 9]);
            expect.extend([2; 10]);
        }
        assert_eq!(codes, expect);
    }

    #[test]
    fn conservation_and_determinism() {
        let cfg = small(50, 5_000, Ratio::new(3, 4));
        let a = run_sim(&cfg).unwrap();
        assert_eq!(a, run_sim(&cfg).unwrap());
        assert_eq!(a.totals.iter().sum::<u64>(), 5_000);
        for (i, s) in a.pages.iter().enumerate() {
            assert_eq!(s.codes.iter().sum::<u64>(), s.requests);
            if !a.profiles[i].scratch_succeeds {
                assert_eq!(s.codes[0], s.requests);
            }
        }
    }

    #[test]
    fn uplift_identities() {
        let r = run_sim(&small(60, 3_000, Ratio::new(1, 2))).unwrap();
        let none = uplift_analysis(&r, 0.0);
        assert_eq!(none.recomputed_successes, none.observed_successes);
        let u = uplift_analysis(&r, 0.1);
        assert_eq!(u.considered_pages, 6);
        assert_eq!(u.recomputed_successes, u.observed_successes + u.reclassified_requests);
        let all = run_sim(&small(60, 3_000, Ratio::new(1, 1))).unwrap();
        assert_eq!(uplift_analysis(&all, 0.1).recomputed_successes, 3_000);
    }

    #[test]
    fn report_arithmetic() {
        let cfg = small(2, 0, Ratio::new(1, 1));
        let mut r = run_sim(&cfg).unwrap();
        let s = report(&r, 5);
        assert_eq!((s.successes, s.rate, s.top.len()), (0, 0.0, 0));
        for (t, c) in [1, 3, 3, 0].into_iter().enumerate() {
            r.records.push(SimRecord {
                id_page: 1,
                success_code: c,
                time: t as i64 + 1,
            });
            r.totals[c as usize] += 1;
        }
        let s = report(&r, 5);
        assert_eq!(s.rate, 0.75);
        assert_eq!(s.histogram, BTreeMap::from([(0, 1), (1, 1), (2, 0), (3, 2)]));
    }

    #[test]
    fn sweep_matches_sequential() {
        let cfg = small(40, 1_000, Ratio::new(579, 735));
        let seeds = [1, 2, 3, 4];
        assert_eq!(sweep(&cfg, &seeds).unwrap(), sweep_sequential(&cfg, &seeds).unwrap());
    }
}
