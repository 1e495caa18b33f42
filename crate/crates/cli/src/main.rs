use std::io::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use wextractor::corpus::{run_corpus, CorpusManifest, CorpusOptions, CorpusReport};
use wextractor::fetcher::{FetchConfig, Fetcher, LocalIndex, PageUrl};
use wextractor::fragmenter::{default_clues, load_clues, Clue};
use wextractor::orchestrator::{ExtractionOutcome, Extractor, HtmlBackend, OrchestratorConfig, RefreshMode, SuccessCode};
use wextractor::pattern::PatternOptions;
use wextractor::rules::RuleSet;
use wextractor::simulator::{self, Ratio, SimConfig};
use wextractor::storage::Stores;
use wextractor::{service, Timestamp};

const DEFAULT_STORES: &str = ".wextract";
const LIVE_SOCIAL_VALIDITY: i64 = 3_600;
const LIVE_PATTERN_VALIDITY: i64 = 86_400;

#[derive(Parser, Debug)]
#[command(name = "wextract", version, about = "Browserless product price extraction")]
struct Cli {
    /// Directory holding social.jsonl and patterns.jsonl.
    #[arg(long, global = true, env = "WEXTRACT_STORES")]
    stores: Option<PathBuf>,
    /// Rule file (`id|phase|predicate|argument` per line).
    #[arg(long, global = true, env = "WEXTRACT_RULES")]
    rules: Option<PathBuf>,
    /// Clue file (`text,CODE` per line).
    #[arg(long, global = true, env = "WEXTRACT_CLUES")]
    clues: Option<PathBuf>,
    /// TOML file with defaults for the options above.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract the price of one page through the cache tiers.
    Extract(ExtractArgs),
    /// Score from-scratch extraction over a fixture manifest.
    Corpus(CorpusArgs),
    /// Run the (entity, site) query service.
    Serve(ServeArgs),
    /// Run the Zipf workload simulation.
    Simulate(SimulateArgs),
    /// Inspect or compact the stores.
    Store {
        #[command(subcommand)]
        action: StoreAction,
    },
}

#[derive(Args, Debug, Clone)]
struct LiveArgs {
    /// Manifest whose entries map urls to local files.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Seconds a social record stays fresh.
    #[arg(long)]
    social_validity: Option<i64>,
    /// Seconds a pointing pattern stays fresh.
    #[arg(long)]
    pattern_validity: Option<i64>,
    #[arg(long, value_enum)]
    refresh_mode: Option<ModeArg>,
    /// Integer quantifier {d-1,d} instead of {d-1,d+1}.
    #[arg(long)]
    exact_quantifier: bool,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    url: String,
    #[arg(long, default_value = "")]
    entity: String,
    #[command(flatten)]
    live: LiveArgs,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    manifest: PathBuf,
    /// Worker threads; 1 runs sequentially.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[command(flatten)]
    live: LiveArgs,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 735)]
    pages: usize,
    #[arg(long, default_value_t = 50_000)]
    requests: usize,
    /// Per-page from-scratch success probability, `a/b` or decimal.
    #[arg(long, default_value = "579/735")]
    p: Ratio,
    #[arg(long, default_value_t = 10)]
    social_validity: i64,
    #[arg(long, default_value_t = 20)]
    pattern_validity: i64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw exactly this many success pages instead of Bernoulli(p).
    #[arg(long)]
    exact_successes: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Refresh)]
    refresh_mode: ModeArg,
    /// Fraction of most requested pages given a manual pattern.
    #[arg(long)]
    uplift: Option<f64>,
    /// Rows of the per-page table.
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Run this many consecutive seeds starting at --seed.
    #[arg(long)]
    sweep: Option<usize>,
    /// Write records.jsonl and summary.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum StoreAction {
    List {
        #[arg(long, value_enum, default_value_t = StoreKind::Social)]
        store: StoreKind,
    },
    /// Rewrite the JSONL files with one line per key.
    Compact,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum StoreKind {
    Social,
    Patterns,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    Literal,
    #[value(alias = "refresh-on-success")]
    #[serde(alias = "refresh-on-success")]
    Refresh,
    RefreshAll,
}

impl From<ModeArg> for RefreshMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Literal => RefreshMode::Literal,
            ModeArg::Refresh => RefreshMode::RefreshOnSuccess,
            ModeArg::RefreshAll => RefreshMode::RefreshAll,
        }
    }
}

/// Lowest-precedence settings, read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    stores: Option<PathBuf>,
    rules: Option<PathBuf>,
    clues: Option<PathBuf>,
    corpus: Option<PathBuf>,
    social_validity: Option<i64>,
    pattern_validity: Option<i64>,
    refresh_mode: Option<ModeArg>,
    jobs: Option<usize>,
}

struct Ctx {
    stores_dir: PathBuf,
    rules: Option<PathBuf>,
    clues: Option<PathBuf>,
    json: bool,
    file: FileConfig,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let file = match &cli.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => FileConfig::default(),
        };
        Ok(Ctx {
            stores_dir: cli
                .stores
                .clone()
                .or_else(|| file.stores.clone())
                .unwrap_or_else(|| PathBuf::from(DEFAULT_STORES)),
            rules: cli.rules.clone().or_else(|| file.rules.clone()),
            clues: cli.clues.clone().or_else(|| file.clues.clone()),
            json: cli.json,
            file,
        })
    }

    fn clues(&self) -> Result<Vec<Clue>> {
        match &self.clues {
            Some(p) => load_clues(p).with_context(|| format!("loading clues {}", p.display())),
            None => Ok(default_clues()),
        }
    }

    fn rules(&self) -> Result<RuleSet> {
        match &self.rules {
            Some(p) => RuleSet::load(p).with_context(|| format!("loading rules {}", p.display())),
            None => Ok(RuleSet::default_rules()),
        }
    }

    fn stores(&self) -> Result<Stores> {
        Stores::open_dir(&self.stores_dir, self.clues()?)
            .with_context(|| format!("opening stores in {}", self.stores_dir.display()))
    }

    fn extractor(&self, live: &LiveArgs) -> Result<Extractor<HtmlBackend<Fetcher>>> {
        let index = match live.corpus.as_ref().or(self.file.corpus.as_ref()) {
            Some(p) => CorpusManifest::load(p)?.index(),
            None => LocalIndex::new(),
        };
        let config = OrchestratorConfig::new(
            live.social_validity
                .or(self.file.social_validity)
                .unwrap_or(LIVE_SOCIAL_VALIDITY),
            live.pattern_validity
                .or(self.file.pattern_validity)
                .unwrap_or(LIVE_PATTERN_VALIDITY),
            live.refresh_mode
                .or(self.file.refresh_mode)
                .map(RefreshMode::from)
                .unwrap_or_default(),
        )?;
        let backend = HtmlBackend::new(Fetcher::with_index(FetchConfig::default(), index), self.clues()?, self.rules()?)
            .with_options(PatternOptions {
                narrow_quantifier: live.exact_quantifier,
            });
        Ok(Extractor::new(backend, Arc::new(self.stores()?), config)?)
    }

    fn print_json<T: serde::Serialize>(&self, value: &T) -> Result<()> {
        println!("{}", serde_json::to_string_pretty(value)?);
        Ok(())
    }
}

fn exit_code(code: SuccessCode) -> u8 {
    match code {
        SuccessCode::FromScratch | SuccessCode::Pattern | SuccessCode::Social => 0,
        SuccessCode::NotFound => 2,
        SuccessCode::Unavailable => 3,
    }
}

fn print_outcome(out: &ExtractionOutcome) {
    let price = out
        .price
        .map(|p| format!("{} {}", p.amount_string(), p.currency))
        .unwrap_or_else(|| "-".into());
    println!("code {}  price {}  url {}", out.code.as_i8(), price, out.url);
    let trace: Vec<String> = out
        .tier_trace
        .iter()
        .map(|t| {
            let mut s = format!("{}:{}", json_tag(&t.tier), json_tag(&t.status));
            if let Some(n) = t.candidate_count {
                s.push_str(&format!("({n})"));
            }
            s
        })
        .collect();
    println!("trace {}", trace.join(" "));
    if let Some(why) = &out.unavailable {
        println!("unavailable: {why}");
    }
}

fn json_tag<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn cmd_extract(ctx: &Ctx, args: &ExtractArgs) -> Result<u8> {
    let url = PageUrl::parse(&args.url)?;
    let extractor = ctx.extractor(&args.live)?;
    let out = extractor.extract(&url, &args.entity)?;
    if ctx.json {
        ctx.print_json(&out)?;
    } else {
        print_outcome(&out);
    }
    Ok(exit_code(out.code))
}

fn print_report(r: &CorpusReport) {
    for e in &r.entries {
        let price = e.price.map(|p| format!("{} {}", p.amount_string(), p.currency)).unwrap_or_else(|| "-".into());
        println!(
            "{:<10} code {:>2}  candidates {:>2}  {:<14} {:<26} {}",
            json_tag(&e.verdict),
            e.code.as_i8(),
            e.candidate_count.map(|n| n.to_string()).unwrap_or_else(|| "-".into()),
            price,
            e.category.as_deref().unwrap_or("-"),
            e.url
        );
    }
    println!(
        "total {}  exact {}  miss {}  ambiguous {}  unscored {}",
        r.total, r.exact, r.miss, r.ambiguous, r.unscored
    );
}

fn cmd_corpus(ctx: &Ctx, args: &CorpusArgs) -> Result<u8> {
    let manifest = CorpusManifest::load(&args.manifest)?;
    let jobs = args
        .jobs
        .or(ctx.file.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let report = run_corpus(
        &manifest,
        &CorpusOptions {
            clues: ctx.clues()?,
            rules: ctx.rules()?,
            pattern: PatternOptions::default(),
            jobs,
            now: Timestamp::now(),
        },
    );
    if ctx.json {
        ctx.print_json(&report)?;
    } else {
        print_report(&report);
    }
    Ok(0)
}

fn cmd_serve(ctx: &Ctx, args: &ServeArgs) -> Result<u8> {
    let extractor = Arc::new(ctx.extractor(&args.live)?);
    let addr = SocketAddr::new(args.bind, args.port);
    service::serve_blocking(addr, extractor, |local| {
        println!("listening on http://{local}");
        let _ = std::io::stdout().flush();
    })
    .with_context(|| format!("serving on {addr}"))?;
    Ok(0)
}

fn cmd_simulate(ctx: &Ctx, args: &SimulateArgs) -> Result<u8> {
    let config = SimConfig {
        n_pages: args.pages,
        n_requests: args.requests,
        p_success: args.p,
        social_validity: args.social_validity,
        pattern_validity: args.pattern_validity,
        seed: args.seed,
        refresh_mode: args.refresh_mode.into(),
        exact_success_count: args.exact_successes,
    };
    config.validate()?;

    if let Some(n) = args.sweep {
        let seeds: Vec<u64> = (args.seed..args.seed + n as u64).collect();
        let rows = simulator::sweep(&config, &seeds)?;
        let mean = rows.iter().map(|r| r.rate).sum::<f64>() / rows.len().max(1) as f64;
        let max = rows.iter().map(|r| r.rate).fold(0.0, f64::max);
        let min = rows.iter().map(|r| r.rate).fold(1.0, f64::min);
        if ctx.json {
            ctx.print_json(&serde_json::json!({ "seeds": rows, "mean_rate": mean, "min_rate": min, "max_rate": max }))?;
        } else {
            for r in &rows {
                println!("seed {:>4}  {:>6} / {}  {:.2}%", r.seed, r.successes, r.n_requests, 100.0 * r.rate);
            }
            println!("mean {:.2}%  min {:.2}%  max {:.2}%", 100.0 * mean, 100.0 * min, 100.0 * max);
        }
        return Ok(0);
    }

    let result = simulator::run_sim(&config)?;
    let mut summary = simulator::report(&result, args.top);
    if let Some(f) = args.uplift {
        if !(0.0..=1.0).contains(&f) {
            bail!("--uplift must be in [0, 1]");
        }
        summary.uplift = Some(simulator::uplift_analysis(&result, f));
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        simulator::write_records(&dir.join("records.jsonl"), &result)?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    if ctx.json {
        ctx.print_json(&summary)?;
    } else {
        print!("{}", summary.to_text());
    }
    Ok(0)
}

fn cmd_store(ctx: &Ctx, action: &StoreAction) -> Result<u8> {
    let stores = ctx.stores()?;
    match action {
        StoreAction::List { store: StoreKind::Social } => {
            for r in stores.social.records() {
                if ctx.json {
                    println!("{}", serde_json::to_string(&r)?);
                } else {
                    println!(
                        "{:>12}  {:<24} {:>10} {}  {}",
                        r.observed_at.0,
                        r.entity,
                        r.price.amount_string(),
                        r.price.currency,
                        r.url
                    );
                }
            }
        }
        StoreAction::List { store: StoreKind::Patterns } => {
            for p in stores.patterns.records() {
                if ctx.json {
                    println!("{}", serde_json::to_string(&p)?);
                } else {
                    println!("{:>12}  {}  {}", p.created_at.0, p.url, p.regex_source);
                }
            }
        }
        StoreAction::Compact => {
            stores.social.compact()?;
            stores.patterns.compact()?;
            if !ctx.json {
                println!(
                    "compacted {} social records, {} patterns in {}",
                    stores.social.len(),
                    stores.patterns.len(),
                    ctx.stores_dir.display()
                );
            }
        }
    }
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    let ctx = Ctx::new(&cli)?;
    match &cli.command {
        Command::Extract(a) => cmd_extract(&ctx, a),
        Command::Corpus(a) => cmd_corpus(&ctx, a),
        Command::Serve(a) => cmd_serve(&ctx, a),
        Command::Simulate(a) => cmd_simulate(&ctx, a),
        Command::Store { action } => cmd_store(&ctx, action),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
