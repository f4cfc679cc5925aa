use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dims_core::config::{load_config, CONFIG_ENV};
use dims_core::query::{parse_query, render_tree, Index, IndexedDoc};
use dims_core::Timestamp;
use dims_federation::stanza::{check_line, Verdict};
use dims_federation::CodecError;
use dims_sim::{build_network, run_scenario, NetworkSpec, Outcome, Scenario, SimError};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "dims", version, about = "Dims node, simulator and offline tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a real node.
    Node {
        #[command(subcommand)]
        command: NodeCommand,
    },
    /// Deterministic multi-node simulation.
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
    /// Query language tools.
    Query {
        #[command(subcommand)]
        command: QueryCommand,
    },
    /// Wire codec tools.
    Stanza {
        #[command(subcommand)]
        command: StanzaCommand,
    },
}

#[derive(Subcommand)]
enum NodeCommand {
    Run {
        /// Defaults to $DIMS_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SimCommand {
    Run {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Write the NDJSON event log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum QueryCommand {
    /// Print the parsed tree.
    Parse {
        #[arg(long)]
        q: String,
    },
    /// Rank a JSON corpus of objects against a query.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        q: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Expect {
    Canonical,
    Malformed,
}

#[derive(Subcommand)]
enum StanzaCommand {
    /// Verify a golden file, one stanza per line.
    Check {
        #[arg(long)]
        file: PathBuf,
        #[arg(long, value_enum, default_value = "canonical")]
        expect: Expect,
    },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusObject {
    id: String,
    title: String,
    #[serde(default)]
    body: String,
    #[serde(default)]
    context: BTreeMap<String, String>,
}

enum Failure {
    Usage(String),
    Domain(String),
}

type CmdResult = Result<(), Failure>;

fn domain(e: impl std::fmt::Display) -> Failure {
    Failure::Domain(e.to_string())
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Node { command: NodeCommand::Run { config } } => node_run(config),
        Command::Sim {
            command: SimCommand::Run { spec, scenario, seed, log },
        } => sim_run(&spec, &scenario, seed, log.as_deref()),
        Command::Query { command: QueryCommand::Parse { q } } => query_parse(&q),
        Command::Query {
            command: QueryCommand::Eval { corpus, q },
        } => query_eval(&corpus, &q),
        Command::Stanza {
            command: StanzaCommand::Check { file, expect },
        } => stanza_check(&file, expect),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            ExitCode::from(2)
        }
    }
}

fn node_run(config: Option<PathBuf>) -> CmdResult {
    let path = config
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
        .ok_or_else(|| Failure::Usage(format!("pass --config or set {CONFIG_ENV}")))?;
    let config = load_config(&path).map_err(domain)?;
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let rt = tokio::runtime::Runtime::new().map_err(domain)?;
    rt.block_on(dims_node::run(&config)).map_err(domain)
}

fn print_report(outcome: &Outcome) {
    for r in &outcome.report {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {} @{}ms {}", r.label, r.at_ms, r.detail);
    }
}

fn sim_run(spec: &Path, scenario: &Path, seed: u64, log: Option<&Path>) -> CmdResult {
    let spec = NetworkSpec::parse(&read(spec)?).map_err(domain)?;
    let scenario = Scenario::parse(&read(scenario)?).map_err(domain)?;
    let mut net = build_network(&spec, seed).map_err(domain)?;
    let result = run_scenario(&mut net, &scenario);
    if let Some(path) = log {
        std::fs::write(path, net.log_ndjson()).map_err(|e| Failure::Domain(format!("{}: {e}", path.display())))?;
    }
    match result {
        Ok(outcome) => {
            print_report(&outcome);
            println!("{} assertions passed", outcome.report.len());
            Ok(())
        }
        Err(SimError::AssertionFailed { failed, outcome }) => {
            print_report(&outcome);
            Err(Failure::Domain(format!("failed steps: {}", failed.join(", "))))
        }
        Err(e) => Err(domain(e)),
    }
}

fn query_parse(q: &str) -> CmdResult {
    match parse_query(q) {
        Ok(ast) => {
            println!("{ast}");
            print!("{}", render_tree(&ast));
            Ok(())
        }
        Err(e) => {
            let at = e.position().map(|p| format!(" at {p}")).unwrap_or_default();
            Err(Failure::Domain(format!("{}{at}: {e}", e.code())))
        }
    }
}

fn query_eval(corpus: &Path, q: &str) -> CmdResult {
    let objects: Vec<CorpusObject> = serde_json::from_str(&read(corpus)?)
        .map_err(|e| Failure::Domain(format!("{}: {e}", corpus.display())))?;
    let ast = parse_query(q).map_err(|e| Failure::Domain(format!("{}: {e}", e.code())))?;
    let mut index = Index::new();
    for o in &objects {
        let doc = IndexedDoc::new(&o.title, &o.body, o.context.values().map(String::as_str), Timestamp::SIM_EPOCH);
        index.index_object(&o.id, doc);
    }
    for (id, score) in index.evaluate(&ast) {
        println!("{}", serde_json::json!({"id": id, "score": score}));
    }
    Ok(())
}

fn stanza_check(file: &Path, expect: Expect) -> CmdResult {
    let text = read(file)?;
    let mut bad = 0;
    let mut total = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() && matches!(expect, Expect::Canonical) {
            continue;
        }
        total += 1;
        let n = i + 1;
        let ok = match (check_line(line.as_bytes()), expect) {
            (Verdict::Canonical(s), Expect::Canonical) => {
                println!("ok {n} {}", s.kind);
                true
            }
            (Verdict::NonCanonical { canonical, .. }, Expect::Canonical) => {
                println!("non-canonical {n}: expected {}", String::from_utf8_lossy(&canonical).trim_end());
                false
            }
            (Verdict::Rejected(CodecError::Malformed(m)), Expect::Malformed) => {
                println!("ok {n} malformed: {m}");
                true
            }
            (Verdict::Rejected(e), _) => {
                println!("rejected {n}: {}: {e}", e.code());
                false
            }
            (_, Expect::Malformed) => {
                println!("accepted {n}: expected malformed");
                false
            }
        };
        if !ok {
            bad += 1;
        }
    }
    if bad > 0 {
        return Err(Failure::Domain(format!("{bad} of {total} lines failed")));
    }
    println!("{total} lines ok");
    Ok(())
}
