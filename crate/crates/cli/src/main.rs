//! `drokit`: command-line surface over the toolkit.
//!
//! Exit codes: 0 on success, 1 on domain errors (a JSON error object is
//! written to stderr), 2 on usage errors.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use drokit::curriculum::read_records;
use drokit::engine::{execute, ExecOutcome};
use drokit::evidence::{ground_values, link_schema, ContextFlags};
use drokit::mql::{parse_pipeline, Literal};
use drokit::orchestrator::{
    build_generator, format_table, load_instances, run_dro, run_eval, Backend, DroOptions, OrchestratorError,
    RunConfig, RunMode, Workspace,
};
use drokit::schema::{render_mschema, render_ts, Annotations};
use drokit::synthesis::synthesize;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "drokit", version, about = "Draft, refine and optimize NL-to-MQL generation")]
struct Cli {
    /// JSON run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for sampling, selection and policy training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file, or directory for `eval` and `dro`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel generator requests.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    workers: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Directory of `<collection>.jsonl` files.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Field annotations JSON.
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct GenArgs {
    /// Generator backend: recorded fixtures or a live endpoint.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Mock fixture directory.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Chat-completion endpoint URL for the http backend.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent to the http backend.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Mock,
    Http,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Toy,
    Export,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score generations on an annotated dataset.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Context variant as a use_mschema/use_link/use_ground bit tag, e.g. 101.
        #[arg(long, value_parser = parse_flags)]
        flags: Option<ContextFlags>,
        /// JSONL of {id, response} records replayed instead of generating.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run the Draft, Refine, Optimize loop.
    Dro {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Run name under the runs directory (`--out`, default `runs`).
        #[arg(long)]
        name: Option<String>,
        /// `toy` trains an in-process policy; `export` writes rollout batches for an external trainer.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Number of rounds.
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        iterations: Option<u32>,
        /// Stop after this many completed rounds; rerun to resume.
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        stop_after: Option<u32>,
    },
    /// Synthesize question and query pairs by rejection sampling.
    Synth {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: Option<u64>,
        /// Restrict to these collections.
        #[arg(long)]
        collection: Vec<String>,
    },
    /// Link a draft query to schema fields.
    Link {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        k: Option<u64>,
        /// Render the pruned schema as M-Schema instead of TypeScript.
        #[arg(long)]
        mschema: bool,
        /// Query text, `@file`, or `-` for stdin.
        query: Option<String>,
    },
    /// Verify the draft's equality values against the data.
    Ground {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        k: Option<u64>,
        query: Option<String>,
    },
    /// Parse a query and print its canonical AST.
    Parse { query: Option<String> },
    /// Execute a query against a database directory.
    Exec {
        #[command(flatten)]
        data: DataArgs,
        query: Option<String>,
    },
}

fn parse_flags(s: &str) -> Result<ContextFlags, String> {
    ContextFlags::from_tag(s).ok_or_else(|| format!("expected three 0/1 digits, got {s:?}"))
}

// ---------------------------------------------------------------------------
// Errors and output
// ---------------------------------------------------------------------------

struct Failure {
    kind: String,
    message: String,
}

impl Failure {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Failure {
            kind: kind.into(),
            message: message.into(),
        }
    }
}

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        Failure::new(e.kind(), e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new("io", format!("{}: {e}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| io_failure(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure::new("io", e.to_string()))
        }
    }
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn read_query(arg: Option<&str>) -> Result<String, Failure> {
    match arg {
        None | Some("-") => {
            let mut s = String::new();
            std::io::stdin()
                .read_to_string(&mut s)
                .map_err(|e| Failure::new("io", format!("stdin: {e}")))?;
            Ok(s)
        }
        Some(a) => match a.strip_prefix('@') {
            Some(path) => fs::read_to_string(path).map_err(|e| io_failure(Path::new(path), e)),
            None => Ok(a.to_string()),
        },
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

fn base_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w as usize;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, data: &DataArgs) {
    if let Some(db) = &data.db {
        cfg.db_dir = db.clone();
    }
    if let Some(a) = &data.annotations {
        cfg.annotations = Some(a.clone());
    }
}

fn apply_gen(cfg: &mut RunConfig, gen: &GenArgs) {
    if let Some(b) = gen.backend {
        cfg.generator.backend = match b {
            BackendArg::Mock => Backend::Mock,
            BackendArg::Http => Backend::Http,
        };
    }
    if let Some(f) = &gen.fixtures {
        cfg.generator.fixtures = f.clone();
    }
    if let Some(u) = &gen.endpoint {
        cfg.generator.http.url = u.clone();
    }
    if let Some(m) = &gen.model {
        cfg.generator.http.model = m.clone();
    }
}

fn annotations(cfg: &RunConfig) -> Result<Annotations, Failure> {
    match &cfg.annotations {
        Some(p) => Annotations::load(p).map_err(|e| Failure::new("schema", e.to_string())),
        None => Ok(Annotations::default()),
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(serde::Deserialize)]
struct Prediction {
    id: String,
    response: String,
}

fn cmd_eval(
    cli: &Cli,
    mut cfg: RunConfig,
    dataset: Option<&PathBuf>,
    flags: Option<ContextFlags>,
    predictions: Option<&PathBuf>,
) -> Result<(), Failure> {
    if let Some(d) = dataset {
        cfg.dataset = d.clone();
    }
    let flags = match flags {
        Some(f) => f,
        None => cfg.eval_context_flags()?,
    };
    let replay = match predictions {
        Some(p) => {
            let rows: Vec<Prediction> = read_records(p).map_err(|e| Failure::new("predictions", e.to_string()))?;
            Some(rows.into_iter().map(|r| (r.id, r.response)).collect::<HashMap<_, _>>())
        }
        None => None,
    };
    if replay.is_none() {
        cfg.validate()?;
    }
    let ws = Workspace::load(&cfg)?;
    let instances = load_instances(&cfg.dataset)?;
    let gen = match &replay {
        Some(_) => None,
        None => Some(build_generator(&cfg.generator)?),
    };
    let noop = drokit::generator::FnGenerator(|_: &drokit::generator::GenRequest| {
        Err(drokit::generator::GenError::Unavailable("replay mode".into()))
    });
    let generator: &dyn drokit::generator::Generator = match &gen {
        Some(g) => g.as_ref(),
        None => &noop,
    };
    let report = run_eval(&ws, generator, &instances, &cfg, flags, replay.as_ref());
    let jsonl: String = report
        .records
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect();
    let summary = pretty(&serde_json::to_value(report.summary).expect("serializable"));
    eprint!("{}", format_table(&report.summary));
    match &cli.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            emit(Some(&dir.join("eval.jsonl")), &jsonl)?;
            emit(Some(&dir.join("summary.json")), &summary)?;
            emit(None, &summary)
        }
        None => emit(None, &jsonl),
    }
}

fn cmd_dro(cli: &Cli, cfg: RunConfig, stop_after: Option<u32>) -> Result<(), Failure> {
    let gen = build_generator(&cfg.generator)?;
    let outcome = run_dro(&cfg, gen.as_ref(), DroOptions { stop_after })?;
    for m in &outcome.metrics {
        eprintln!(
            "round {}: pool {} mid {} selected {} heldout COF {:.3} -> {:.3}",
            m.round, m.pool_size, m.mid_size, m.selected, m.heldout_cof_before, m.heldout_cof
        );
    }
    let _ = cli;
    emit(
        None,
        &pretty(&json!({
            "run_dir": outcome.run_dir,
            "resumed_from": outcome.resumed_from,
            "completed_rounds": outcome.completed_rounds,
            "rounds": outcome.metrics,
        })),
    )
}

fn cmd_synth(cli: &Cli, mut cfg: RunConfig, count: Option<u64>, collections: &[String]) -> Result<(), Failure> {
    if let Some(c) = count {
        cfg.synth.target_count = c as usize;
    }
    if !collections.is_empty() {
        cfg.synth.collections = collections.to_vec();
    }
    let ws = Workspace::load(&cfg)?;
    let gen = build_generator(&cfg.generator)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let report = synthesize(&ws.db, &annotations(&cfg)?, gen.as_ref(), &cfg.synth, &mut rng)
        .map_err(|e| Failure::from(OrchestratorError::from(e)))?;
    let jsonl: String = report
        .records
        .iter()
        .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
        .collect();
    emit(cli.out.as_deref(), &jsonl)?;
    eprintln!(
        "{}",
        json!({
            "intents": report.intents,
            "candidates": report.candidates,
            "kept_before_dedupe": report.kept_before_dedupe,
            "kept": report.records.len(),
            "aborted": report.aborted,
        })
    );
    if report.aborted {
        return Err(Failure::new(
            "synthesis_aborted",
            format!(
                "kept {} of {} samples before {} intents passed without progress",
                report.kept_before_dedupe, cfg.synth.target_count, cfg.synth.max_stall
            ),
        ));
    }
    Ok(())
}

fn parse_query(text: &str) -> Result<drokit::mql::Pipeline, Failure> {
    let body = drokit::mql::extract_code_block(text);
    parse_pipeline(&body).map_err(|e| Failure::new("syntax_error", e.to_string()))
}

fn cmd_link(cli: &Cli, mut cfg: RunConfig, k: Option<u64>, mschema: bool, query: Option<&str>) -> Result<(), Failure> {
    if let Some(k) = k {
        cfg.evidence.k = k as usize;
    }
    let draft = parse_query(&read_query(query)?)?;
    let ws = Workspace::load(&cfg)?;
    let schema = ws.schema(&draft.collection)?;
    let linked = link_schema(&draft, schema, &ws.indexes[&draft.collection], cfg.evidence.k)
        .map_err(|e| Failure::from(OrchestratorError::from(e)))?;
    let text = if mschema {
        render_mschema(&linked.pruned)
    } else {
        render_ts(&linked.pruned)
    };
    let paths =
        |s: &std::collections::BTreeSet<drokit::mql::FieldPath>| s.iter().map(|p| p.to_string()).collect::<Vec<_>>();
    emit(
        cli.out.as_deref(),
        &pretty(&json!({
            "collection": draft.collection,
            "extracted": paths(&linked.extracted),
            "fields": paths(&linked.fields),
            "schema_text": text,
        })),
    )
}

fn cmd_ground(cli: &Cli, mut cfg: RunConfig, k: Option<u64>, query: Option<&str>) -> Result<(), Failure> {
    if let Some(k) = k {
        cfg.evidence.k = k as usize;
    }
    let draft = parse_query(&read_query(query)?)?;
    let ws = Workspace::load(&cfg)?;
    ws.schema(&draft.collection)?;
    let evidence = ground_values(
        &draft,
        &ws.db,
        &draft.collection,
        &ws.indexes[&draft.collection],
        cfg.evidence.k,
    )
    .map_err(|e| Failure::from(OrchestratorError::from(e)))?;
    emit(
        cli.out.as_deref(),
        &pretty(&serde_json::to_value(&evidence).expect("serializable")),
    )
}

fn cmd_parse(cli: &Cli, query: Option<&str>) -> Result<(), Failure> {
    let p = parse_query(&read_query(query)?)?;
    emit(cli.out.as_deref(), &pretty(&p.to_ast_json()))
}

fn cmd_exec(cli: &Cli, cfg: RunConfig, query: Option<&str>) -> Result<(), Failure> {
    let p = parse_query(&read_query(query)?)?;
    let db = drokit::engine::Database::load_dir(&cfg.db_dir).map_err(|e| Failure::from(OrchestratorError::from(e)))?;
    match execute(&p, &db) {
        ExecOutcome::Ok(rows) => {
            let rows: Vec<Value> = rows.into_iter().map(|d| Literal::Document(d).to_json()).collect();
            emit(cli.out.as_deref(), &pretty(&Value::Array(rows)))
        }
        other => Err(Failure::new("runtime_error", other.error_message().unwrap_or_default())),
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = base_config(cli)?;
    match &cli.command {
        Command::Eval {
            data,
            gen,
            dataset,
            flags,
            predictions,
        } => {
            apply_data(&mut cfg, data);
            apply_gen(&mut cfg, gen);
            cmd_eval(cli, cfg, dataset.as_ref(), *flags, predictions.as_ref())
        }
        Command::Dro {
            data,
            gen,
            dataset,
            name,
            mode,
            iterations,
            stop_after,
        } => {
            apply_data(&mut cfg, data);
            apply_gen(&mut cfg, gen);
            if let Some(d) = dataset {
                cfg.dataset = d.clone();
            }
            if let Some(n) = name {
                cfg.name = n.clone();
            }
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::Toy => RunMode::Toy,
                    ModeArg::Export => RunMode::Export,
                };
            }
            if let Some(i) = iterations {
                cfg.iterations = *i;
            }
            if let Some(out) = &cli.out {
                cfg.runs_dir = out.clone();
            }
            cmd_dro(cli, cfg, *stop_after)
        }
        Command::Synth {
            data,
            gen,
            count,
            collection,
        } => {
            apply_data(&mut cfg, data);
            apply_gen(&mut cfg, gen);
            cmd_synth(cli, cfg, *count, collection)
        }
        Command::Link {
            data,
            k,
            mschema,
            query,
        } => {
            apply_data(&mut cfg, data);
            cmd_link(cli, cfg, *k, *mschema, query.as_deref())
        }
        Command::Ground { data, k, query } => {
            apply_data(&mut cfg, data);
            cmd_ground(cli, cfg, *k, query.as_deref())
        }
        Command::Parse { query } => cmd_parse(cli, query.as_deref()),
        Command::Exec { data, query } => {
            apply_data(&mut cfg, data);
            cmd_exec(cli, cfg, query.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({"error": {"kind": f.kind, "message": f.message}}));
            ExitCode::from(1)
        }
    }
}
