//! The `coda` command-line tool and local review service.

pub mod service;
pub mod workspace;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coda_core::codebook::{diff_codebooks, parse_codebook, validate_codebook, Codebook, CodebookError};
use coda_core::corpus::{
    corpus_stats, extract_from_documents, load_gold, load_passages, load_records, write_passages, GoldLabels, Passage,
};
use coda_core::experiment::{
    compare_runs, disagreements, execute, read_run_file, report_csv, report_markdown, score_run, write_atomic,
    write_run_file, RunPlan, RunRecord,
};
use coda_core::llm_client::{
    scripted_provider, LlmClient, OpenAiCompatProvider, Provider, ProviderConfig, ResponseCache, Script, CACHE_DIR_ENV,
    DEFAULT_API_KEY_ENV, DEFAULT_CACHE_DIR,
};
use coda_core::prompting::{PromptConfig, Reasoning, Scope};
use thiserror::Error;

use crate::service::AppState;
use crate::workspace::{Workspace, WORKSPACE_ENV};

/// Exit status for input and validation problems.
pub const EXIT_INVALID: i32 = 1;
/// Exit status for runtime and provider failures.
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "coda", version, about = "LLM-assisted deductive coding of text passages")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check, compare and import codebooks.
    #[command(subcommand)]
    Codebook(CodebookCommand),
    /// Extract passages and summarize a corpus.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Code a corpus with a model and write the run record.
    Run(RunArgs),
    /// Score a run against gold labels.
    Report(ReportArgs),
    /// Compare per-code kappa between two runs.
    Compare(CompareArgs),
    /// List the cells where a run disagrees with the gold labels.
    Disagreements(DisagreementArgs),
    /// Serve a workspace over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum CodebookCommand {
    /// Validate a codebook file and print its version.
    Validate { path: PathBuf },
    /// Show code-level differences between two codebook files.
    Diff {
        old: PathBuf,
        new: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Add a codebook file to a workspace as a new version.
    Import {
        path: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, env = WORKSPACE_ENV)]
        workspace: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum CorpusCommand {
    /// Extract keyword passages from a JSON-lines file of documents.
    Extract {
        #[arg(long)]
        keyword: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print word and sentence statistics for a passage file.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScopeArg {
    PerCode,
    FullCodebook,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReasoningArg {
    Cot,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderKind {
    /// Answers from a script file.
    Mock,
    /// Any chat-completions compatible endpoint.
    Openai,
}

#[derive(Debug, Args)]
struct ProviderArgs {
    #[arg(long, value_enum, default_value = "openai")]
    provider: ProviderKind,
    /// Script file for the mock provider.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value = "")]
    base_url: String,
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    api_key_env: String,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    scope: ScopeArg,
    #[arg(long, value_enum)]
    reasoning: ReasoningArg,
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    top_p: f64,
    /// Only score these codes (comma separated).
    #[arg(long, value_delimiter = ',')]
    codes: Option<Vec<String>>,
    /// Run file to write; defaults to `<runs-dir>/<run_id>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long, env = CACHE_DIR_ENV, default_value = DEFAULT_CACHE_DIR)]
    cache_dir: PathBuf,
    #[arg(long)]
    no_cache: bool,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Csv,
    Markdown,
    Json,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to the output extension (`.md`, `.json`), else CSV.
    #[arg(long, value_enum)]
    format: Option<ReportFormat>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct DisagreementArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8787)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, env = WORKSPACE_ENV)]
    workspace: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { 0 };
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_command(command: Command) -> CliResult {
    match command {
        Command::Codebook(c) => codebook_command(c),
        Command::Corpus(c) => corpus_command(c),
        Command::Run(args) => runtime()?.block_on(run(args)),
        Command::Report(args) => report(args),
        Command::Compare(args) => compare(args),
        Command::Disagreements(args) => list_disagreements(args),
        Command::Serve(args) => runtime()?.block_on(serve(args)),
    }
}

fn runtime() -> CliResult<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(failed)
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write_output(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()).map_err(failed),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(failed),
    }
}

fn load_codebook(path: &Path) -> CliResult<Codebook> {
    parse_codebook(&read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_gold_file(path: &Path) -> CliResult<GoldLabels> {
    load_gold(&read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_run(path: &Path) -> CliResult<RunRecord> {
    read_run_file(path).map_err(invalid)
}

fn codebook_command(command: CodebookCommand) -> CliResult {
    match command {
        CodebookCommand::Validate { path } => {
            let bytes = read(&path)?;
            match parse_codebook(&bytes) {
                Ok(cb) => {
                    println!("{}: {} codes, version {}", path.display(), cb.codes.len(), cb.version);
                    Ok(())
                }
                Err(CodebookError::Invalid(_)) => {
                    // report every issue, not just the first
                    let doc: serde_json::Value = serde_json::from_slice(&bytes).map_err(invalid)?;
                    let cb = Codebook::new(
                        doc["name"].as_str().unwrap_or_default(),
                        doc["preamble"].as_str().unwrap_or_default(),
                        serde_json::from_value(doc["codes"].clone()).map_err(invalid)?,
                    );
                    for issue in validate_codebook(&cb) {
                        eprintln!("{}: {issue}", path.display());
                    }
                    Err(invalid("codebook is invalid"))
                }
                Err(e) => Err(invalid(format!("{}: {e}", path.display()))),
            }
        }
        CodebookCommand::Diff { old, new, json } => {
            let diff = diff_codebooks(&load_codebook(&old)?, &load_codebook(&new)?);
            if json {
                println!("{}", serde_json::to_string_pretty(&diff).map_err(failed)?);
                return Ok(());
            }
            for id in &diff.added {
                println!("+ {id}");
            }
            for id in &diff.removed {
                println!("- {id}");
            }
            for c in &diff.changed {
                println!("~ {}.{}", c.code_id, c.field);
                println!("  before: {}", c.before.as_deref().unwrap_or("(none)"));
                println!("  after:  {}", c.after.as_deref().unwrap_or("(none)"));
            }
            if diff.is_empty() {
                println!("no differences");
            }
            Ok(())
        }
        CodebookCommand::Import { path, id, workspace } => {
            let cb = load_codebook(&path)?;
            let ws = Workspace::open(workspace).map_err(failed)?;
            let parent = ws.versions(&id).ok().and_then(|v| v.last().map(|e| e.version.clone()));
            let entry = ws.store_version(&id, &cb, parent.as_deref()).map_err(invalid)?;
            println!("{id} {}", entry.version);
            Ok(())
        }
    }
}

fn corpus_command(command: CorpusCommand) -> CliResult {
    match command {
        CorpusCommand::Extract { keyword, input, out } => {
            if keyword.is_empty() {
                return Err(invalid("--keyword must not be empty"));
            }
            let docs = load_records(&read(&input)?).map_err(|e| invalid(format!("{}: {e}", input.display())))?;
            let passages = extract_from_documents(&docs, &keyword);
            write_atomic(&out, write_passages(&passages).as_bytes()).map_err(failed)?;
            println!("{} passages from {} documents", passages.len(), docs.len());
            Ok(())
        }
        CorpusCommand::Stats { input, json } => {
            let passages = load_passages(&read(&input)?).map_err(|e| invalid(format!("{}: {e}", input.display())))?;
            let s = corpus_stats(&passages);
            if json {
                println!("{}", serde_json::to_string_pretty(&s).map_err(failed)?);
            } else {
                println!("passages: {}", s.n);
                println!("words:     mean {:.2}, sd {:.2}", s.mean_words, s.sd_words);
                println!("sentences: mean {:.2}, sd {:.2}", s.mean_sentences, s.sd_sentences);
            }
            Ok(())
        }
    }
}

fn build_provider(args: &ProviderArgs) -> CliResult<(Arc<dyn Provider>, ProviderConfig)> {
    let cfg = ProviderConfig {
        base_url: args.base_url.clone(),
        api_key_env: args.api_key_env.clone(),
        max_in_flight: args.max_in_flight,
        max_retries: args.max_retries,
    };
    if cfg.max_in_flight == 0 {
        return Err(invalid("--max-in-flight must be at least 1"));
    }
    let provider: Arc<dyn Provider> = match args.provider {
        ProviderKind::Mock => {
            let path = args
                .script
                .as_ref()
                .ok_or_else(|| invalid("--provider mock needs --script"))?;
            let script: Script =
                serde_json::from_slice(&read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            Arc::new(scripted_provider(&script))
        }
        ProviderKind::Openai => Arc::new(OpenAiCompatProvider::from_config(&cfg).map_err(failed)?),
    };
    Ok((provider, cfg))
}

async fn run(args: RunArgs) -> CliResult {
    let cb = load_codebook(&args.codebook)?;
    let passages: Vec<Passage> =
        load_passages(&read(&args.corpus)?).map_err(|e| invalid(format!("{}: {e}", args.corpus.display())))?;
    let mut config = PromptConfig::new(
        match args.scope {
            ScopeArg::PerCode => Scope::PerCode,
            ScopeArg::FullCodebook => Scope::FullCodebook,
        },
        match args.reasoning {
            ReasoningArg::Cot => Reasoning::ChainOfThought,
            ReasoningArg::Direct => Reasoning::Direct,
        },
        args.model.clone(),
    );
    config.temperature = args.temperature;
    config.top_p = args.top_p;
    config.validate().map_err(invalid)?;

    let (provider, provider_cfg) = build_provider(&args.provider)?;
    let mut client = LlmClient::new(provider).configured(&provider_cfg);
    if !args.no_cache {
        client = client.with_cache(ResponseCache::on_disk(&args.cache_dir).map_err(failed)?);
    }

    let mut plan = RunPlan::new(&cb, &passages, &config);
    plan.code_ids = args.codes.clone();
    let record = execute(&plan, &client).await.map_err(invalid)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.runs_dir.join(format!("{}.json", record.run_id)));
    write_run_file(&out, &record).map_err(failed)?;
    println!("{} {}", record.run_id, out.display());
    eprintln!(
        "{} decisions, {} unparseable, {} cache hits, {} provider calls",
        record.decisions.len(),
        record.unparseable_count(),
        record.execution.cache_hits,
        record.execution.provider_calls
    );
    match &record.meta.error {
        None => Ok(()),
        Some(e) => Err(failed(format!("run {} is incomplete: {e}", record.run_id))),
    }
}

fn report(args: ReportArgs) -> CliResult {
    let run = load_run(&args.run)?;
    let gold = load_gold_file(&args.gold)?;
    let report = score_run(&run, &gold).map_err(invalid)?;
    let format =
        args.format.unwrap_or_else(
            || match args.out.as_ref().and_then(|p| p.extension()).and_then(|e| e.to_str()) {
                Some("md") => ReportFormat::Markdown,
                Some("json") => ReportFormat::Json,
                _ => ReportFormat::Csv,
            },
        );
    let text = match format {
        ReportFormat::Csv => report_csv(&report),
        ReportFormat::Markdown => report_markdown(&report),
        ReportFormat::Json => format!("{}\n", serde_json::to_string_pretty(&report).map_err(failed)?),
    };
    write_output(args.out.as_deref(), &text)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into())
}

fn compare(args: CompareArgs) -> CliResult {
    let gold = load_gold_file(&args.gold)?;
    let before = score_run(&load_run(&args.before)?, &gold).map_err(invalid)?;
    let after = score_run(&load_run(&args.after)?, &gold).map_err(invalid)?;
    let cmp = compare_runs(&before, &after).map_err(invalid)?;
    let text = if args.json {
        format!("{}\n", serde_json::to_string_pretty(&cmp).map_err(failed)?)
    } else {
        let mut out = String::from("code_id,kappa_before,kappa_after,delta\n");
        for r in &cmp.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.code_id,
                fmt_opt(r.before),
                fmt_opt(r.after),
                fmt_opt(r.delta)
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{}\n",
            fmt_opt(cmp.mean_before),
            fmt_opt(cmp.mean_after),
            fmt_opt(cmp.delta_mean)
        ));
        out
    };
    write_output(args.out.as_deref(), &text)
}

fn list_disagreements(args: DisagreementArgs) -> CliResult {
    let run = load_run(&args.run)?;
    let gold = load_gold_file(&args.gold)?;
    let found = disagreements(&run, &gold).map_err(invalid)?;
    let text = format!("{}\n", serde_json::to_string_pretty(&found).map_err(failed)?);
    write_output(args.out.as_deref(), &text)
}

async fn serve(args: ServeArgs) -> CliResult {
    let ws = Workspace::open(&args.workspace).map_err(failed)?;
    let (provider, cfg) = build_provider(&args.provider)?;
    let cache = ResponseCache::on_disk(ws.cache_dir()).map_err(failed)?;
    let client = LlmClient::new(provider).configured(&cfg).with_cache(cache);
    let state = Arc::new(AppState::new(ws, client));
    service::serve(state, SocketAddr::new(args.host, args.port))
        .await
        .map_err(failed)
}
