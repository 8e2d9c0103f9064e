use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chunkferry::agent::{self, AgentConfig};
use chunkferry::harness::experiment::{run_experiment, ExperimentError, Scenario};
use chunkferry::integrity::{whole_file_digest, Algorithm, IntegrityError};
use chunkferry::orchestrator::{
    self, emit_report, Endpoint, FilePair, IntegrityMode, ReportFormat, TransferError,
    TransferOptions, TransferSpec,
};
use chunkferry::planner::{plan_chunks, PlannerConfig, MIB};
use chunkferry::protocol::BANNER;

const USAGE: i32 = 1;
const IO: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "chunkferry",
    about = "Chunked parallel file transfer",
    disable_version_flag = true
)]
struct Cli {
    /// Print the protocol banner and exit.
    #[arg(short = 'V', long)]
    version: bool,

    /// error, warn, info, debug or trace.
    #[arg(
        long,
        global = true,
        env = "CHUNKFERRY_LOG_LEVEL",
        default_value = "warn"
    )]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run a mover agent serving one directory.
    Serve(ServeArgs),
    /// Copy files from one agent to another.
    Transfer(TransferArgs),
    /// Continue an interrupted transfer from its journal.
    Resume(ResumeArgs),
    /// Print the digest of a local file.
    Verify(VerifyArgs),
    /// Show how a file of a given size would be chunked.
    Plan(PlanArgs),
    /// Run a benchmark scenario on loopback agents.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, env = "CHUNKFERRY_LISTEN", default_value = "127.0.0.1:4040")]
    listen: String,
    #[arg(long, env = "CHUNKFERRY_ROOT")]
    root: PathBuf,
    #[arg(long, env = "CHUNKFERRY_TOKEN")]
    token: String,
    #[arg(long, env = "CHUNKFERRY_MAX_SESSIONS", default_value_t = 64)]
    max_sessions: usize,
    #[arg(long, env = "CHUNKFERRY_IO_BLOCK", default_value_t = agent::DEFAULT_IO_BLOCK)]
    io_block: usize,
}

#[derive(Args, Debug)]
struct Tokens {
    /// Token for both agents.
    #[arg(long, env = "CHUNKFERRY_TOKEN")]
    token: Option<String>,
    /// Token for the source agent, if it differs.
    #[arg(long, env = "CHUNKFERRY_FROM_TOKEN")]
    from_token: Option<String>,
    /// Token for the destination agent, if it differs.
    #[arg(long, env = "CHUNKFERRY_TO_TOKEN")]
    to_token: Option<String>,
}

impl Tokens {
    fn resolve(&self) -> Result<(String, String), Failure> {
        let pick = |own: &Option<String>, side: &str| {
            own.clone()
                .or_else(|| self.token.clone())
                .ok_or_else(|| Failure::usage(format!("no token for the {side} agent (--token)")))
        };
        Ok((
            pick(&self.from_token, "source")?,
            pick(&self.to_token, "destination")?,
        ))
    }
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// text, csv or json-lines.
    #[arg(long, env = "CHUNKFERRY_REPORT", default_value = "text")]
    report: ReportFormat,
}

#[derive(Args, Debug)]
struct TransferArgs {
    /// HOST:PORT/PATH on the source agent.
    #[arg(long, env = "CHUNKFERRY_FROM")]
    from: String,
    /// HOST:PORT/PATH on the destination agent.
    #[arg(long, env = "CHUNKFERRY_TO")]
    to: String,
    /// Split the file into chunks spread over all sessions.
    #[arg(long, env = "CHUNKFERRY_CHUNKED")]
    chunked: bool,
    /// none, whole or chunk. Defaults to chunk when chunked, whole otherwise.
    #[arg(long, env = "CHUNKFERRY_INTEGRITY")]
    integrity: Option<IntegrityMode>,
    #[arg(long, env = "CHUNKFERRY_CONCURRENCY")]
    concurrency: Option<u32>,
    #[arg(long, env = "CHUNKFERRY_PARALLELISM")]
    parallelism: Option<u32>,
    #[arg(long, env = "CHUNKFERRY_DEPTH")]
    depth: Option<u32>,
    /// Fixed chunk size in bytes instead of the computed one.
    #[arg(long, env = "CHUNKFERRY_CHUNK_SIZE")]
    chunk_size: Option<u64>,
    #[arg(long, env = "CHUNKFERRY_JOURNAL")]
    journal: Option<PathBuf>,
    /// Retransmissions allowed per chunk before giving up.
    #[arg(long, env = "CHUNKFERRY_RETRIES")]
    retries: Option<u32>,
    #[arg(long, env = "CHUNKFERRY_ALGO", default_value = "MD5")]
    algo: Algorithm,
    #[command(flatten)]
    tokens: Tokens,
    #[command(flatten)]
    output: ReportArgs,
}

#[derive(Args, Debug)]
struct ResumeArgs {
    #[arg(long, env = "CHUNKFERRY_JOURNAL")]
    journal: PathBuf,
    #[command(flatten)]
    tokens: Tokens,
    #[command(flatten)]
    output: ReportArgs,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, env = "CHUNKFERRY_PATH")]
    path: PathBuf,
    #[arg(long, env = "CHUNKFERRY_ALGO", default_value = "MD5")]
    algo: Algorithm,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// File size in bytes.
    #[arg(long, env = "CHUNKFERRY_SIZE")]
    size: u64,
    #[arg(long, env = "CHUNKFERRY_CONCURRENCY", default_value_t = 4)]
    concurrency: u32,
    #[arg(long, env = "CHUNKFERRY_PARALLELISM", default_value_t = 2)]
    parallelism: u32,
    #[arg(long, env = "CHUNKFERRY_DEPTH", default_value_t = 4)]
    depth: u32,
    #[arg(long, env = "CHUNKFERRY_CHUNK_SIZE")]
    chunk_size: Option<u64>,
    #[arg(long, env = "CHUNKFERRY_S_MIN", default_value_t = 4 * MIB)]
    s_min: u64,
    #[arg(long, env = "CHUNKFERRY_S_MAX", default_value_t = 64 * MIB)]
    s_max: u64,
    /// Also list every chunk.
    #[arg(long, env = "CHUNKFERRY_LIST")]
    list: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, env = "CHUNKFERRY_SCENARIO")]
    scenario: PathBuf,
    #[arg(long, env = "CHUNKFERRY_OUT")]
    out: PathBuf,
    /// Where the agents' sandboxes are created.
    #[arg(long, env = "CHUNKFERRY_WORKDIR")]
    workdir: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure {
            code: USAGE,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Failure {
        Failure {
            code: IO,
            message: message.into(),
        }
    }
}

impl From<TransferError> for Failure {
    fn from(e: TransferError) -> Failure {
        Failure {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Failure {
        Failure::io(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Failure {
        let code = match &e {
            ExperimentError::Invalid(_) | ExperimentError::Parse(_) => USAGE,
            ExperimentError::Run { source, .. } => source.exit_code(),
            ExperimentError::Io(_) | ExperimentError::Corrupted { .. } => IO,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// Splits `HOST:PORT/PATH` at the first slash after the port.
fn split_location(s: &str) -> Result<(String, String), Failure> {
    let bad = || Failure::usage(format!("expected HOST:PORT/PATH, got {s:?}"));
    let host_end = if s.starts_with('[') {
        s.find(']').ok_or_else(bad)?
    } else {
        0
    };
    let slash = s[host_end..].find('/').ok_or_else(bad)? + host_end;
    let (addr, path) = (&s[..slash], &s[slash + 1..]);
    if path.is_empty() || !addr[host_end..].contains(':') {
        return Err(bad());
    }
    Ok((addr.to_string(), path.to_string()))
}

fn human(bytes: u64) -> String {
    if bytes >= MIB && bytes.is_multiple_of(MIB) {
        format!("{} MiB", bytes / MIB)
    } else if bytes >= 1024 && bytes.is_multiple_of(1024) {
        format!("{} KiB", bytes / 1024)
    } else {
        format!("{bytes} B")
    }
}

fn serve(a: ServeArgs) -> Result<(), Failure> {
    let mut cfg = AgentConfig::new(a.root, a.token);
    cfg.listen = a.listen;
    cfg.max_sessions = a.max_sessions;
    cfg.io_block = a.io_block;
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    agent::serve(cfg).map_err(|e| Failure::io(e.to_string()))
}

fn print_report(
    report: &orchestrator::TransferReport,
    format: ReportFormat,
    config: &str,
) -> Result<(), Failure> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    emit_report(&mut out, report, format, config)?;
    out.flush()?;
    Ok(())
}

fn transfer(a: TransferArgs) -> Result<(), Failure> {
    let (src_addr, src_path) = split_location(&a.from)?;
    let (dst_addr, dst_path) = split_location(&a.to)?;
    let (src_token, dst_token) = a.tokens.resolve()?;
    let mut spec = TransferSpec::new(
        Endpoint::new(src_addr, src_token),
        Endpoint::new(dst_addr, dst_token),
        vec![FilePair::new(src_path, dst_path)],
    );
    spec.chunked = a.chunked;
    spec.integrity = a.integrity.unwrap_or(if a.chunked {
        IntegrityMode::PerChunk
    } else {
        IntegrityMode::WholeFile
    });
    spec.algo = a.algo;
    if let Some(r) = a.retries {
        spec.retry_limit = r;
    }
    let p = &mut spec.planner;
    p.chunk_size_override = a.chunk_size;
    p.concurrency = a.concurrency.unwrap_or(p.concurrency);
    p.parallelism = a.parallelism.unwrap_or(p.parallelism);
    p.pipeline_depth = a.depth.unwrap_or(p.pipeline_depth);
    spec.validate().map_err(|e| Failure::usage(e.to_string()))?;

    let opts = TransferOptions {
        journal: a.journal,
        ..TransferOptions::default()
    };
    let report = orchestrator::transfer(&spec, &opts)?;
    print_report(&report, a.output.report, &spec.label())
}

fn resume(a: ResumeArgs) -> Result<(), Failure> {
    let (src_token, dst_token) = a.tokens.resolve()?;
    let report = orchestrator::resume(
        &a.journal,
        &src_token,
        &dst_token,
        &TransferOptions::default(),
    )?;
    print_report(&report, a.output.report, "resume")
}

fn verify(a: VerifyArgs) -> Result<(), Failure> {
    let digest = whole_file_digest(&a.path, a.algo).map_err(|e| match e {
        IntegrityError::Io(e) => Failure::io(format!("{}: {e}", a.path.display())),
        e => Failure::usage(e.to_string()),
    })?;
    println!("{}", digest.to_hex());
    Ok(())
}

fn plan(a: PlanArgs) -> Result<(), Failure> {
    let cfg = PlannerConfig {
        chunk_size_override: a.chunk_size,
        concurrency: a.concurrency,
        parallelism: a.parallelism,
        pipeline_depth: a.depth,
        s_min: a.s_min,
        s_max: a.s_max,
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let plan = plan_chunks(0, a.size, &cfg);
    let n = plan.chunk_count();
    println!(
        "S={}, {n} chunk{}",
        human(plan.chunk_size),
        if n == 1 { "" } else { "s" }
    );
    if a.list {
        for c in &plan.chunks {
            println!("{}\t{}\t{}", c.chunk_index, c.offset, c.length);
        }
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), Failure> {
    let scenario = Scenario::load(&a.scenario)?;
    let mut out = BufWriter::new(
        File::create(&a.out).map_err(|e| Failure::io(format!("{}: {e}", a.out.display())))?,
    );
    let result = run_experiment(&scenario, a.workdir.as_deref())?;
    result.write_csv(&mut out)?;
    out.flush()?;
    for config in &result.configs {
        let s = result.throughput(config);
        println!(
            "{config}: {:.1} Mbit/s mean, {:.1} std over {} runs",
            s.mean / 1e6,
            s.std / 1e6,
            s.n
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE as u8 } else { 0 });
        }
    };
    if cli.version {
        println!("{BANNER}");
        return ExitCode::SUCCESS;
    }
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp_millis()
        .init();
    let Some(cmd) = cli.command else {
        eprintln!("usage: chunkferry <serve|transfer|resume|verify|plan|bench> [options]");
        return ExitCode::from(USAGE as u8);
    };
    let result = match cmd {
        Cmd::Serve(a) => serve(a),
        Cmd::Transfer(a) => transfer(a),
        Cmd::Resume(a) => resume(a),
        Cmd::Verify(a) => verify(a),
        Cmd::Plan(a) => plan(a),
        Cmd::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("chunkferry: {}", f.message);
            ExitCode::from(f.code as u8)
        }
    }
}
