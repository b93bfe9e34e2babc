use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use danglesweep::analysis::{export_facts, StatsRecord};
use danglesweep::corpus::{generate_source, workload, WORKLOADS};
use danglesweep::ir::{parse_module, IrError, Module};
use danglesweep::metadata::{deserialize_tables, serialize_tables, MetadataError, ObjectPointerTable};
use danglesweep::pipeline::{bench, check_uaf, compile, runtime_stats, Verdict};
use danglesweep::runtime::{run, ExecutionReport, RuntimeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Analyze,
    Emit,
    Run,
    Stats,
    Bench,
    CheckUaf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// Points-to analysis and dangling-pointer sweeping for `.lir` programs.
#[derive(Debug, Parser)]
#[command(name = "danglesweep", version)]
struct Args {
    /// A `.lir` file, or a directory of them (analyze and stats).
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Generate the input from this seed when no input is given; selects
    /// the workload size in bench mode.
    #[arg(long)]
    seed: Option<u64>,
    /// Synthetic workload for bench mode.
    #[arg(long)]
    workload: Option<String>,
    /// Output file, or output directory for a directory input.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metadata file: written by emit, read by run and check-uaf.
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Write a JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Track address-taken stack slots on the dedicated stack.
    #[arg(long, value_enum, default_value = "on")]
    stack_pointers: Switch,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Run without deferred frees or sweeping.
    #[arg(long)]
    unprotected: bool,
    /// Block each free until the sweeper has handled it.
    #[arg(long)]
    sync_sweep: bool,
    /// Bench repetitions per configuration.
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

enum Failure {
    Parse(String),
    Validation(String),
    Config(String),
    Runtime(String),
    NotPrevented(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Parse(_) => 2,
            Failure::Validation(_) => 3,
            Failure::Config(_) => 4,
            Failure::Runtime(_) => 5,
            Failure::NotPrevented(_) => 6,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Parse(m) | Failure::Validation(m) | Failure::Config(m) | Failure::Runtime(m) | Failure::NotPrevented(m) => m,
        }
    }
}

impl From<MetadataError> for Failure {
    fn from(e: MetadataError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn ir_failure(origin: &str, e: IrError) -> Failure {
    if e.is_syntax() {
        Failure::Parse(format!("{origin}:{e}"))
    } else {
        Failure::Validation(format!("{origin}: {e}"))
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Config(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

/// Write to `--out` when given, stdout otherwise.
fn emit_text(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_report<T: serde::Serialize>(args: &Args, value: &T) -> Result<(), Failure> {
    if let Some(p) = &args.report {
        let json = serde_json::to_string_pretty(value).expect("report serializes");
        write_file(p, json.as_bytes())?;
    }
    Ok(())
}

fn lir_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_failure(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lir"))
        .collect();
    v.sort();
    Ok(v)
}

fn load(path: &Path) -> Result<Module, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    parse_module(&text).map_err(|e| ir_failure(&path.display().to_string(), e))
}

/// The single module named by the input path or the seed.
fn single_module(args: &Args) -> Result<Module, Failure> {
    match (&args.input, args.seed) {
        (Some(p), _) if p.is_dir() => Err(Failure::Config(format!("{}: this mode takes a single file", p.display()))),
        (Some(p), _) => load(p),
        (None, Some(seed)) => parse_module(&generate_source(seed)).map_err(|e| ir_failure(&format!("seed {seed}"), e)),
        (None, None) => Err(Failure::Config("no input: give a .lir path or --seed".into())),
    }
}

fn runtime_config(args: &Args) -> RuntimeConfig {
    let base = if args.unprotected {
        RuntimeConfig::unprotected()
    } else {
        RuntimeConfig {
            stack_protection: args.stack_pointers == Switch::On,
            ..Default::default()
        }
    };
    RuntimeConfig {
        threads: args.threads,
        sync_sweep: args.sync_sweep && !args.unprotected,
        ..base
    }
}

/// Metadata from `--metadata` when given, checked against the module;
/// otherwise freshly compiled.
fn metadata_for(args: &Args, module: &Module) -> Result<ObjectPointerTable, Failure> {
    match &args.metadata {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| io_failure(p, e))?;
            let t = deserialize_tables(&bytes).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            t.check_against(module)?;
            Ok(t)
        }
        None => Ok(compile(module).table),
    }
}

fn cmd_analyze(args: &Args) -> Result<(), Failure> {
    match &args.input {
        Some(dir) if dir.is_dir() => {
            let out = args
                .out
                .as_ref()
                .ok_or_else(|| Failure::Config("a directory input needs --out DIR".into()))?;
            fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
            for p in lir_files(dir)? {
                let m = load(&p)?;
                let facts = export_facts(&compile(&m).analysis, &m);
                let name = p.with_extension("facts");
                write_file(&out.join(name.file_name().unwrap()), facts.as_bytes())?;
            }
            Ok(())
        }
        _ => {
            let m = single_module(args)?;
            emit_text(args.out.as_deref(), &export_facts(&compile(&m).analysis, &m))
        }
    }
}

fn cmd_emit(args: &Args) -> Result<(), Failure> {
    let m = single_module(args)?;
    let path = args
        .metadata
        .as_ref()
        .or(args.out.as_ref())
        .ok_or_else(|| Failure::Config("emit needs --metadata PATH or --out PATH".into()))?;
    let table = compile(&m).table;
    write_file(path, &serialize_tables(&table))?;
    println!("{} objects, {} records -> {}", table.objects.len(), table.record_count(), path.display());
    Ok(())
}

fn runtime_failure(r: &ExecutionReport) -> Option<Failure> {
    if r.traps.is_empty() && r.faults.is_empty() {
        return None;
    }
    let mut m = String::new();
    for t in &r.traps {
        let _ = write!(m, "trap {:?} at {}#{} (thread {}); ", t.kind, t.func, t.index, t.thread);
    }
    for f in &r.faults {
        let _ = write!(m, "fault {f:?}; ");
    }
    Some(Failure::Runtime(m.trim_end_matches("; ").to_string()))
}

fn cmd_run(args: &Args) -> Result<(), Failure> {
    let m = single_module(args)?;
    let table = metadata_for(args, &m)?;
    let r = run(&m, &table, runtime_config(args))?;
    emit_text(args.out.as_deref(), &r.to_text())?;
    write_report(args, &r)?;
    runtime_failure(&r).map_or(Ok(()), Err)
}

fn stats_row(m: &Module, args: &Args) -> Result<StatsRecord, Failure> {
    let c = compile(m);
    let r = run(m, &c.table, runtime_config(args))?;
    Ok(runtime_stats(c.stats(m), &r))
}

fn cmd_stats(args: &Args) -> Result<(), Failure> {
    let mut rows: Vec<(String, StatsRecord)> = Vec::new();
    match &args.input {
        Some(dir) if dir.is_dir() => {
            for p in lir_files(dir)? {
                let m = load(&p)?;
                rows.push((p.file_stem().unwrap().to_string_lossy().into_owned(), stats_row(&m, args)?));
            }
        }
        _ => {
            let m = single_module(args)?;
            let name = match (&args.input, args.seed) {
                (Some(p), _) => p.file_stem().unwrap().to_string_lossy().into_owned(),
                (None, seed) => format!("seed-{}", seed.unwrap_or_default()),
            };
            rows.push((name, stats_row(&m, args)?));
        }
    }
    let mut text = format!("module {}\n", StatsRecord::header());
    for (name, s) in &rows {
        let _ = writeln!(text, "{name} {}", s.row());
    }
    emit_text(args.out.as_deref(), &text)?;
    let json: Vec<_> = rows.iter().map(|(n, s)| serde_json::json!({ "module": n, "stats": s })).collect();
    write_report(args, &json)
}

fn cmd_bench(args: &Args) -> Result<(), Failure> {
    let m = match (&args.workload, &args.input) {
        (Some(w), _) => {
            let src = workload(w, args.seed.unwrap_or(0))
                .ok_or_else(|| Failure::Config(format!("unknown workload {w}; expected one of {}", WORKLOADS.join(", "))))?;
            parse_module(&src).map_err(|e| ir_failure(w, e))?
        }
        (None, Some(_)) => single_module(args)?,
        (None, None) => return Err(Failure::Config("bench needs --workload NAME or an input file".into())),
    };
    let c = compile(&m);
    let r = bench(&m, &c, args.threads, args.reps)?;
    emit_text(args.out.as_deref(), &r.to_text())?;
    write_report(args, &r)
}

fn cmd_check_uaf(args: &Args) -> Result<(), Failure> {
    let m = single_module(args)?;
    let mut c = compile(&m);
    if args.metadata.is_some() {
        c.table = metadata_for(args, &m)?;
    }
    let r = check_uaf(&m, &c, args.stack_pointers == Switch::On)?;
    let text = format!(
        "{}\nunprotected stale_reads={} stale_writes={} traps={}\nprotected stale_reads={} stale_writes={} null_traps={} nullified={}\n",
        r.verdict.as_str(),
        r.unprotected.stale_reads,
        r.unprotected.stale_writes,
        r.unprotected.traps.len(),
        r.protected.stale_reads,
        r.protected.stale_writes,
        r.protected.null_traps(),
        r.protected.nullified(),
    );
    emit_text(args.out.as_deref(), &text)?;
    write_report(
        args,
        &serde_json::json!({ "verdict": r.verdict, "unprotected": r.unprotected, "protected": r.protected }),
    )?;
    if r.verdict == Verdict::NotPrevented {
        return Err(Failure::NotPrevented("protected run still touched freed memory".into()));
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(4);
        }
        Err(e) => e.exit(),
    };
    if args.threads == 0 || args.threads > danglesweep::runtime::memory::MAX_THREADS {
        eprintln!("error: --threads must be between 1 and {}", danglesweep::runtime::memory::MAX_THREADS);
        return ExitCode::from(4);
    }
    let result = match args.mode {
        Mode::Analyze => cmd_analyze(&args),
        Mode::Emit => cmd_emit(&args),
        Mode::Run => cmd_run(&args),
        Mode::Stats => cmd_stats(&args),
        Mode::Bench => cmd_bench(&args),
        Mode::CheckUaf => cmd_check_uaf(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
