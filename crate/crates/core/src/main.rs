use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use wat_protector::interp::{Instance, RunResult, TimeSource};
use wat_protector::ir::{tag_canary_checks, Category, Module};
use wat_protector::overhead::{static_insertion_stats, OverheadReport};
use wat_protector::passes::{apply_passes, PassConfig, PassError, SeedMode};
use wat_protector::rng::emit_host_glue;
use wat_protector::wat::{parse_module, print_module};

const EXIT_USAGE: u8 = 1;
const EXIT_FAILURE: u8 = 2;
const EXIT_TRAP: u8 = 3;

#[derive(Parser)]
#[command(
    name = "protector",
    version,
    about = "Stack canary and stack offset hardening for WebAssembly text modules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PassArg {
    Aslr,
    Canary,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Harden a module.
    Protect {
        input: PathBuf,
        #[arg(long, value_enum)]
        pass: Option<PassArg>,
        /// Permute same-signature table slots and rewrite constant call sites.
        #[arg(long)]
        shuffle_table: bool,
        /// With --shuffle-table, refuse when a call site cannot be rewritten.
        #[arg(long)]
        strict: bool,
        /// Leave this function untouched (repeatable).
        #[arg(long = "skip", value_name = "NAME")]
        skip: Vec<String>,
        /// Stack-pointer global to use instead of autodetection.
        #[arg(long, value_name = "NAME")]
        sp: Option<String>,
        /// Seed for the table shuffle.
        #[arg(long)]
        seed: Option<u32>,
        #[arg(long)]
        out: PathBuf,
        /// Write the host import glue script here.
        #[arg(long, value_name = "FILE")]
        emit_glue: Option<PathBuf>,
        /// Make the glue's `time` return this value.
        #[arg(
            long,
            value_name = "N",
            requires = "emit_glue",
            allow_negative_numbers = true
        )]
        glue_time: Option<i32>,
        /// Write the static overhead report here.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Interpret an exported function.
    Run {
        file: PathBuf,
        #[arg(long, value_name = "NAME")]
        invoke: String,
        #[arg(long = "arg", value_name = "N", allow_negative_numbers = true, value_parser = parse_i32_arg)]
        args: Vec<i32>,
        #[arg(long, value_name = "A", requires = "input_hex", value_parser = parse_u32_arg)]
        input_addr: Option<u32>,
        #[arg(long, value_name = "BYTES", requires = "input_addr")]
        input_hex: Option<String>,
        /// Fixed host time; defaults to the system clock.
        #[arg(long, value_name = "N", allow_negative_numbers = true)]
        time: Option<i32>,
        /// Print executed-instruction counters.
        #[arg(long)]
        count: bool,
        /// Print the full run result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Compare a base and a protected run.
    Report {
        #[arg(long, value_name = "RUN_JSON")]
        base: PathBuf,
        #[arg(long, value_name = "RUN_JSON")]
        protected: PathBuf,
        /// Report written by `protect --report`, for the predicted figure.
        #[arg(long, value_name = "REPORT_JSON")]
        stats: Option<PathBuf>,
    },
}

fn parse_wide(s: &str) -> Result<i64, String> {
    let (neg, digits) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let v = match digits
        .strip_prefix("0x")
        .or_else(|| digits.strip_prefix("0X"))
    {
        Some(hex) => i64::from_str_radix(hex, 16),
        None => digits.parse::<i64>(),
    }
    .map_err(|e| format!("`{s}`: {e}"))?;
    Ok(if neg { -v } else { v })
}

/// Accepts signed or unsigned 32-bit spellings, decimal or `0x` hex.
fn parse_i32_arg(s: &str) -> Result<i32, String> {
    let v = parse_wide(s)?;
    if !(i32::MIN as i64..=u32::MAX as i64).contains(&v) {
        return Err(format!("`{s}` does not fit in 32 bits"));
    }
    Ok(v as i32)
}

fn parse_u32_arg(s: &str) -> Result<u32, String> {
    let v = parse_wide(s)?;
    u32::try_from(v).map_err(|_| format!("`{s}` is not a 32-bit address"))
}

/// Rewrites the single-dash pass aliases into `--pass`.
fn expand_aliases(args: impl Iterator<Item = String>) -> Vec<String> {
    args.map(|a| match a.as_str() {
        "-ASLR" => "--pass=aslr".to_string(),
        "-canary" => "--pass=canary".to_string(),
        "-canary_and_ASLR" => "--pass=both".to_string(),
        _ => a,
    })
    .collect()
}

fn read_module(path: &Path) -> Result<Module> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_module(&text).map_err(|e| anyhow::anyhow!("{}:{e}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

enum Failure {
    Usage(String),
    Other(anyhow::Error),
}

macro_rules! failure_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Other(e.into())
            }
        }
    )*};
}

failure_from!(
    anyhow::Error,
    wat_protector::rng::EmbedError,
    wat_protector::overhead::OverheadError,
    wat_protector::interp::InstantiateError,
    wat_protector::interp::InvokeError,
    wat_protector::interp::MemoryAccessError
);

#[allow(clippy::too_many_arguments)]
fn protect(
    input: &Path,
    pass: Option<PassArg>,
    shuffle_table: bool,
    strict: bool,
    skip: Vec<String>,
    sp: Option<String>,
    seed: Option<u32>,
    out: &Path,
    emit_glue: Option<&Path>,
    glue_time: Option<i32>,
    report: Option<&Path>,
) -> Result<u8, Failure> {
    let mut config = match pass {
        None => PassConfig::default(),
        Some(PassArg::Aslr) => PassConfig::aslr(),
        Some(PassArg::Canary) => PassConfig::canary(),
        Some(PassArg::Both) => PassConfig::both(),
    };
    config.enable_table_shuffle = shuffle_table;
    config.strict_shuffle = strict;
    config.skip_names.extend(skip);
    config.sp_override = sp;
    if let Some(s) = seed {
        config.seed_mode = SeedMode::Fixed(s);
    }

    let module = read_module(input)?;
    let outcome = match apply_passes(module.clone(), &config) {
        Ok(o) => o,
        Err(PassError::NoPassEnabled) => {
            return Err(Failure::Usage(
                "nothing to do: give --pass (or an alias) and/or --shuffle-table".into(),
            ))
        }
        Err(e) => return Err(Failure::Other(e.into())),
    };
    write(out, &print_module(&outcome.module))?;

    if let Some(path) = emit_glue {
        let glue = emit_host_glue(&outcome.module, glue_time)?;
        write(path, &glue)?;
    }
    if let Some(shuffle) = &outcome.shuffle {
        for site in &shuffle.uncovered {
            eprintln!(
                "warning: indirect call in {} at instruction {} not rewritten by table shuffle",
                site.function, site.position
            );
        }
    }
    if let Some(path) = report {
        let stats = static_insertion_stats(&module, &outcome.module)?;
        let r = OverheadReport::new(&config.pass_names(), &stats, outcome.shuffle.as_ref());
        write(path, &(r.to_json() + "\n"))?;
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn run(
    file: &Path,
    invoke: &str,
    args: &[i32],
    input_addr: Option<u32>,
    input_hex: Option<&str>,
    time: Option<i32>,
    count: bool,
    json: bool,
) -> Result<u8, Failure> {
    let mut module = read_module(file)?;
    tag_canary_checks(&mut module);
    let time = time.map_or(TimeSource::System, TimeSource::Fixed);
    let mut inst = Instance::instantiate(&module, time)?;
    if let (Some(addr), Some(hex_bytes)) = (input_addr, input_hex) {
        let bytes = hex::decode(hex_bytes.trim())
            .map_err(|e| Failure::Usage(format!("--input-hex: {e}")))?;
        inst.poke_input(addr, &bytes)?;
    }
    let result = inst.invoke(invoke, args)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&result).expect("run result serializes")
        );
    } else if let Some(values) = result.values() {
        for v in values {
            println!("{v}");
        }
    }
    if count && !json {
        print_counters(&result);
    }
    match result.trap() {
        Some(reason) => {
            eprintln!("trap: {reason}");
            Ok(EXIT_TRAP)
        }
        None => Ok(0),
    }
}

fn print_counters(result: &RunResult) {
    for cat in [
        Category::Arithmetic,
        Category::Variable,
        Category::Memory,
        Category::Control,
    ] {
        println!("{:<11} {}", cat.as_str(), result.counters.get(cat));
    }
    println!("{:<11} {}", "total", result.total);
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn report(base: &Path, protected: &Path, stats: Option<&Path>) -> Result<u8, Failure> {
    let base: RunResult = read_json(base)?;
    let protected: RunResult = read_json(protected)?;
    let template = match stats {
        Some(p) => read_json::<OverheadReport>(p)?,
        None => OverheadReport::new(&[], &[], None),
    };
    let mut r = template.with_runs(&base, &protected)?;
    if stats.is_none() {
        r.predicted_extra = None;
    }
    println!("{}", r.to_json());
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Protect {
            input,
            pass,
            shuffle_table,
            strict,
            skip,
            sp,
            seed,
            out,
            emit_glue,
            glue_time,
            report: report_path,
        } => {
            if strict && !shuffle_table {
                return Err(Failure::Usage(
                    "--strict only applies with --shuffle-table".into(),
                ));
            }
            protect(
                &input,
                pass,
                shuffle_table,
                strict,
                skip,
                sp,
                seed,
                &out,
                emit_glue.as_deref(),
                glue_time,
                report_path.as_deref(),
            )
        }
        Command::Run {
            file,
            invoke,
            args,
            input_addr,
            input_hex,
            time,
            count,
            json,
        } => run(
            &file,
            &invoke,
            &args,
            input_addr,
            input_hex.as_deref(),
            time,
            count,
            json,
        ),
        Command::Report {
            base,
            protected,
            stats,
        } => report(&base, &protected, stats.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(expand_aliases(std::env::args())) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}
