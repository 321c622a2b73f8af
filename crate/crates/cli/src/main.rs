/// `println!` that ignores a closed stdout.
macro_rules! emit_fmt {
    ($($t:tt)*) => {
        $crate::emit(&format!($($t)*))
    };
}
pub(crate) use emit_fmt;

mod game;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use his_core::config::AblationMode;
use his_core::verify::{run_suite, Suite};

/// Exit status 2: bad invocation or configuration.
/// Exit status 1: the work itself failed.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "his",
    version,
    about = "Shapley credit assignment for cooperative multi-agent training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Run(runs::RunArgs),
    /// Train every (mode, seed) pair and compare.
    Ablate(runs::AblateArgs),
    /// Grid sweep over config keys.
    Sweep(runs::SweepArgs),
    /// Query a characteristic game stored as JSON.
    Game {
        #[arg(value_enum)]
        action: game::GameAction,
        file: PathBuf,
        /// Allocation to test with `core`, as space- or comma-separated
        /// payoffs; defaults to the Shapley values.
        #[arg(long)]
        allocation: Option<String>,
    },
    /// Batch self-checks; prints a JSON report.
    Verify {
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Games, draws per agent count, or gradient fixtures, by suite.
        #[arg(long)]
        count: Option<usize>,
        /// Also write the report (and any failing fixture) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn verify(
    suite: Suite,
    seed: u64,
    count: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let count = count.unwrap_or_else(|| suite.default_count());
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let report = run_suite(suite, seed, count);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(&text);
    let out = out.or_else(|| std::env::var_os("HIS_OUT_DIR").map(PathBuf::from));
    if let Some(dir) = out {
        let write = |name: String, body: &str| -> Result<(), CliError> {
            std::fs::create_dir_all(&dir)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
            let path = dir.join(name);
            std::fs::write(&path, body)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
        };
        write(format!("verify_{suite}.json"), &text)?;
        if let Some(f) = &report.failure {
            write(
                format!("verify_{suite}_failure.json"),
                &serde_json::to_string_pretty(f).expect("serializes"),
            )?;
        }
    }
    for c in &report.checks {
        eprintln!(
            "{} {}: {} (limit {})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.limit
        );
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("verify {suite}: failed")))
    }
}

/// Prints to stdout, ignoring a closed pipe.
pub fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

pub fn parse_modes(s: &str) -> Result<Vec<AblationMode>, CliError> {
    s.split(',')
        .map(|m| {
            m.trim()
                .parse::<AblationMode>()
                .map_err(|e| CliError::Usage(e.to_string()))
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run(a) => runs::run(a),
        Command::Ablate(a) => runs::ablate(a),
        Command::Sweep(a) => runs::sweep(a),
        Command::Game {
            action,
            file,
            allocation,
        } => game::game(action, &file, allocation.as_deref()),
        Command::Verify {
            suite,
            seed,
            count,
            out,
        } => verify(suite, seed, count, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
