use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mflab::harness::{self, Overrides, Suite};
use mflab::Error;

#[derive(Parser)]
#[command(name = "mflab", version, about = "Numerical checks of calculus and control on Wasserstein space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[command(rename_all = "snake_case")]
enum Command {
    Ito(RunArgs),
    Wentzell(RunArgs),
    LemmaBracket(RunArgs),
    LemmaField(RunArgs),
    Mfc(RunArgs),
    Stopping(RunArgs),
    TransportOracle(RunArgs),
    FunctionalOracle(RunArgs),
    /// List the suites.
    List,
    /// Print the schema of a config section.
    Describe { section: String },
}

#[derive(Args)]
struct RunArgs {
    /// Config file, or bundled:NAME (default: bundled:<suite>).
    #[arg(long)]
    config: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated ladder indices to run.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Multiplier on every upper-bound tolerance.
    #[arg(long, default_value_t = 1.0)]
    tol_scale: f64,
}

fn run(suite: Suite, args: RunArgs) -> i32 {
    let source = args.config.unwrap_or_else(|| format!("bundled:{}", suite.name()));
    let cfg = match harness::load_config(&source) {
        Ok(c) if c.suite == suite => c,
        Ok(c) => {
            eprintln!("error: {source} is a {} config, not {}", c.suite.name(), suite.name());
            return 2;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let ov = Overrides { seed: args.seed, levels: args.levels, jobs: args.jobs, tol_scale: args.tol_scale };
    let result = harness::run(&cfg, &ov);
    let code = harness::exit_code(&result);
    match result {
        Ok(out) => {
            if let Err(e) = out.write(&args.out) {
                eprintln!("error: {e}");
                return 3;
            }
            for g in &out.summary.gates {
                let verdict = if g.pass { "PASS" } else { "FAIL" };
                println!("{verdict} {} = {:e} {} {:e}", g.name, g.value, g.op, g.threshold);
            }
            println!("{}: {}", out.summary.name, if out.summary.pass { "pass" } else { "fail" });
        }
        Err(e) => eprintln!("error: {e}"),
    }
    code
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let code = match cli.command {
        Command::Ito(a) => run(Suite::Ito, a),
        Command::Wentzell(a) => run(Suite::Wentzell, a),
        Command::LemmaBracket(a) => run(Suite::LemmaBracket, a),
        Command::LemmaField(a) => run(Suite::LemmaField, a),
        Command::Mfc(a) => run(Suite::Mfc, a),
        Command::Stopping(a) => run(Suite::Stopping, a),
        Command::TransportOracle(a) => run(Suite::TransportOracle, a),
        Command::FunctionalOracle(a) => run(Suite::FunctionalOracle, a),
        Command::List => {
            for line in harness::list_suites() {
                println!("{line}");
            }
            0
        }
        Command::Describe { section } => match harness::describe(&section) {
            Ok(text) => {
                println!("{text}");
                0
            }
            Err(Error::Config(m)) | Err(Error::InvalidArgument(m)) => {
                eprintln!("error: {m}");
                2
            }
            Err(e) => {
                eprintln!("error: {e}");
                3
            }
        },
    };
    ExitCode::from(code as u8)
}
