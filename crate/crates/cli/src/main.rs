use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use linear_moe::harness::{
    gen_mqar, run_bench, run_verify, train_to_dir, write_bench_table, RunConfig, Suite, VerifyOptions, OUTPUT_ROOT_ENV,
};
use linear_moe::lsm::Fault;
use linear_moe::Result;

#[derive(Parser)]
#[command(name = "lmoe", version, about = "Linear-MoE toy training, verification and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle suites; exits nonzero if any check fails.
    Verify {
        /// Run only these suites (repeatable).
        #[arg(long, value_parser = parse_suite)]
        only: Vec<Suite>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Train a toy model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep sequence length at a fixed token budget.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a multi-query associative recall dataset as JSON.
    GenMqar {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        pairs: usize,
        #[arg(long)]
        queries: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        examples: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    ChunkDecay,
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse().map_err(|e: linear_moe::Error| e.to_string())
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn resolve(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        output_root().join(p)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn verify(only: Vec<Suite>, report: Option<PathBuf>, fault: Option<FaultArg>) -> Result<bool> {
    let fault = fault.map(|FaultArg::ChunkDecay| Fault::ChunkDecayOffByOne);
    let r = run_verify(&VerifyOptions { only, fault });
    for s in &r.suites {
        let failed: Vec<_> = s.failures().collect();
        println!(
            "{:<8} {}  {}/{} checks  {:.2}s",
            s.suite.name(),
            if s.passed { "PASS" } else { "FAIL" },
            s.checks.len() - failed.len(),
            s.checks.len(),
            s.seconds
        );
        for c in failed {
            match &c.error {
                Some(e) => println!("    {}: error: {e}", c.name),
                None => println!("    {}: {:e} (tolerance {:e})", c.name, c.value, c.tolerance),
            }
        }
    }
    if let Some(path) = report {
        write_file(&resolve(&path), &serde_json::to_string_pretty(&r)?)?;
    }
    Ok(r.passed)
}

fn train(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = cfg.output_dir("train");
    let (_, summary) = train_to_dir(&cfg, &dir)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn bench(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = cfg.output_dir("bench");
    let report = run_bench(&cfg.bench, cfg.seed)?;
    linear_moe::harness::write_bench(&dir, &report)?;
    write_bench_table(&mut std::io::stdout().lock(), &report)?;
    println!("time/token growth: {} {:.2}x, attention {:.2}x", report.instance, report.lsm_growth, report.attention_growth);
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Verify { only, report, inject_fault } => verify(only, report, inject_fault),
        Command::Train { config } => train(&config).map(|()| true),
        Command::Bench { config } => bench(&config).map(|()| true),
        Command::GenMqar { seed, pairs, queries, out, examples, vocab } => gen_mqar(seed, pairs, vocab, queries, examples)
            .and_then(|d| write_file(&resolve(&out), &d.to_json()?))
            .map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
