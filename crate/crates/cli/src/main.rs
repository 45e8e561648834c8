//! `moe-edit`: generate synthetic MoE artifacts, apply edit plans, verify the
//! solver identities and benchmark solvers.
//!
//! Exit status: 0 success, 1 validation, 2 numerical failure, 3 verification breach.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moe_edit::harness::{
    bench_json_lines, generate, load_toml, render_table, run_bench, run_edit, run_verify, BenchGrid, GenerateConfig,
    Generated, VerifyConfig,
};
use moe_edit::spread::{EditPlan, SolverKind, SpreadMode};
use moe_edit::tucker::WhiteningMode;
use moe_edit::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_BREACH: u8 = 3;

#[derive(Parser)]
#[command(name = "moe-edit", version, about = "Closed-form editing of mixture-of-experts layers")]
struct Cli {
    /// Output format for reports on stdout.
    #[arg(long, value_enum, global = true, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic layers, preservation inputs and an edit batch.
    Generate(GenerateArgs),
    /// Apply an edit plan to an artifact directory.
    Edit(EditArgs),
    /// Run the identity-verification suite.
    Verify(VerifyArgs),
    /// Time solvers and spread modes over a grid.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// TOML generation config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct EditArgs {
    /// Artifact directory written by `generate`.
    input: PathBuf,
    /// TOML edit plan; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for the edited artifacts and `report.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated layer indices; defaults to every layer.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    solver: Option<SolverKind>,
    #[arg(long)]
    spread_mode: Option<SpreadMode>,
    /// Tucker ranks `rE,rOut,rIn`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    ranks: Option<Vec<usize>>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    whitening: Option<WhiteningMode>,
    #[arg(long, value_enum)]
    null_space: Option<Switch>,
    /// Re-route the batch through every planned layer.
    #[arg(long)]
    recompute_design: bool,
    /// Overrides the artifact seed recorded in the report.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Runs a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Runs a single lambda instead of the configured list.
    #[arg(long)]
    lambda: Option<f64>,
    /// Directory for `verify.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Restricts the grid to one solver.
    #[arg(long)]
    solver: Option<SolverKind>,
    /// Restricts the grid to one spread mode.
    #[arg(long)]
    spread_mode: Option<SpreadMode>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    null_space: Option<Switch>,
    /// Tucker ranks `rE,rOut,rIn`.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    ranks: Option<Vec<usize>>,
    /// Directory for `bench.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Core(Error),
    Breach,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn parse_ranks(r: Option<Vec<usize>>) -> moe_edit::Result<Option<[usize; 3]>> {
    r.map(|v| {
        <[usize; 3]>::try_from(v.as_slice())
            .map_err(|_| Error::Config(format!("--ranks needs three values rE,rOut,rIn, got {v:?}")))
    })
    .transpose()
}

fn write_file(dir: &Path, name: &str, text: &str) -> moe_edit::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn emit(format: Format, table: String, jsonl: &str) {
    match format {
        Format::Table => print!("{table}"),
        Format::Jsonl => print!("{jsonl}"),
    }
}

fn cmd_generate(args: GenerateArgs) -> Outcome {
    let mut cfg: GenerateConfig = match &args.config {
        Some(p) => load_toml(p)?,
        None => GenerateConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let g = generate(&cfg)?;
    g.write(&args.out)?;
    let m = &cfg.model;
    eprintln!(
        "wrote {} layer(s) E={} K={} d_model={} d_hidden={} and T={} facts to {}",
        m.layers,
        m.experts,
        m.top_k,
        m.d_model,
        m.d_hidden,
        cfg.batch.facts,
        args.out.display()
    );
    Ok(())
}

fn cmd_edit(args: EditArgs, format: Format) -> Outcome {
    let mut model = Generated::load(&args.input)?;
    let mut plan = match &args.config {
        Some(p) => load_toml(p)?,
        None => EditPlan::new(
            (0..model.states.len()).collect(),
            SolverKind::Tucker,
            SpreadMode::ResidualSpread,
            model.config.batch.lambda,
        ),
    };
    if let Some(l) = args.layers {
        plan.layers = l;
    }
    if let Some(s) = args.solver {
        plan.solver = s;
    }
    if let Some(m) = args.spread_mode {
        plan.spread_mode = m;
    }
    if let Some(r) = parse_ranks(args.ranks)? {
        plan.ranks = Some(r);
    }
    if let Some(l) = args.lambda {
        plan.lambda = l;
    }
    if let Some(w) = args.whitening {
        plan.whitening = w;
    }
    if let Some(n) = args.null_space {
        plan.null_space = matches!(n, Switch::On);
    }
    plan.recompute_design |= args.recompute_design;
    if let Some(s) = args.seed {
        model.config.seed = s;
    }
    let report = run_edit(&plan, &mut model)?;
    let jsonl = report.to_json_lines()?;
    if let Some(out) = &args.out {
        model.write(out)?;
        write_file(out, "report.jsonl", &jsonl)?;
    }
    emit(format, report.to_table(), &jsonl);
    Ok(())
}

fn cmd_verify(args: VerifyArgs, format: Format) -> Outcome {
    let mut cfg: VerifyConfig = match &args.config {
        Some(p) => load_toml(p)?,
        None => VerifyConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(l) = args.lambda {
        cfg.lambdas = vec![l];
    }
    let report = run_verify(&cfg)?;
    let jsonl = report.to_json_lines();
    if let Some(out) = &args.out {
        write_file(out, "verify.jsonl", &jsonl)?;
    }
    emit(format, report.to_table(), &jsonl);
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Breach)
    }
}

fn cmd_bench(args: BenchArgs, format: Format) -> Outcome {
    let mut grid: BenchGrid = match &args.config {
        Some(p) => load_toml(p)?,
        None => BenchGrid::default(),
    };
    if let Some(s) = args.seed {
        grid.seed = s;
    }
    if let Some(s) = args.solver {
        grid.solvers = vec![s];
    }
    if let Some(m) = args.spread_mode {
        grid.modes = vec![m];
    }
    if let Some(l) = args.lambda {
        grid.lambda = l;
    }
    if let Some(n) = args.null_space {
        grid.null_space = matches!(n, Switch::On);
    }
    if let Some(r) = parse_ranks(args.ranks)? {
        grid.ranks = Some(r);
    }
    let rows = run_bench(&grid)?;
    let jsonl = bench_json_lines(&rows);
    if let Some(out) = &args.out {
        write_file(out, "bench.jsonl", &jsonl)?;
    }
    emit(format, render_table(&rows), &jsonl);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Edit(a) => cmd_edit(a, cli.format),
        Command::Verify(a) => cmd_verify(a, cli.format),
        Command::Bench(a) => cmd_bench(a, cli.format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Breach) => {
            eprintln!("error: verification breach");
            ExitCode::from(EXIT_BREACH)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION })
        }
    }
}
