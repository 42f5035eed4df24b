use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use autoiv::harness::{self, ExperimentPlan, SweepAxis, SweepSpec};

#[derive(Parser)]
#[command(name = "autoiv", version, about = "AutoIV experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by `run` and `sweep`; they override the plan file.
#[derive(clap::Args)]
struct RunArgs {
    /// JSON experiment plan.
    #[arg(long)]
    plan: PathBuf,
    /// Comma-separated seeds replacing the plan's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every grid point of a plan.
    Run(RunArgs),
    /// Aggregate an existing output directory into summary.csv.
    Table {
        #[arg(long)]
        records: PathBuf,
    },
    /// Run a plan once per value of a hyperparameter axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// rep_dim, n_train, alpha or eta.
        #[arg(long)]
        axis: Option<String>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
}

fn load_plan(args: &RunArgs) -> autoiv::Result<ExperimentPlan> {
    let text = fs::read_to_string(&args.plan).map_err(|e| autoiv::Error::Io {
        path: args.plan.clone(),
        source: e,
    })?;
    let mut plan: ExperimentPlan = serde_json::from_str(&text)?;
    if let Some(s) = &args.seeds {
        plan.seeds = s.clone();
    }
    if args.jobs.is_some() {
        plan.jobs = args.jobs;
    }
    if args.out.is_some() {
        plan.out = args.out.clone();
    }
    plan.validate()?;
    Ok(plan)
}

fn report(o: &harness::Outcome) {
    eprintln!(
        "{} runs, {} failed; outputs in {}",
        o.records.len(),
        o.failed,
        o.out.display()
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => load_plan(&args).and_then(|plan| {
            let o = harness::execute(&plan)?;
            print!("{}", harness::render_table(&o.summary));
            report(&o);
            Ok(o.all_succeeded())
        }),
        Command::Table { records } => harness::table(&records).map(|s| {
            print!("{}", harness::render_table(&s));
            true
        }),
        Command::Sweep { run, axis, values } => load_plan(&run).and_then(|plan| {
            let spec = match (axis, values, plan.sweep.clone()) {
                (Some(a), Some(v), _) => SweepSpec {
                    axis: a.parse::<SweepAxis>()?,
                    values: v,
                },
                (a, v, Some(file)) => SweepSpec {
                    axis: a.map(|a| a.parse()).transpose()?.unwrap_or(file.axis),
                    values: v.unwrap_or(file.values),
                },
                _ => {
                    return Err(autoiv::Error::Contract(
                        "sweep needs --axis and --values, or a sweep entry in the plan".into(),
                    ))
                }
            };
            let (outcomes, path) = harness::sweep(&plan, &spec)?;
            outcomes.iter().for_each(report);
            eprintln!("sweep table: {}", path.display());
            Ok(outcomes.iter().all(harness::Outcome::all_succeeded))
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
