use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nmpc_tuner::summary::render_table;
use nmpc_tuner::{run, summarize, Error, ProblemRegistry, RunConfig, TimingKind};

#[derive(Parser)]
#[command(name = "nmpc-tune", version, about = "Randomized tuning of NMPC settings against closed-loop requirements")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample candidate settings, tune them and write the result files.
    Tune(TuneArgs),
    /// Re-check a finished run and print its survivors.
    Summarize {
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
    },
}

/// Every flag overrides the key of the same name in the config file.
#[derive(Args)]
struct TuneArgs {
    /// TOML file with keys named as in the config struct.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    n_trials: Option<usize>,
    #[arg(long)]
    nb: Option<usize>,
    #[arg(long)]
    nsb: Option<usize>,
    #[arg(long)]
    dev_acc: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    c_max: Option<f64>,
    /// Scenario length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    /// wallclock or cost-model.
    #[arg(long)]
    timing_mode: Option<TimingKind>,
    #[arg(long)]
    timing_repeats: Option<u32>,
    /// Seconds per stage evaluation in cost-model timing.
    #[arg(long)]
    c_eval: Option<f64>,
    /// Write every closed-loop report under DIR/reports.
    #[arg(long)]
    dump_reports: bool,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl TuneArgs {
    fn config(&self) -> nmpc_tuner::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    c.$f = v;
                }
            )*};
        }
        set!(problem, n_trials, nb, nsb, dev_acc, gamma, eps, c_max, duration, seed, jobs, timing_mode, timing_repeats, out);
        if self.c_eval.is_some() {
            c.c_eval = self.c_eval;
        }
        c.dump_reports |= self.dump_reports;
        Ok(c)
    }
}

fn error_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownProblem(_) => 2,
        _ => 1,
    }
}

fn tune(args: &TuneArgs) -> nmpc_tuner::Result<u8> {
    let config = args.config()?;
    let outcome = run(&config, &ProblemRegistry::with_builtins())?;
    let r = &outcome.result;
    println!(
        "{} candidates, {} surviving; results in {}",
        r.records.len(),
        r.survivors.len(),
        outcome.out_dir.display()
    );
    match &r.best {
        Some(b) => println!("best: candidate {} sigma {} alpha {} cost {:.6e}", b.index, b.sigma, b.alpha, b.cumulative_cost),
        None => println!("no admissible setting"),
    }
    Ok(outcome.exit_code() as u8)
}

fn summarize_dir(dir: &std::path::Path) -> nmpc_tuner::Result<u8> {
    let s = summarize(dir)?;
    print!("{}", render_table(&s));
    println!("elimination curve: {}", s.curve_path.display());
    Ok(s.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Tune(args) => tune(args),
        Command::Summarize { input } => summarize_dir(input),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(error_code(&e))
        }
    }
}
