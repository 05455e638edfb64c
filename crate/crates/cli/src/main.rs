mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;
use crate::commands::{output_strings, run, Ctx};
use crate::report::{render, strip_timings, to_value, Clock, CliError, CliResult, RunReport};

const THREADS_VAR: &str = "HALPROBE_THREADS";

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::usage(format!("{THREADS_VAR} must be a non-negative integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot size the worker pool: {e}")))
}

fn execute(cli: &Cli) -> CliResult<RunReport> {
    configure_threads()?;
    let clock = Clock::start();
    let ctx = Ctx {
        no_timestamps: cli.no_timestamps,
    };
    let outcome = run(&ctx, &cli.command)?;
    let mut config = match &cli.command {
        args::Command::Label(a) => to_value(a),
        args::Command::Train(a) => to_value(a),
        args::Command::Eval(a) => to_value(a),
        args::Command::SweepLayers(a) => to_value(a),
        args::Command::SelectNeurons(a) => to_value(a),
        args::Command::PplBaseline(a) => to_value(a),
        args::Command::PromptBaseline(a) => to_value(a),
        args::Command::Attribute(a) => to_value(a),
        args::Command::Rates(a) => to_value(a),
    };
    if let Ok(threads) = std::env::var(THREADS_VAR) {
        config[THREADS_VAR] = threads.into();
    }
    let mut report = RunReport {
        subcommand: cli.command.name().to_string(),
        config,
        timing: (!cli.no_timestamps).then(|| clock.timing()),
        outputs: output_strings(&outcome.outputs),
        reports: outcome.reports,
        details: outcome.details,
    };
    if cli.no_timestamps {
        if let Some(r) = report.reports.as_mut() {
            strip_timings(r);
        }
    }
    Ok(report)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(report) => {
            print!("{}", render(&to_value(&report)));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
