use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use gazeforge::commands::{self, Action, Cli};
use gazeforge::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("GAZEFORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("GAZEFORGE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot size the worker pool: {e}")))
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn run(cli: Cli) -> Result<bool, Error> {
    init_threads()?;
    match cli.command.into_action()? {
        Action::Run(cmd) => {
            let o = commands::execute(&cmd)?;
            emit(&o.report);
            if let Some(out) = cmd.out() {
                emit(&format!("run manifest: {}\n", out.join(gazeforge::manifest::RUN_MANIFEST_FILE).display()));
            }
            Ok(!o.failed)
        }
        Action::Replay { manifest, out } => {
            let r = commands::replay(&manifest, &out)?;
            emit(&r.outcome.report);
            let n = r.outcome.manifest.as_ref().map_or(0, |m| m.artifacts.len());
            if r.mismatches.is_empty() {
                emit(&format!("replay reproduced all {n} artifacts bitwise\n"));
            } else {
                for m in &r.mismatches {
                    emit(&format!("{m}\n"));
                }
                emit(&format!("replay differs in {} of {n} artifacts\n", r.mismatches.len()));
            }
            Ok(r.mismatches.is_empty() && !r.outcome.failed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
