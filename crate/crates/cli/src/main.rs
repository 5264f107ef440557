//! `reloc-kit` — synthetic RGB-D relocalization pipeline driver.

mod args;
mod fail;
mod stages;

use clap::Parser;

use args::{Cli, Command};
use fail::{usage, Fail};

/// Thread cap: `--threads`, else `RELOC_KIT_THREADS`, else all cores.
fn configure_threads(flag: Option<usize>) -> Result<(), Fail> {
    let from_env = match std::env::var("RELOC_KIT_THREADS") {
        Ok(text) => Some(text.parse::<usize>().map_err(|_| {
            usage(
                "threads",
                format!("RELOC_KIT_THREADS must be a thread count, got {text:?}"),
            )
        })?),
        Err(_) => None,
    };
    if let Some(threads) = flag.or(from_env) {
        if threads == 0 {
            return Err(usage("threads", "thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| usage("threads", e.to_string()))?;
    }
    Ok(())
}

fn dispatch(command: &Command) -> Result<(), Fail> {
    match command {
        Command::Gen(args) => stages::cmd_gen(args),
        Command::Iou(args) => stages::cmd_iou(args),
        Command::TrainEncoder(args) => stages::cmd_train_encoder(args),
        Command::Embed(args) => stages::cmd_embed(args),
        Command::TrainGnn(args) => stages::cmd_train_gnn(args),
        Command::Query(args) => stages::cmd_query(args),
        Command::Optimize(args) => stages::cmd_optimize(args),
        Command::Eval(args) => stages::cmd_eval(args),
        Command::Pipeline(args) => stages::cmd_pipeline(args),
    }
}

fn main() {
    let cli = Cli::parse();
    let run = configure_threads(cli.threads).and_then(|()| dispatch(&cli.command));
    if let Err(fail) = run {
        eprintln!("reloc-kit {}: {}", fail.stage, fail.message);
        std::process::exit(fail.code);
    }
}
