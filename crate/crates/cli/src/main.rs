use std::process::ExitCode;

use clap::Parser;
use gems_cli::args::{split_overrides, Cli, Command};
use gems_cli::commands::*;
use gems_cli::{error_line, exit_code, Context};

fn run(cli: Cli, overrides: &[(String, String)]) -> gems_core::Result<()> {
    let common = cli.command.common();
    let ctx = Context::load(common.config.as_deref(), overrides, common.out.as_deref())?;
    let written = match &cli.command {
        Command::GenData(_) => cmd_gen_data(&ctx)?,
        Command::Pretrain(_) => cmd_pretrain(&ctx)?,
        Command::NullspaceBuild { checkpoint, .. } => cmd_nullspace_build(&ctx, checkpoint.as_deref())?,
        Command::Train { base, projectors, .. } => cmd_train(&ctx, base.as_deref(), projectors.as_deref())?,
        Command::Eval {
            checkpoint, data, split, ..
        } => cmd_eval(&ctx, checkpoint, data.as_deref(), split)?,
        Command::Conflict { run, .. } => cmd_conflict(run)?,
        Command::Audit(_) => cmd_audit(&ctx)?,
        Command::Ablate { seeds, .. } => {
            let (dir, text) = cmd_ablate(&ctx, *seeds)?;
            print!("{text}");
            dir
        }
    };
    println!("{}", written.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (argv, overrides) = match split_overrides(std::env::args_os().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("gems-error code=2 kind=config msg={}", serde_json::Value::String(msg));
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
