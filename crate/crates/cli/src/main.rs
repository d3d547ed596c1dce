use std::process::ExitCode;

use ast_cli::{run, CliError, Command};
use clap::error::ErrorKind;
use clap::Parser;

#[derive(Parser)]
#[command(name = "ast", version, about = "Comment/article retrieval with adaptive sparse star encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let first = first.trim_start_matches("error: ").to_string();
            return fail(CliError::Usage(first));
        }
    };
    match run(&cli.command) {
        Ok(manifest) => {
            eprintln!("wrote {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", e.to_line());
    ExitCode::from(e.exit_code() as u8)
}
