use clap::error::ErrorKind;
use clap::Parser;
use coanno_cli::{run, Cli, CliError};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let err = CliError::Config(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            std::process::exit(err.exit_code());
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("{}", err.to_json());
        std::process::exit(err.exit_code());
    }
}
