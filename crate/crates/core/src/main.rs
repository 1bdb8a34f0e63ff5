use clap::Parser;
use shapereg::cli::{self, Cli};

fn main() {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(cli::exit_code(&e));
    }
}
