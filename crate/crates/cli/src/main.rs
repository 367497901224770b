use clap::Parser;
use kao_cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(failure) = execute(cli) {
        eprintln!("{failure}");
        std::process::exit(failure.exit_code());
    }
}
