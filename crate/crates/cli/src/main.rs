use clap::Parser;

use hyperrank_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(failure) = run(cli) {
        eprintln!("error: {failure}");
        std::process::exit(failure.exit_code());
    }
}
