use clap::Parser;
use rope_probe_cli::args::Cli;

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = rope_probe_cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(rope_probe_cli::exit_code(&e));
    }
}
