use bvae_ood_cli::{run, Cli};
use clap::Parser;

fn main() {
    let args: Vec<_> = std::env::args_os().collect();
    let level = match Cli::try_parse_from(&args).map(|c| c.verbose) {
        Ok(0) | Err(_) => "warn",
        Ok(1) => "info",
        Ok(_) => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    std::process::exit(run(args));
}
