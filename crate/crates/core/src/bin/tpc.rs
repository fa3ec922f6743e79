use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = tpc_core::cli::Cli::parse();
    if let Err(e) = tpc_core::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
