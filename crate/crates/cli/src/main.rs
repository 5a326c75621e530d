use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = avtag_cli::commands::Cli::parse();
    if let Err(e) = avtag_cli::commands::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
