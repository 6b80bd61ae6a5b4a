use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = semfield_cli::Cli::parse();
    if let Err(e) = semfield_cli::run(cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(1);
    }
}
