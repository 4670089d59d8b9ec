use clap::Parser;

fn main() {
    let cli = pacloud::cli::Cli::parse();
    if let Err(e) = pacloud::cli::run(cli) {
        eprintln!("error [{}]: {e}", e.category());
        std::process::exit(e.exit_code());
    }
}
