use clap::Parser;

fn main() {
    let cli = carsr::cli::Cli::parse();
    if let Err(e) = carsr::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
