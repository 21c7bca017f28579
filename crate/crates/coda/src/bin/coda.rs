use clap::Parser;

fn main() {
    let cli = coda::cli::Cli::parse();
    if let Err(e) = coda::cli::run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
