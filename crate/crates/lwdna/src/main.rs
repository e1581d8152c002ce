use clap::Parser;

fn main() {
    let cli = lwdna::cli::Cli::parse();
    if let Err(e) = lwdna::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
