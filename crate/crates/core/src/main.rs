use clap::Parser;

fn main() {
    let cli = avsep::cli::Cli::parse();
    if let Err(e) = avsep::cli::run(cli) {
        eprintln!("{e}");
        std::process::exit(e.code());
    }
}
