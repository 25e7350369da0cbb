use clap::Parser;
use switchdiff_cli::args::Cli;

fn main() {
    let cli = Cli::parse();
    if let Err(err) = switchdiff_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(switchdiff_cli::exit_code(&err));
    }
}
