use clap::Parser;

fn main() {
    let cli = bevloc::cli::Cli::parse();
    if let Err(e) = bevloc::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
