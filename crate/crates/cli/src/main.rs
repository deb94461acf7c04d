use clap::Parser;

fn main() {
    let cli = tsam_cli::Cli::parse();
    if let Err(e) = tsam_cli::run(cli) {
        eprintln!("tsam: {e}");
        std::process::exit(e.exit_code());
    }
}
