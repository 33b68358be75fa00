use clap::Parser;

fn main() {
    let cli = fdnet::cli::Cli::parse();
    if let Err(e) = fdnet::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
