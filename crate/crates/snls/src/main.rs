use clap::Parser;

fn main() {
    let cli = snls::cli::Cli::parse();
    std::process::exit(snls::cli::run(cli));
}
