use clap::Parser;

fn main() {
    amaq::cli::init_logging();
    let cli = amaq::cli::Cli::parse();
    std::process::exit(amaq::cli::run(cli));
}
