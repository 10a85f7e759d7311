use clap::Parser;

fn main() {
    std::process::exit(mfglab::cli::main_with(mfglab::cli::Cli::parse()));
}
