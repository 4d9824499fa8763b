use clap::Parser;

use sfi_separation::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
