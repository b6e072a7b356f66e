use clap::Parser;
use ctrls_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli, std::env::vars()) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
