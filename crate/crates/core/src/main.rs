use clap::Parser;

use soa_core::cli::{execute, Cli};

fn main() {
    match execute(Cli::parse()) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
