use clap::Parser;

use infnet::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let mut out = String::new();
    let code = match run(&cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    print!("{out}");
    std::process::exit(code);
}
