use clap::Parser;

fn main() {
    let cli = spdgan::cli::Cli::parse();
    match spdgan::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
