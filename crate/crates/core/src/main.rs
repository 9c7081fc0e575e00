use clap::Parser;

fn main() {
    let cli = cvate::cli::Cli::parse();
    if let Err(e) = cvate::cli::run(&cli) {
        eprintln!("error: {}", e.error);
        std::process::exit(e.exit_code());
    }
}
