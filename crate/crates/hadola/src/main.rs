use clap::Parser;

fn main() {
    hadola::cli::init_thread_pool();
    let cli = hadola::cli::Cli::parse();
    if let Err(err) = hadola::cli::execute(cli) {
        eprintln!("error: {err}");
        std::process::exit(hadola::cli::exit_code(&err));
    }
}
