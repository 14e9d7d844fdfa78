use clap::Parser;

fn main() {
    // clap exits with code 2 on usage errors
    let cli = fusedet::cli::Cli::parse();
    if let Err(e) = fusedet::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
