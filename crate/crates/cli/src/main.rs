use clap::Parser;

fn main() {
    let cli = physgraph_cli::Cli::parse();
    if let Err(e) = physgraph_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
