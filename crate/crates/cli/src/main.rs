use clap::Parser;

fn main() {
    let cli = dekrr_cli::app::Cli::parse();
    std::process::exit(dekrr_cli::app::main_with(cli));
}
