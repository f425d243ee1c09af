use clap::Parser;

fn main() {
    let cli = cfpad::cli::Cli::parse();
    let result = cfpad::cli::run(cli);
    if result.exit_code == 0 {
        for path in &result.artifacts {
            println!("wrote {}", path.display());
        }
    }
    std::process::exit(result.exit_code);
}
