use clap::Parser;
use texmesh_cli::{run, Cli};

fn main() {
    // clap exits with 2 on usage errors, matching config errors
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => println!("{}", serde_json::to_string_pretty(&report).expect("reports are plain JSON")),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
