use clap::Parser;

use pvdta::cli::{execute, init_logging, report_error, Cli};
use pvdta::{EXIT_OK, EXIT_USAGE};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { EXIT_USAGE } else { EXIT_OK });
        }
    };
    init_logging();
    if let Err(err) = execute(&cli) {
        std::process::exit(report_error(&err, cli.json_errors));
    }
}
