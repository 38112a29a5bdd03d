use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = match ccgan::cli::Cli::try_parse() {
        Ok(c) => c,
        // Help and version go to stdout with status 0; usage errors are configuration errors.
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let mut stdout = std::io::stdout().lock();
    match ccgan::cli::run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
