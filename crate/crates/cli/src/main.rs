use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("CAMCAL_THREADS") {
        let threads = match v.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: CAMCAL_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        };
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let cli = camcal_cli::Cli::parse();
    match camcal_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
