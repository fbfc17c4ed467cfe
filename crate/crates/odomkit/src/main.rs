use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(odomkit::cli::cli_run(std::env::args()) as u8)
}
