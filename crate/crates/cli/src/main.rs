use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(uner_cli::run(std::env::args_os()))
}
