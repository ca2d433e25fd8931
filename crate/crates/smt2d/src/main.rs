use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(smt2d::cli::run(std::env::args_os()))
}
