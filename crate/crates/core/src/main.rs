use std::process::ExitCode;

fn main() -> ExitCode {
    dualdenoise::cli::run(std::env::args_os())
}
