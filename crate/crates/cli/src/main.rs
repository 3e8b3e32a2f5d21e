use std::process::ExitCode;

fn main() -> ExitCode {
    mapd_cli::run_cli(std::env::args_os())
}
