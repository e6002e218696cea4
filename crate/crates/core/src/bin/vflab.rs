use std::process::ExitCode;

fn main() -> ExitCode {
    vflab::cli::main_with(std::env::args_os())
}
