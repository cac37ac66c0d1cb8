use std::process::ExitCode;

fn main() -> ExitCode {
    gpmseg::cli::main_with_args(std::env::args_os())
}
