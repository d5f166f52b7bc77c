use std::process::ExitCode;

fn main() -> ExitCode {
    dedtwin::main_with_args(std::env::args_os())
}
